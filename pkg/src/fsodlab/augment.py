"""Seedable color jitter and pseudo-support-set construction.

Color jitter perturbs brightness, contrast, saturation, and hue in a
uniformly random order, each with a factor drawn uniformly from its
configured interval, and fires with a configurable probability. It moves
no pixels, so box annotations of augmented images are copied verbatim.
All math runs in float64 and is clamped to [0, 1] after every
sub-transform; images come in and go out as float32 RGB in [0, 1].
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ContractError
from .rng import make_rng

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

BRIGHTNESS, CONTRAST, SATURATION, HUE = 0, 1, 2, 3
_TRANSFORM_NAMES = ("brightness", "contrast", "saturation", "hue")


@dataclass
class ColorJitterSpec:
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1  # fraction of a full hue turn, in [0, 0.5]
    apply_probability: float = 0.8

    def __post_init__(self):
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise ContractError("ColorJitterSpec: strengths must be >= 0")
        if not 0 <= self.hue <= 0.5:
            raise ContractError("ColorJitterSpec: hue must be in [0, 0.5]")
        if not 0 <= self.apply_probability <= 1:
            raise ContractError("ColorJitterSpec: apply_probability must be in [0, 1]")


@dataclass
class JitterParams:
    """One concrete draw: whether to apply, in what order, with what factors."""

    applied: bool
    order: tuple[int, ...]
    brightness: float
    contrast: float
    saturation: float
    hue_delta: float

    def factor(self, transform: int) -> float:
        return (self.brightness, self.contrast, self.saturation, self.hue_delta)[transform]


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexagonal-model RGB -> HSV, hue in [0, 1) turns."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    safe = np.where(delta == 0, 1.0, delta)
    s = np.where(maxc == 0, 0.0, delta / np.where(maxc == 0, 1.0, maxc))
    h = np.zeros_like(maxc)
    is_r = (maxc == r) & (delta > 0)
    is_g = (maxc == g) & (delta > 0) & ~is_r
    is_b = (delta > 0) & ~is_r & ~is_g
    h = np.where(is_r, ((g - b) / safe) % 6.0, h)
    h = np.where(is_g, (b - r) / safe + 2.0, h)
    h = np.where(is_b, (r - g) / safe + 4.0, h)
    return np.stack([h / 6.0, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def luma(rgb: np.ndarray) -> np.ndarray:
    return rgb @ LUMA_WEIGHTS


def draw_jitter_params(spec: ColorJitterSpec, rng: np.random.Generator) -> JitterParams:
    """Draw the apply coin, sub-transform order, and all four factors.

    Everything is drawn in a fixed sequence even when the coin says skip,
    so the stream position after a call never depends on the outcome.
    """
    coin = rng.random()
    order = tuple(int(i) for i in rng.permutation(4))
    f_b = rng.uniform(max(0.0, 1.0 - spec.brightness), 1.0 + spec.brightness)
    f_c = rng.uniform(max(0.0, 1.0 - spec.contrast), 1.0 + spec.contrast)
    f_s = rng.uniform(max(0.0, 1.0 - spec.saturation), 1.0 + spec.saturation)
    d_h = rng.uniform(-spec.hue, spec.hue)
    return JitterParams(
        applied=coin < spec.apply_probability,
        order=order,
        brightness=float(f_b),
        contrast=float(f_c),
        saturation=float(f_s),
        hue_delta=float(d_h),
    )


def _apply_one(img: np.ndarray, transform: int, factor: float) -> np.ndarray:
    if transform == BRIGHTNESS:
        return np.clip(factor * img, 0.0, 1.0)
    if transform == CONTRAST:
        mean_gray = luma(img).mean()
        return np.clip(mean_gray + factor * (img - mean_gray), 0.0, 1.0)
    if transform == SATURATION:
        y = luma(img)[..., None]
        return np.clip(y + factor * (img - y), 0.0, 1.0)
    if transform == HUE:
        hsv = rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + factor) % 1.0
        return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    raise ContractError(f"unknown transform index {transform}")


def apply_jitter_params(image: np.ndarray, params: JitterParams) -> np.ndarray:
    """Apply a drawn parameter set to an HxWx3 RGB image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ContractError(f"color_jitter: expected HxWx3 RGB, got {image.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ContractError("color_jitter: pixel values must lie in [0, 1]")
    if not params.applied:
        return np.asarray(image, dtype=np.float32).copy()
    for transform in params.order:
        img = _apply_one(img, transform, params.factor(transform))
    return img.astype(np.float32)


def color_jitter(image: np.ndarray, spec: ColorJitterSpec, rng: np.random.Generator) -> np.ndarray:
    """Randomly jitter one image; all randomness comes from ``rng``."""
    return apply_jitter_params(image, draw_jitter_params(spec, rng))


@dataclass
class Provenance:
    kind: str  # "original" | "augmented"
    source: int | None = None


@dataclass
class SupportSet:
    """Few-shot training pool: (image, annotations) pairs plus provenance."""

    items: list[tuple[np.ndarray, Any]] = field(default_factory=list)
    provenance: list[Provenance] = field(default_factory=list)

    def __post_init__(self):
        if len(self.provenance) != len(self.items):
            raise ContractError("SupportSet: provenance must align with items")
        for tag in self.provenance:
            if tag.kind == "augmented" and not (
                tag.source is not None and 0 <= tag.source < len(self.items)
            ):
                raise ContractError(f"SupportSet: invalid augmented source {tag.source}")

    def __len__(self) -> int:
        return len(self.items)

    @staticmethod
    def from_pairs(pairs: list[tuple[np.ndarray, Any]]) -> "SupportSet":
        return SupportSet(items=list(pairs), provenance=[Provenance("original") for _ in pairs])


def build_pseudo_support_set(
    support: SupportSet, spec: ColorJitterSpec, copies: int, seed: int
) -> SupportSet:
    """Originals followed by ``copies`` independently jittered variants each.

    The output has |support| * (1 + copies) items. Each variant gets its own
    seed-derived stream, so the result is identical under any evaluation
    order or thread count. Annotations are copied verbatim to the variants.
    """
    if copies < 0:
        raise ContractError("build_pseudo_support_set: copies must be >= 0")
    items = [(img.copy(), copy.deepcopy(ann)) for img, ann in support.items]
    provenance = [Provenance("original") for _ in support.items]
    for src_idx, (img, ann) in enumerate(support.items):
        for copy_idx in range(copies):
            rng = make_rng(seed, "pseudo-support", src_idx, copy_idx)
            items.append((color_jitter(img, spec, rng), copy.deepcopy(ann)))
            provenance.append(Provenance("augmented", src_idx))
    return SupportSet(items=items, provenance=provenance)
