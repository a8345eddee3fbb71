"""Annotation model, dataset merging, k-shot sampling, and scene synthesis.

An AnnotationSet is a COCO-like index: a category table, image records,
and box annotations. It serializes to a fixed JSON schema with images as
PNG files referenced relative to the JSON's directory.

The synthetic generator draws parametric sign glyphs (circle, triangle,
square, octagon with bar/dot/arrow motifs) over cluttered backgrounds,
with optional partial occlusion, box blur, and global brightness changes.
The "base" and "target" domain styles use disjoint color palettes, so no
class appearance is shared across domains.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import Box, iou_matrix
from .errors import (
    BoxBoundsError,
    ContractError,
    DanglingReferenceError,
    DataError,
    SchemaError,
)
from .rng import make_rng

# ---------------------------------------------------------------------------
# annotation model
# ---------------------------------------------------------------------------


@dataclass
class Category:
    id: int
    name: str


@dataclass
class ImageRecord:
    id: int
    width: int
    height: int
    file: str | None = None
    pixels: np.ndarray | None = None  # HxWx3 float32 in [0,1]


@dataclass
class Annotation:
    id: int
    image_id: int
    category_id: int
    box: Box


@dataclass
class AnnotationSet:
    categories: list[Category] = field(default_factory=list)
    images: list[ImageRecord] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)

    def validate(self) -> "AnnotationSet":
        cat_ids = set()
        for c in self.categories:
            if c.id in cat_ids:
                raise SchemaError(f"duplicate category id {c.id}")
            cat_ids.add(c.id)
        img_by_id: dict[int, ImageRecord] = {}
        for im in self.images:
            if im.id in img_by_id:
                raise SchemaError(f"duplicate image id {im.id}")
            img_by_id[im.id] = im
        ann_ids = set()
        for a in self.annotations:
            if a.id in ann_ids:
                raise SchemaError(f"duplicate annotation id {a.id}")
            ann_ids.add(a.id)
            if a.image_id not in img_by_id:
                raise DanglingReferenceError(
                    f"annotation {a.id}: dangling image_id {a.image_id}"
                )
            if a.category_id not in cat_ids:
                raise DanglingReferenceError(
                    f"annotation {a.id}: dangling category_id {a.category_id}"
                )
            im = img_by_id[a.image_id]
            x1, y1, x2, y2 = a.box
            if not (x2 > x1 and y2 > y1):
                raise BoxBoundsError(f"annotation {a.id}: degenerate box {a.box}")
            if x1 < 0 or y1 < 0 or x2 > im.width or y2 > im.height:
                raise BoxBoundsError(
                    f"annotation {a.id}: box {a.box} outside image {im.id} "
                    f"({im.width}x{im.height})"
                )
        return self

    def image_by_id(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise DanglingReferenceError(f"no image with id {image_id}")

    def annotations_for_image(self, image_id: int) -> list[Annotation]:
        return [a for a in self.annotations if a.image_id == image_id]

    def category_name(self, category_id: int) -> str:
        for c in self.categories:
            if c.id == category_id:
                return c.name
        raise DanglingReferenceError(f"no category with id {category_id}")

    def instance_counts(self) -> dict[int, int]:
        counts = {c.id: 0 for c in self.categories}
        for a in self.annotations:
            counts[a.category_id] = counts.get(a.category_id, 0) + 1
        return counts

    def structurally_equal(self, other: "AnnotationSet", pixels: bool = True) -> bool:
        if [(c.id, c.name) for c in self.categories] != [
            (c.id, c.name) for c in other.categories
        ]:
            return False
        if [(i.id, i.width, i.height) for i in self.images] != [
            (i.id, i.width, i.height) for i in other.images
        ]:
            return False
        a_side = [(a.id, a.image_id, a.category_id, tuple(a.box)) for a in self.annotations]
        b_side = [(a.id, a.image_id, a.category_id, tuple(a.box)) for a in other.annotations]
        if a_side != b_side:
            return False
        if pixels:
            for ia, ib in zip(self.images, other.images):
                pa = None if ia.pixels is None else _quantize(ia.pixels)
                pb = None if ib.pixels is None else _quantize(ib.pixels)
                if (pa is None) != (pb is None):
                    return False
                if pa is not None and not np.array_equal(pa, pb):
                    return False
        return True


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _quantize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)


def save_annotations(aset: AnnotationSet, path: str | Path) -> None:
    """Write the JSON index plus one PNG per image with embedded pixels.

    PNGs land in ``<stem>_images/`` next to the JSON; records that carry
    only a file reference keep it verbatim.
    """
    aset.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_dir_name = f"{path.stem}_images"
    images_json = []
    for im in aset.images:
        file_ref = im.file
        if im.pixels is not None:
            file_ref = f"{image_dir_name}/img_{im.id:06d}.png"
            out = path.parent / file_ref
            out.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(_quantize(im.pixels), mode="RGB").save(out)
        images_json.append(
            {"id": im.id, "width": im.width, "height": im.height, "file": file_ref}
        )
    doc = {
        "categories": [{"id": c.id, "name": c.name} for c in aset.categories],
        "images": images_json,
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": a.category_id,
                "bbox": [float(v) for v in a.box],
            }
            for a in aset.annotations
        ],
    }
    path.write_text(json.dumps(doc, indent=1))


def load_annotations(path: str | Path, load_pixels: bool = True) -> AnnotationSet:
    """Read an annotation JSON (and its PNGs) back into memory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise DataError(f"annotation file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: malformed JSON: {e}") from e
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    for key in ("categories", "images", "annotations"):
        if not isinstance(doc.get(key), list):
            raise SchemaError(f"{path}: missing or non-array {key!r}")

    try:
        categories = [Category(int(c["id"]), str(c["name"])) for c in doc["categories"]]
        images = []
        for rec in doc["images"]:
            im = ImageRecord(
                id=int(rec["id"]),
                width=int(rec["width"]),
                height=int(rec["height"]),
                file=rec.get("file"),
            )
            images.append(im)
        annotations = []
        for rec in doc["annotations"]:
            bbox = rec["bbox"]
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise SchemaError(f"annotation {rec.get('id')}: bbox must be [x1,y1,x2,y2]")
            annotations.append(
                Annotation(
                    id=int(rec["id"]),
                    image_id=int(rec["image_id"]),
                    category_id=int(rec["category_id"]),
                    box=Box(*(float(v) for v in bbox)),
                )
            )
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{path}: {e}") from e

    aset = AnnotationSet(categories, images, annotations).validate()
    if load_pixels:
        for im in aset.images:
            if im.file is None:
                continue
            png = path.parent / im.file
            if not png.exists():
                raise DataError(f"image {im.id}: file not found: {png}")
            arr = np.asarray(Image.open(png).convert("RGB"), dtype=np.float32) / np.float32(255.0)
            if arr.shape[0] != im.height or arr.shape[1] != im.width:
                raise SchemaError(
                    f"image {im.id}: file is {arr.shape[1]}x{arr.shape[0]}, "
                    f"record says {im.width}x{im.height}"
                )
            im.pixels = arr
    return aset


# ---------------------------------------------------------------------------
# merging
# ---------------------------------------------------------------------------


def merge_datasets(sets: list[AnnotationSet], exclude_names: list[str] | None = None) -> AnnotationSet:
    """Combine several annotation sets into one contiguous index.

    Categories are matched case-insensitively by name (first-seen casing
    wins) and re-numbered from 1 in first-seen order. Categories named in
    ``exclude_names`` are dropped with all their annotations; images keep
    their place only if at least one annotation survives. Image and
    annotation ids are re-issued sequentially.
    """
    if not sets:
        raise ContractError("merge_datasets: need at least one input set")
    excluded = {n.lower() for n in (exclude_names or [])}

    merged_categories: list[Category] = []
    id_by_lower: dict[str, int] = {}
    for aset in sets:
        for c in aset.categories:
            key = c.name.lower()
            if key in excluded or key in id_by_lower:
                continue
            new_id = len(merged_categories) + 1
            id_by_lower[key] = new_id
            merged_categories.append(Category(new_id, c.name))

    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    next_image_id = 1
    next_ann_id = 1
    for aset in sets:
        cat_map = {
            c.id: id_by_lower.get(c.name.lower())  # None when excluded
            for c in aset.categories
        }
        by_image: dict[int, list[Annotation]] = {}
        for a in aset.annotations:
            by_image.setdefault(a.image_id, []).append(a)
        for im in aset.images:
            surviving = [a for a in by_image.get(im.id, []) if cat_map[a.category_id] is not None]
            if not surviving:
                continue
            new_im = ImageRecord(
                id=next_image_id,
                width=im.width,
                height=im.height,
                file=im.file,
                pixels=im.pixels,
            )
            images.append(new_im)
            for a in surviving:
                annotations.append(
                    Annotation(
                        id=next_ann_id,
                        image_id=next_image_id,
                        category_id=cat_map[a.category_id],
                        box=a.box,
                    )
                )
                next_ann_id += 1
            next_image_id += 1
    return AnnotationSet(merged_categories, images, annotations).validate()


# ---------------------------------------------------------------------------
# k-shot episode sampling
# ---------------------------------------------------------------------------


@dataclass
class EpisodeSpec:
    k: int = 5
    seed: int = 0
    classes: list[int] | None = None  # category ids; None = all

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("EpisodeSpec: k must be >= 1")


def sample_k_shot(aset: AnnotationSet, spec: EpisodeSpec) -> tuple[AnnotationSet, AnnotationSet]:
    """Split into a k-instances-per-class support set and the remainder.

    Images are visited in seeded random order; an image is accepted only
    if none of its (in-scope) classes would exceed k instances, where
    classes already at k simply contribute nothing to the support view.
    The remainder holds every unselected image with all its annotations.
    """
    class_ids = list(spec.classes) if spec.classes else [c.id for c in aset.categories]
    class_set = set(class_ids)
    counts = aset.instance_counts()
    for cid in class_ids:
        if counts.get(cid, 0) < spec.k:
            raise DataError(
                f"class {aset.category_name(cid)!r} has {counts.get(cid, 0)} "
                f"instances, fewer than k={spec.k}"
            )

    by_image: dict[int, list[Annotation]] = {}
    for a in aset.annotations:
        by_image.setdefault(a.image_id, []).append(a)

    rng = make_rng(spec.seed, "k-shot")
    order = rng.permutation(len(aset.images))
    need = {cid: spec.k for cid in class_ids}
    taken: dict[int, int] = {cid: 0 for cid in class_ids}
    support_images: list[ImageRecord] = []
    support_anns: list[Annotation] = []
    selected: set[int] = set()

    for idx in order:
        if all(taken[c] == spec.k for c in class_ids):
            break
        im = aset.images[int(idx)]
        anns = [a for a in by_image.get(im.id, []) if a.category_id in class_set]
        if not anns:
            continue
        per_class: dict[int, int] = {}
        for a in anns:
            per_class[a.category_id] = per_class.get(a.category_id, 0) + 1
        # reject when any not-yet-full class would overshoot k
        if any(
            taken[c] < spec.k and taken[c] + n > spec.k for c, n in per_class.items()
        ):
            continue
        # accept only if the image contributes to at least one open class
        contributing = [c for c in per_class if taken[c] < spec.k]
        if not contributing:
            continue
        selected.add(im.id)
        support_images.append(im)
        for a in anns:
            if taken[a.category_id] < spec.k:
                support_anns.append(a)
        for c in contributing:
            taken[c] += per_class[c]

    unmet = [c for c in class_ids if taken[c] != spec.k]
    if unmet:
        names = ", ".join(repr(aset.category_name(c)) for c in unmet)
        raise DataError(f"could not assemble {spec.k} shots for class(es) {names}")

    support = AnnotationSet(
        categories=[replace(c) for c in aset.categories],
        images=support_images,
        annotations=support_anns,
    )
    remainder_images = [im for im in aset.images if im.id not in selected]
    remainder = AnnotationSet(
        categories=[replace(c) for c in aset.categories],
        images=remainder_images,
        annotations=[a for a in aset.annotations if a.image_id not in selected],
    )
    return support, remainder


# ---------------------------------------------------------------------------
# synthetic scene generation
# ---------------------------------------------------------------------------

_SHAPES = ("circle", "triangle", "square", "octagon")
_MOTIFS = ("bar", "dot", "arrow")

# (name, border RGB, fill RGB); the two domains share no colors
_PALETTES = {
    "base": (
        ("red", (0.85, 0.10, 0.10), (0.98, 0.95, 0.90)),
        ("blue", (0.10, 0.20, 0.85), (0.92, 0.96, 1.00)),
        ("yellow", (0.95, 0.80, 0.05), (0.25, 0.25, 0.25)),
        ("white", (0.95, 0.95, 0.95), (0.60, 0.05, 0.05)),
    ),
    "target": (
        ("green", (0.05, 0.65, 0.20), (0.90, 1.00, 0.90)),
        ("purple", (0.55, 0.10, 0.75), (0.98, 0.90, 1.00)),
        ("orange", (1.00, 0.55, 0.05), (0.15, 0.10, 0.05)),
        ("teal", (0.05, 0.60, 0.60), (0.95, 1.00, 1.00)),
    ),
}

_CLUTTER_COLORS = (
    (0.45, 0.42, 0.40),
    (0.55, 0.50, 0.42),
    (0.38, 0.45, 0.35),
    (0.50, 0.50, 0.55),
    (0.42, 0.36, 0.30),
)

_OCCLUDER_COLOR = (0.35, 0.33, 0.31)


@dataclass
class SyntheticSceneConfig:
    num_classes: int = 5
    images: int = 100
    image_size: int = 64
    sign_size_min: float = 18.0
    sign_size_max: float = 36.0
    max_signs_per_image: int = 2
    occlusion_probability: float = 0.3
    occlusion_max_fraction: float = 0.3
    blur_probability: float = 0.2
    blur_kernel: int = 3
    brightness_min: float = 0.8
    brightness_max: float = 1.2
    clutter_density: float = 6.0
    domain_style: str = "base"

    def __post_init__(self):
        if self.domain_style not in _PALETTES:
            raise ContractError(f"domain_style must be one of {sorted(_PALETTES)}")
        for p in (self.occlusion_probability, self.blur_probability):
            if not 0 <= p <= 1:
                raise ContractError("probabilities must be in [0, 1]")
        if not 0 <= self.occlusion_max_fraction < 1:
            raise ContractError("occlusion_max_fraction must be in [0, 1)")
        if self.sign_size_min <= 0 or self.sign_size_max < self.sign_size_min:
            raise ContractError("invalid sign size range")
        if self.sign_size_max > self.image_size:
            raise ContractError("signs must fit inside the image")
        if self.num_classes < 1 or self.images < 1 or self.max_signs_per_image < 1:
            raise ContractError("counts must be positive")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ContractError("blur_kernel must be odd and >= 1")
        max_combos = len(_SHAPES) * len(_MOTIFS)
        if self.num_classes > max_combos:
            raise ContractError(f"at most {max_combos} classes per domain style")


@dataclass
class SignStats:
    image_id: int
    category_id: int
    occluded_fraction: float


def class_appearance(cfg: SyntheticSceneConfig, class_index: int) -> tuple[str, str, str]:
    """(shape, motif, palette name) for a 0-based class index."""
    palette = _PALETTES[cfg.domain_style]
    shape = _SHAPES[class_index % len(_SHAPES)]
    motif = _MOTIFS[(class_index // len(_SHAPES)) % len(_MOTIFS)]
    color = palette[class_index % len(palette)][0]
    return shape, motif, color


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if shape == "octagon":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r) & (np.abs(dx) + np.abs(dy) <= 1.35 * r)
    raise ContractError(f"unknown shape {shape}")


def _motif_mask(motif: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if motif == "bar":
        return (np.abs(dy) <= 0.14 * r) & (np.abs(dx) <= 0.55 * r)
    if motif == "dot":
        return dx * dx + dy * dy <= (0.30 * r) ** 2
    if motif == "arrow":
        up = (dy >= -0.55 * r) & (dy <= 0.15 * r) & (np.abs(dx) <= (dy + 0.55 * r) * 0.6)
        stem = (np.abs(dx) <= 0.12 * r) & (dy > 0.15 * r) & (dy <= 0.55 * r)
        return up | stem
    raise ContractError(f"unknown motif {motif}")


def _box_blur(img: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    out = np.pad(img, ((pad, pad), (0, 0), (0, 0)), mode="edge")
    out = np.lib.stride_tricks.sliding_window_view(out, k, axis=0).mean(axis=-1)
    out = np.pad(out, ((0, 0), (pad, pad), (0, 0)), mode="edge")
    out = np.lib.stride_tricks.sliding_window_view(out, k, axis=1).mean(axis=-1)
    return out


def _render_scene(
    cfg: SyntheticSceneConfig, rng: np.random.Generator, forced_class: int | None
) -> tuple[np.ndarray, list[tuple[int, Box, float]]]:
    """One image plus its (class_index, box, occluded_fraction) records."""
    size = cfg.image_size
    img = np.empty((size, size, 3), dtype=np.float64)
    base_gray = rng.uniform(0.55, 0.75)
    img[:] = base_gray
    img += rng.normal(0.0, 0.02, size=img.shape)

    n_clutter = int(rng.poisson(cfg.clutter_density))
    for _ in range(n_clutter):
        color = _CLUTTER_COLORS[int(rng.integers(len(_CLUTTER_COLORS)))]
        cw = rng.uniform(3, size * 0.25)
        ch = rng.uniform(3, size * 0.25)
        cx = rng.uniform(0, size)
        cy = rng.uniform(0, size)
        x1, x2 = int(max(0, cx - cw / 2)), int(min(size, cx + cw / 2))
        y1, y2 = int(max(0, cy - ch / 2)), int(min(size, cy + ch / 2))
        if x2 > x1 and y2 > y1:
            shade = rng.uniform(0.8, 1.2)
            img[y1:y2, x1:x2] = np.clip(np.asarray(color) * shade, 0, 1)

    yy, xx = np.mgrid[0:size, 0:size]
    yy = yy + 0.5
    xx = xx + 0.5

    n_signs = int(rng.integers(1, cfg.max_signs_per_image + 1))
    records: list[tuple[int, Box, float]] = []
    placed: list[np.ndarray] = []
    for s_idx in range(n_signs):
        cls = int(rng.integers(cfg.num_classes))
        if s_idx == 0 and forced_class is not None:
            cls = forced_class
        shape, motif, _ = class_appearance(cfg, cls)
        border_rgb = _PALETTES[cfg.domain_style][cls % len(_PALETTES[cfg.domain_style])][1]
        fill_rgb = _PALETTES[cfg.domain_style][cls % len(_PALETTES[cfg.domain_style])][2]
        sign_size = rng.uniform(cfg.sign_size_min, cfg.sign_size_max)
        r = sign_size / 2.0

        placed_box = None
        for _attempt in range(20):
            cx = rng.uniform(r, size - r)
            cy = rng.uniform(r, size - r)
            cand = np.array([cx - r, cy - r, cx + r, cy + r])
            if placed and iou_matrix(cand[None, :], np.stack(placed)).max() > 0.05:
                continue
            placed_box = cand
            break
        if placed_box is None:
            continue
        placed.append(placed_box)

        dx = xx - cx
        dy = yy - cy
        outer = _shape_mask(shape, dx, dy, r)
        if not outer.any():
            continue
        border_w = max(1.5, 0.14 * sign_size)
        inner = _shape_mask(shape, dx, dy, max(r - border_w, 1.0))
        img[outer] = border_rgb
        img[inner] = fill_rgb
        motif_px = _motif_mask(motif, dx, dy, r) & inner
        img[motif_px] = border_rgb

        ys, xs = np.nonzero(outer)
        box = Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        records.append((cls, box, 0.0))

    # occluders overdraw after every glyph is placed
    final_records: list[tuple[int, Box, float]] = []
    for cls, box, _ in records:
        frac = 0.0
        if rng.random() < cfg.occlusion_probability:
            frac = float(rng.uniform(0.0, cfg.occlusion_max_fraction))
            bw, bh = box.x2 - box.x1, box.y2 - box.y1
            area = frac * bw * bh
            if area > 0:
                aspect = rng.uniform(0.5, 2.0)
                ow = min(math.sqrt(area * aspect), bw)
                oh = area / ow
                ox = rng.uniform(box.x1, box.x2 - ow)
                oy = rng.uniform(box.y1, box.y2 - oh)
                x1, x2 = int(round(ox)), max(int(round(ox + ow)), int(round(ox)) + 1)
                y1, y2 = int(round(oy)), max(int(round(oy + oh)), int(round(oy)) + 1)
                img[y1:y2, x1:x2] = _OCCLUDER_COLOR
        final_records.append((cls, box, frac))

    if rng.random() < cfg.blur_probability and cfg.blur_kernel > 1:
        img = _box_blur(img, cfg.blur_kernel)
    brightness = rng.uniform(cfg.brightness_min, cfg.brightness_max)
    img = np.clip(img * brightness, 0.0, 1.0)
    return img.astype(np.float32), final_records


def synth_generate_with_stats(
    cfg: SyntheticSceneConfig, seed: int
) -> tuple[AnnotationSet, list[SignStats]]:
    """Generate a dataset plus per-sign occlusion statistics."""
    categories = []
    for i in range(cfg.num_classes):
        shape, motif, color = class_appearance(cfg, i)
        categories.append(Category(i + 1, f"{cfg.domain_style}_{i + 1:02d}_{shape}_{motif}_{color}"))

    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    stats: list[SignStats] = []
    next_ann = 1
    for img_idx in range(cfg.images):
        rng = make_rng(seed, "scene", img_idx)
        forced = img_idx % cfg.num_classes if img_idx < cfg.num_classes else None
        pixels, records = _render_scene(cfg, rng, forced)
        image_id = img_idx + 1
        images.append(
            ImageRecord(id=image_id, width=cfg.image_size, height=cfg.image_size, pixels=pixels)
        )
        for cls, box, frac in records:
            annotations.append(Annotation(next_ann, image_id, cls + 1, box))
            stats.append(SignStats(image_id, cls + 1, frac))
            next_ann += 1
    aset = AnnotationSet(categories, images, annotations).validate()
    return aset, stats


def synth_generate(cfg: SyntheticSceneConfig, seed: int) -> AnnotationSet:
    """Procedurally generate a fully deterministic annotated scene set."""
    return synth_generate_with_stats(cfg, seed)[0]
