"""Detection head: embedding MLP, cosine-similarity classifier, box regressor.

The classifier scores a region embedding against per-class weight vectors
by the cosine of their angle, scaled by a factor gamma, so classification
depends only on direction. Every logit is therefore bounded by gamma in
absolute value, and rescaling the embedding (or any single class row) by a
positive constant leaves the logits unchanged. A plain affine classifier is
provided as the unnormalized baseline the toggle machinery switches against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .rng import make_rng


@dataclass
class CosineClassifierWeights:
    """Per-class weight vectors (background is class 0) plus the scale gamma."""

    W: Tensor  # [C, D]
    gamma: float = 20.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.W.data.ndim != 2 or self.W.shape[0] < 2:
            raise ContractError(f"CosineClassifierWeights: W must be [C>=2, D], got {self.W.shape}")
        if self.gamma <= 0:
            raise ContractError("CosineClassifierWeights: gamma must be > 0")
        if not np.all(np.isfinite(self.W.data)):
            raise ContractError("CosineClassifierWeights: rows must be finite")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]


@dataclass
class LinearClassifierWeights:
    """Unnormalized affine classifier used when embedding normalization is off."""

    W: Tensor  # [C, D]
    b: Tensor  # [C]

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]


@dataclass
class HeadOutput:
    logits: Tensor  # [C] or [N, C]
    deltas: Tensor  # [4*(C-1)] or [N, 4*(C-1)], per foreground class


@dataclass
class HeadParams:
    """Two-layer perceptron to the embedding, plus classifier and regressor."""

    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    classifier: CosineClassifierWeights | LinearClassifierWeights
    bbox_w: Tensor
    bbox_b: Tensor

    @property
    def embedding_dim(self) -> int:
        return self.fc2_w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes


def init_classifier(num_classes: int, dim: int, gamma: float = 20.0, seed: int = 0) -> CosineClassifierWeights:
    """Class rows drawn from a seeded standard normal, normalized to unit length."""
    if num_classes < 2:
        raise ContractError("init_classifier: need at least background + 1 class")
    rng = make_rng(seed, "cosine-classifier-init")
    rows = rng.standard_normal((num_classes, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return CosineClassifierWeights(W=Tensor(rows.astype(np.float32), requires_grad=True), gamma=gamma)


def cosine_logits(x: Tensor, weights: CosineClassifierWeights) -> Tensor:
    """gamma-scaled cosine similarity of x against every class row.

    Accepts a single [D] embedding or a batch [N, D]; both x and the rows
    are normalized with the eps floor before the dot product.
    """
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"cosine_logits: embedding must be 1-d or 2-d, got {x.shape}")
    d = x.shape[-1]
    if d != weights.W.shape[1]:
        raise ShapeError(f"cosine_logits: embedding dim {d} != classifier dim {weights.W.shape[1]}")
    xn = ad.l2_normalize(x, weights.eps)
    wn = ad.l2_normalize(weights.W, weights.eps)
    if x.data.ndim == 1:
        sims = ad.matmul(wn, xn)  # [C]
    else:
        sims = ad.matmul(xn, ad.permute(wn, (1, 0)))  # [N, C]
    return ad.scale(sims, weights.gamma)


def classifier_logits(x: Tensor, classifier: CosineClassifierWeights | LinearClassifierWeights) -> Tensor:
    if isinstance(classifier, CosineClassifierWeights):
        return cosine_logits(x, classifier)
    return ad.linear(x, classifier.W, classifier.b)


def embed(roi_feat: Tensor, params: HeadParams) -> Tensor:
    """Flatten pooled features and run the two-layer MLP to the embedding."""
    if roi_feat.data.ndim == 3:
        flat = ad.reshape(roi_feat, (roi_feat.data.size,))
    elif roi_feat.data.ndim == 4:
        n = roi_feat.shape[0]
        flat = ad.reshape(roi_feat, (n, roi_feat.data.size // n))
    else:
        raise ShapeError(f"embed: roi features must be [C,S,S] or [N,C,S,S], got {roi_feat.shape}")
    h = ad.relu(ad.linear(flat, params.fc1_w, params.fc1_b))
    return ad.linear(h, params.fc2_w, params.fc2_b)


def head_forward(roi_feat: Tensor, params: HeadParams) -> HeadOutput:
    """Pooled region features -> class logits and per-class box deltas.

    Works on a single region [C,S,S] or a batch [N,C,S,S]. The box deltas
    come from an independent affine layer on the same embedding.
    """
    x = embed(roi_feat, params)
    logits = classifier_logits(x, params.classifier)
    deltas = ad.linear(x, params.bbox_w, params.bbox_b)
    return HeadOutput(logits=logits, deltas=deltas)


def intra_class_variance_report(embeddings: np.ndarray, labels: np.ndarray) -> dict:
    """Compare within-class scatter of normalized vs norm-matched raw embeddings.

    For each class, the raw embeddings are rescaled by 1/mean(norm) so both
    populations have mean norm 1; scatter is the mean squared distance to
    the class centroid. Returns per-class values and the overall means.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    per_class = {}
    norm_vals, raw_vals = [], []
    for cls in np.unique(labels):
        e = embeddings[labels == cls]
        if e.shape[0] < 2:
            continue
        norms = np.linalg.norm(e, axis=1)
        if np.any(norms == 0):
            continue
        normalized = e / norms[:, None]
        scaled_raw = e / norms.mean()
        var_n = float(((normalized - normalized.mean(axis=0)) ** 2).sum(axis=1).mean())
        var_r = float(((scaled_raw - scaled_raw.mean(axis=0)) ** 2).sum(axis=1).mean())
        per_class[int(cls)] = {"normalized": var_n, "raw_scaled": var_r}
        norm_vals.append(var_n)
        raw_vals.append(var_r)
    return {
        "per_class": per_class,
        "mean_normalized": float(np.mean(norm_vals)) if norm_vals else 0.0,
        "mean_raw_scaled": float(np.mean(raw_vals)) if raw_vals else 0.0,
    }
