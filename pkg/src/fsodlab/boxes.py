"""Axis-aligned box geometry: IoU, NMS, anchors, and delta coding.

Boxes use corner coordinates (x1, y1, x2, y2) in continuous pixel space
with x2 > x1 and y2 > y1; area is (x2-x1)*(y2-y1), no +1 convention.
Array-based helpers operate on float [N,4] arrays; the ``Box`` record is
the annotation-level view of a single rectangle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError

# decoded w/h are capped at exp(LOG_SIZE_CLAMP) times the anchor size to
# keep early-training deltas from exploding
LOG_SIZE_CLAMP = math.log(16.0)


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self) -> "Box":
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ContractError(f"invalid box {self}")
        return self

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_array(self) -> np.ndarray:
        return np.asarray(self, dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return Box(x1, y1, x2, y2)


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float

    def __post_init__(self):
        self.box.validate()
        if not 0.0 <= self.objectness <= 1.0:
            raise ContractError(f"Proposal: objectness {self.objectness} outside [0,1]")


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        self.box.validate()
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"Detection: score {self.score} outside [0,1]")


@dataclass
class AnchorConfig:
    strides: tuple[int, ...] = (8,)
    scales: tuple[float, ...] = (16.0, 32.0)
    ratios: tuple[float, ...] = (1.0,)  # height:width

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.scales = tuple(float(s) for s in self.scales)
        self.ratios = tuple(float(r) for r in self.ratios)
        if not self.strides or not self.scales or not self.ratios:
            raise ContractError("AnchorConfig: strides/scales/ratios must be non-empty")
        if min(self.strides) <= 0 or min(self.scales) <= 0 or min(self.ratios) <= 0:
            raise ContractError("AnchorConfig: all values must be positive")

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


def iou(a: Box | Sequence[float], b: Box | Sequence[float]) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N,4] and [M,4] corner boxes -> [N,M]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy descending-score suppression.

    Ties break toward the lower original index; kept indices come back
    sorted by descending score. A box is suppressed when its IoU with an
    already-kept box exceeds the threshold (strictly greater).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ContractError(f"nms: {boxes.shape[0]} boxes vs {scores.shape[0]} scores")
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    keep: list[int] = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def generate_anchors(cfg: AnchorConfig, feature_h: int, feature_w: int, stride: int) -> np.ndarray:
    """Anchor boxes for one feature level, [H*W*A, 4].

    Cell (i, j) centers its anchors at ((j+0.5)*stride, (i+0.5)*stride);
    for scale s and height:width ratio r the anchor is w = s/sqrt(r),
    h = s*sqrt(r) (area preserved at s^2). Enumeration is cell-major
    (row-major cells), then scale-major, then ratio, matching the channel
    layout of the objectness/delta heads. Anchors may leave image bounds.
    """
    if feature_h <= 0 or feature_w <= 0:
        raise ContractError("generate_anchors: dimensions must be positive")
    combos = []
    for s in cfg.scales:
        for r in cfg.ratios:
            sq = math.sqrt(r)
            combos.append((s / sq, s * sq))
    wh = np.asarray(combos, dtype=np.float64)  # [A, 2]
    cx = (np.arange(feature_w) + 0.5) * stride
    cy = (np.arange(feature_h) + 0.5) * stride
    centers = np.stack(
        [np.tile(cx, feature_h), np.repeat(cy, feature_w)], axis=1
    )  # [H*W, 2], row-major cells
    c = np.repeat(centers, len(combos), axis=0)
    s = np.tile(wh, (feature_h * feature_w, 1))
    half = s / 2.0
    return np.concatenate([c - half, c + half], axis=1)


def encode_deltas(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Box -> (tx, ty, tw, th) relative to anchors, rowwise on [N,4] arrays."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    gcx = gts[:, 0] + 0.5 * gw
    gcy = gts[:, 1] + 0.5 * gh
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """(tx, ty, tw, th) -> boxes; tw/th are clamped to LOG_SIZE_CLAMP first."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], LOG_SIZE_CLAMP))
    h = ah * np.exp(np.minimum(deltas[:, 3], LOG_SIZE_CLAMP))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out
