"""COCO-style average precision over IoU thresholds 0.50:0.05:0.95.

Matching is greedy per detection in descending score order against the
unmatched same-class ground truth of highest IoU; AP interpolates the
monotone precision envelope at 101 recall points. Per-image detections
are capped (default 100) by score before matching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import Box, Detection, iou_matrix

IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
DEFAULT_MAX_DETECTIONS_PER_IMAGE = 100


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[tuple[Box, int]],
    iou_thr: float,
) -> list[bool]:
    """True/False (TP/FP) per detection, aligned with the input order.

    Detections are processed in descending score (ties by lower index);
    each may claim at most one unmatched ground truth of its own class,
    the one with the highest IoU, and only if that IoU >= iou_thr.
    """
    flags = [False] * len(dets)
    if not dets:
        return flags
    order = np.argsort([-d.score for d in dets], kind="stable")
    gt_boxes = (
        np.array([tuple(b) for b, _ in gts], dtype=np.float64)
        if gts
        else np.zeros((0, 4))
    )
    gt_classes = np.array([c for _, c in gts], dtype=np.int64) if gts else np.zeros(0, np.int64)
    matched = np.zeros(len(gts), dtype=bool)
    det_boxes = np.array([tuple(d.box) for d in dets], dtype=np.float64)
    ious = iou_matrix(det_boxes, gt_boxes) if len(gts) else np.zeros((len(dets), 0))
    for i in order:
        det = dets[int(i)]
        cand = np.where((gt_classes == det.class_id) & ~matched)[0]
        if cand.size == 0:
            continue
        best = cand[int(np.argmax(ious[i, cand]))]  # ties -> lowest gt index
        if ious[i, best] >= iou_thr:
            matched[best] = True
            flags[int(i)] = True
    return flags


def average_precision(
    scores: Sequence[float], flags: Sequence[bool], num_gt: int
) -> float | None:
    """101-point interpolated AP; None when there is nothing to score.

    Returns 0.0 when ground truth exists but nothing matches (or there are
    detections against an empty ground truth); None only when both the
    ground truth and the detection list are empty.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0:
        return None if scores.size == 0 else 0.0
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = flags[order].astype(np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    interp = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(interp.mean())


def _interp_curve(scores, flags, num_gt) -> list[float]:
    """Interpolated precision at each of the 101 recall grid points."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0 or scores.size == 0:
        return [0.0] * RECALL_GRID.size
    order = np.argsort(-scores, kind="stable")
    tp = flags[order].astype(np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + np.cumsum(1.0 - tp))
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    return [
        float(envelope[i]) if i < recall.size else 0.0 for i in idx
    ]


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    per_threshold_map: dict[float, float]
    map_coco: float
    counts: dict[str, int]
    pr_curves_50: dict[int, list[float]] = field(default_factory=dict)
    thresholds: tuple[float, ...] = IOU_THRESHOLDS
    matching: str = "greedy highest-IoU per detection, 101-point interpolation"
    max_detections_per_image: int = DEFAULT_MAX_DETECTIONS_PER_IMAGE

    def to_json_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "per_threshold_map": {f"{k:.2f}": v for k, v in self.per_threshold_map.items()},
            "map_coco": self.map_coco,
            "counts": dict(self.counts),
            "pr_curves_50": {str(k): v for k, v in self.pr_curves_50.items()},
            "thresholds": list(self.thresholds),
            "matching": self.matching,
            "max_detections_per_image": self.max_detections_per_image,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1)

    @staticmethod
    def from_json_dict(doc: dict) -> "EvalReport":
        return EvalReport(
            per_class_ap={int(k): float(v) for k, v in doc["per_class_ap"].items()},
            per_threshold_map={float(k): float(v) for k, v in doc["per_threshold_map"].items()},
            map_coco=float(doc["map_coco"]),
            counts={k: int(v) for k, v in doc["counts"].items()},
            pr_curves_50={int(k): list(map(float, v)) for k, v in doc.get("pr_curves_50", {}).items()},
            thresholds=tuple(doc.get("thresholds", IOU_THRESHOLDS)),
            matching=doc.get("matching", ""),
            max_detections_per_image=int(doc.get("max_detections_per_image", DEFAULT_MAX_DETECTIONS_PER_IMAGE)),
        )

    def csv_rows(self) -> list[str]:
        """One "class_id,threshold,ap" row per (class, threshold) cell."""
        rows = ["class_id,iou_threshold,ap"]
        for cls in sorted(self._ap_cells):
            for thr in self.thresholds:
                ap = self._ap_cells[cls].get(thr)
                rows.append(f"{cls},{thr:.2f},{'' if ap is None else f'{ap:.10g}'}")
        return rows

    _ap_cells: dict[int, dict[float, float | None]] = field(default_factory=dict, repr=False)


def coco_map(
    dets_per_image: dict[int, Sequence[Detection]],
    gts_per_image: dict[int, Sequence[tuple[Box, int]]],
    class_ids: Sequence[int],
    max_detections_per_image: int = DEFAULT_MAX_DETECTIONS_PER_IMAGE,
) -> EvalReport:
    """Pool matches across images and average AP over classes and thresholds.

    Cells with neither ground truth nor detections are excluded from every
    mean; a class with detections but no ground truth scores 0.
    """
    image_ids = sorted(set(dets_per_image) | set(gts_per_image))
    capped: dict[int, list[Detection]] = {}
    for img in image_ids:
        dets = list(dets_per_image.get(img, []))
        if len(dets) > max_detections_per_image:
            order = np.argsort([-d.score for d in dets], kind="stable")
            dets = [dets[int(i)] for i in order[:max_detections_per_image]]
        capped[img] = dets

    # flags per threshold, pooled across images, keyed by class
    pooled: dict[float, dict[int, tuple[list[float], list[bool]]]] = {
        t: {c: ([], []) for c in class_ids} for t in IOU_THRESHOLDS
    }
    gt_count = {c: 0 for c in class_ids}
    total_dets = 0
    for img in image_ids:
        gts = list(gts_per_image.get(img, []))
        for _, cls in gts:
            if cls in gt_count:
                gt_count[cls] += 1
        dets = capped[img]
        total_dets += len(dets)
        for t in IOU_THRESHOLDS:
            flags = match_detections(dets, gts, t)
            for det, flag in zip(dets, flags):
                if det.class_id in gt_count:
                    scores, fl = pooled[t][det.class_id]
                    scores.append(det.score)
                    fl.append(flag)

    ap_cells: dict[int, dict[float, float | None]] = {c: {} for c in class_ids}
    for t in IOU_THRESHOLDS:
        for c in class_ids:
            scores, flags = pooled[t][c]
            ap_cells[c][t] = average_precision(scores, flags, gt_count[c])

    per_class = {
        c: float(np.mean([v for v in cells.values() if v is not None]))
        for c, cells in ap_cells.items()
        if any(v is not None for v in cells.values())
    }
    per_threshold = {}
    for t in IOU_THRESHOLDS:
        vals = [ap_cells[c][t] for c in class_ids if ap_cells[c][t] is not None]
        if vals:
            per_threshold[t] = float(np.mean(vals))
    all_cells = [v for cells in ap_cells.values() for v in cells.values() if v is not None]
    map_coco_val = float(np.mean(all_cells)) if all_cells else 0.0

    tp_at_50 = 0
    curves = {}
    for c in class_ids:
        scores, flags = pooled[IOU_THRESHOLDS[0]][c]
        tp_at_50 += int(np.sum(flags))
        if ap_cells[c][IOU_THRESHOLDS[0]] is not None:
            curves[c] = _interp_curve(scores, flags, gt_count[c])

    report = EvalReport(
        per_class_ap=per_class,
        per_threshold_map=per_threshold,
        map_coco=map_coco_val,
        counts={
            "gts": int(sum(gt_count.values())),
            "detections": int(total_dets),
            "true_positives_at_50": tp_at_50,
        },
        pr_curves_50=curves,
        max_detections_per_image=max_detections_per_image,
    )
    report._ap_cells = ap_cells
    return report
