"""Two-class IOU / MIOU with a best-threshold sweep."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass
class EvalReport:
    thresholds: list
    per_threshold: list  # (iou_fg, iou_bg, miou) per threshold
    best_threshold: float
    best_miou: float

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "iou_fg", "iou_bg", "miou"])
            for t, (fg, bg, m) in zip(self.thresholds, self.per_threshold):
                w.writerow([f"{t:.4f}", f"{fg:.6f}", f"{bg:.6f}", f"{m:.6f}"])

    def summary_line(self) -> str:
        return f"{self.best_threshold:.4f},{self.best_miou:.6f}"


def _ratio(inter, union):
    return 1.0 if union == 0 else inter / union


def iou(pred_mask, gt_mask, class_id: int = 1) -> float:
    """Intersection over union of one class; 1.0 when both sets are empty."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if class_id == 0:
        pred, gt = ~pred, ~gt
    elif class_id != 1:
        raise ValueError("class_id must be 0 or 1")
    return _ratio(int(np.count_nonzero(pred & gt)), int(np.count_nonzero(pred | gt)))


def _check_thresholds(thresholds):
    t = np.asarray(list(thresholds), dtype=float)
    if t.size == 0:
        raise ValueError("need at least one threshold")
    if np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) <= 0):
        raise ValueError("thresholds must be strictly increasing in (0, 1)")
    return t


class SweepAccumulator:
    """Global intersection/union counts per threshold over many images."""

    def __init__(self, thresholds=DEFAULT_THRESHOLDS):
        self.thresholds = _check_thresholds(thresholds)
        n = len(self.thresholds)
        self.inter = np.zeros((n, 2), dtype=np.int64)
        self.union = np.zeros((n, 2), dtype=np.int64)

    def update(self, prob_map, gt_mask) -> None:
        prob = np.asarray(prob_map, dtype=np.float64).ravel()
        gt = np.asarray(gt_mask).astype(bool).ravel()
        if prob.shape != gt.shape:
            raise ValueError("prob_map and gt_mask must have the same size")
        # pixels sorted by probability; counts of prob >= t via searchsorted
        n_fg_gt = int(gt.sum())
        n = prob.size
        order = np.argsort(prob, kind="stable")
        p_sorted = prob[order]
        gt_sorted = gt[order]
        # tail sums: number of (gt fg) pixels with prob >= t
        fg_tail = np.concatenate([np.cumsum(gt_sorted[::-1])[::-1], [0]])
        start = np.searchsorted(p_sorted, self.thresholds, side="left")
        pred_fg = n - start
        tp = fg_tail[start]
        fp = pred_fg - tp
        fn = n_fg_gt - tp
        tn = n - tp - fp - fn
        self.inter[:, 1] += tp
        self.union[:, 1] += tp + fp + fn
        self.inter[:, 0] += tn
        self.union[:, 0] += tn + fp + fn

    def report(self) -> EvalReport:
        rows = []
        for k in range(len(self.thresholds)):
            fg = _ratio(self.inter[k, 1], self.union[k, 1])
            bg = _ratio(self.inter[k, 0], self.union[k, 0])
            rows.append((fg, bg, (fg + bg) / 2))
        mious = np.array([r[2] for r in rows])
        best = int(np.argmax(mious))  # first max, i.e. the smallest threshold on ties
        return EvalReport([float(t) for t in self.thresholds], rows,
                          float(self.thresholds[best]), float(mious[best]))


def threshold_sweep(prob_map, gt_mask, thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Binarise ``prob >= t`` for each threshold and score fg/bg IOU.

    ``prob_map`` and ``gt_mask`` may also be lists of per-image arrays, in
    which case counts are accumulated over all images before dividing.
    """
    acc = SweepAccumulator(thresholds)
    if isinstance(prob_map, (list, tuple)):
        if len(prob_map) != len(gt_mask):
            raise ValueError("need one gt mask per probability map")
        for p, g in zip(prob_map, gt_mask):
            acc.update(p, g)
    else:
        acc.update(prob_map, gt_mask)
    return acc.report()
