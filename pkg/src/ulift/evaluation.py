"""Matching-based instance metrics: mIoU, F-score at IoU 0.5 and boundary IoU.

Masks use 0 for background; every other id is an instance.  Pixel counts are
summed over all views before matching unless ``per_view`` is requested.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, stats

from .association import linear_assignment

BOUNDARY_WIDTH = 3
TP_IOU = 0.5


@dataclass
class IoUMatrix:
    iou: np.ndarray  # (P, G)
    pred_ids: np.ndarray
    gt_ids: np.ndarray
    intersection: np.ndarray
    pred_area: np.ndarray
    gt_area: np.ndarray


@dataclass
class Match:
    pairs: list[tuple[int, int, float]]  # (pred id, gt id, iou)
    unmatched_pred: list[int]
    unmatched_gt: list[int]

    @property
    def total(self) -> float:
        return float(sum(p[2] for p in self.pairs))


@dataclass
class MetricsReport:
    miou: float
    fscore: float
    mbiou: float
    precision: float
    recall: float
    rows: list[dict] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"miou={self.miou:.6f}", f"fscore={self.fscore:.6f}", f"mbiou={self.mbiou:.6f}",
                 f"precision={self.precision:.6f}", f"recall={self.recall:.6f}"]
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pred_id", "gt_id", "iou", "biou"])
            for r in self.rows:
                w.writerow([r["pred_id"], r["gt_id"], f"{r['iou']:.6f}", f"{r['biou']:.6f}"])
            w.writerow([])
            w.writerow(["miou", "fscore", "mbiou", "precision", "recall"])
            w.writerow([f"{v:.6f}" for v in (self.miou, self.fscore, self.mbiou, self.precision, self.recall)])


def _as_list(masks) -> list[np.ndarray]:
    if isinstance(masks, np.ndarray) and masks.ndim == 2:
        return [masks]
    return [np.asarray(getattr(m, "to_instance_mask", lambda m=m: m)()) for m in masks]


def iou_matrix(pred, gt) -> IoUMatrix:
    """IoU between every predicted and ground-truth instance, counts summed over views."""
    preds, gts = _as_list(pred), _as_list(gt)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predicted views but {len(gts)} ground-truth views")
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise ValueError(f"dimension mismatch: prediction {p.shape} vs ground truth {g.shape}")
    n_p = max(int(p.max(initial=0)) for p in preds) + 1 if preds else 1
    n_g = max(int(g.max(initial=0)) for g in gts) + 1 if gts else 1
    inter = np.zeros((n_p, n_g))
    for p, g in zip(preds, gts):
        inter += np.bincount((p * n_g + g).ravel(), minlength=n_p * n_g).reshape(n_p, n_g)
    area_p = inter.sum(axis=1)
    area_g = inter.sum(axis=0)
    pred_ids = np.flatnonzero(area_p[1:] > 0) + 1
    gt_ids = np.flatnonzero(area_g[1:] > 0) + 1
    inter = inter[np.ix_(pred_ids, gt_ids)]
    ap, ag = area_p[pred_ids], area_g[gt_ids]
    union = ap[:, None] + ag[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    return IoUMatrix(iou, pred_ids, gt_ids, inter, ap, ag)


def match_instances(ious: IoUMatrix) -> Match:
    """Injective pred/GT matching maximizing total IoU."""
    mat = ious.iou
    P, G = mat.shape
    if P == 0 or G == 0:
        return Match([], list(map(int, ious.pred_ids)), list(map(int, ious.gt_ids)))
    if G <= P:
        cols = linear_assignment(mat.T)
        idx = [(int(c), g) for g, c in enumerate(cols)]
    else:
        cols = linear_assignment(mat)
        idx = [(p, int(c)) for p, c in enumerate(cols)]
    pairs = [(int(ious.pred_ids[p]), int(ious.gt_ids[g]), float(mat[p, g])) for p, g in idx]
    used_p = {p for p, _, _ in pairs}
    used_g = {g for _, g, _ in pairs}
    return Match(
        pairs,
        [int(i) for i in ious.pred_ids if int(i) not in used_p],
        [int(i) for i in ious.gt_ids if int(i) not in used_g],
    )


def boundary_band(mask: np.ndarray, width: int = BOUNDARY_WIDTH) -> np.ndarray:
    """Labels kept only within ``width`` px (chessboard) of a label change or the image border."""
    mask = np.asarray(mask)
    size = 2 * width + 1
    hi = ndimage.maximum_filter(mask, size=size, mode="constant", cval=0)
    lo = ndimage.minimum_filter(mask, size=size, mode="constant", cval=0)
    return np.where(hi != lo, mask, 0)


def _report(pred_list, gt_list, boundary_width: int) -> tuple[MetricsReport, int, int]:
    ious = iou_matrix(pred_list, gt_list)
    match = match_instances(ious)
    bands = iou_matrix([boundary_band(p, boundary_width) for p in pred_list],
                       [boundary_band(g, boundary_width) for g in gt_list])
    b_lookup = {
        (int(p), int(g)): bands.iou[i, j]
        for i, p in enumerate(bands.pred_ids)
        for j, g in enumerate(bands.gt_ids)
    }
    n_gt, n_pred = len(ious.gt_ids), len(ious.pred_ids)
    rows = [
        {"pred_id": p, "gt_id": g, "iou": iou, "biou": float(b_lookup.get((p, g), 0.0))}
        for p, g, iou in match.pairs
    ]
    # matching is over IoU; the gt-side averages count unmatched gt as 0
    miou = sum(r["iou"] for r in rows) / n_gt if n_gt else 1.0
    mbiou = sum(r["biou"] for r in rows) / n_gt if n_gt else 1.0
    tp = sum(1 for r in rows if r["iou"] >= TP_IOU)
    precision = tp / n_pred if n_pred else (1.0 if n_gt == 0 else 0.0)
    recall = tp / n_gt if n_gt else 1.0
    fscore = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(miou, fscore, mbiou, precision, recall, rows), n_pred, n_gt


def compute_metrics(
    pred: Sequence, gt: Sequence, boundary_width: int = BOUNDARY_WIDTH, per_view: bool = False
) -> MetricsReport:
    preds, gts = _as_list(pred), _as_list(gt)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predicted views but {len(gts)} ground-truth views")
    if not per_view:
        return _report(preds, gts, boundary_width)[0]
    reports = [_report([p], [g], boundary_width)[0] for p, g in zip(preds, gts)]
    mean = lambda k: float(np.mean([getattr(r, k) for r in reports])) if reports else 1.0  # noqa: E731
    rows = [dict(r, view=v) for v, rep in enumerate(reports) for r in rep.rows]
    return MetricsReport(mean("miou"), mean("fscore"), mean("mbiou"), mean("precision"), mean("recall"), rows)


def detection_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the ROC curve of ``scores`` as a detector of ``positives`` (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(positives, dtype=bool).ravel()
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative examples")
    ranks = stats.rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
