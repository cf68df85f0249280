"""Imbalance-aware pixel-level evaluation.

Confusion counts, DSC/precision/recall at a fixed threshold, the full
precision-recall curve with average precision (step-wise interpolation,
thresholds swept over every distinct score), and ROC AUC via the rank
statistic. Predictions from all images are pooled before the sweep by
default; a per-image-averaged mode is available for sensitivity checks.

Degenerate conventions (documented, pinned by tests): with no predicted
positives, precision is 1.0 if nothing was missed and 0.0 otherwise;
recall mirrors that for empty ground truth; DSC of an empty prediction
against an empty truth is 1.0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def confusion(pred_probs, true_mask, threshold: float = 0.5) -> ConfusionCounts:
    """Pixel-exact confusion counts at ``pred >= threshold``."""
    pred = np.asarray(pred_probs)
    mask = np.asarray(true_mask)
    if pred.shape != mask.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match mask shape {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary (0/1)")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    hit = pred >= threshold
    pos = mask == 1
    tp = int(np.count_nonzero(hit & pos))
    fp = int(np.count_nonzero(hit & ~pos))
    fn = int(np.count_nonzero(~hit & pos))
    tn = int(np.count_nonzero(~hit & ~pos))
    return ConfusionCounts(tp, fp, fn, tn)


def dsc(counts: ConfusionCounts) -> float:
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0  # empty prediction vs empty truth
    return 2.0 * counts.tp / denom


def precision(counts: ConfusionCounts) -> float:
    if counts.tp + counts.fp == 0:
        return 1.0 if counts.fn == 0 else 0.0
    return counts.tp / (counts.tp + counts.fp)


def recall(counts: ConfusionCounts) -> float:
    if counts.tp + counts.fn == 0:
        return 1.0 if counts.fp == 0 else 0.0
    return counts.tp / (counts.tp + counts.fn)


def inter_rater_dsc(mask_a, mask_b) -> float:
    """DSC between two binary annotations; symmetric in its arguments."""
    a = np.asarray(mask_a)
    b = np.asarray(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    for arr, name in ((a, "mask_a"), (b, "mask_b")):
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError(f"{name} must be binary (0/1)")
    tp = int(np.count_nonzero((a == 1) & (b == 1)))
    fp = int(np.count_nonzero((a == 0) & (b == 1)))
    fn = int(np.count_nonzero((a == 1) & (b == 0)))
    return dsc(ConfusionCounts(tp, fp, fn, 0))


@dataclass
class PRCurve:
    """(threshold, precision, recall) points in increasing-threshold order."""

    points: list
    ap: float

    @property
    def thresholds(self):
        return [p[0] for p in self.points]

    @property
    def precisions(self):
        return [p[1] for p in self.points]

    @property
    def recalls(self):
        return [p[2] for p in self.points]


def _pool(pred_probs, true_masks):
    if isinstance(pred_probs, (list, tuple)):
        scores = np.concatenate([np.asarray(p).ravel() for p in pred_probs])
        labels = np.concatenate([np.asarray(m).ravel() for m in true_masks])
    else:
        scores = np.asarray(pred_probs).ravel()
        labels = np.asarray(true_masks).ravel()
    if scores.shape != labels.shape:
        raise ValueError("pooled scores and labels differ in length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("masks must be binary (0/1)")
    return scores.astype(np.float64), labels.astype(np.int64)


def pr_curve(pred_probs, true_masks) -> PRCurve:
    """Precision-recall curve over every distinct score, with AP.

    AP = sum_n (R_n - R_{n-1}) * P_n over the curve ordered by increasing
    recall (decreasing threshold), with R_0 = 0.
    """
    scores, labels = _pool(pred_probs, true_masks)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive pixels")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # last index of each distinct-score block
    boundary = np.nonzero(np.diff(s))[0]
    last = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(y)[last]
    predicted = last + 1
    prec = tp / predicted
    rec = tp / n_pos

    prev_rec = np.concatenate([[0.0], rec[:-1]])
    ap = float(np.sum((rec - prev_rec) * prec))

    points = [(float(s[i]), float(p), float(r)) for i, p, r in zip(last[::-1], prec[::-1], rec[::-1])]
    return PRCurve(points=points, ap=ap)


def average_precision(pred_probs, true_masks) -> float:
    return pr_curve(pred_probs, true_masks).ap


def roc_auc(pred_probs, true_masks) -> float:
    """AUC as the probability a random positive outranks a random negative,
    counting ties as one half (rank statistic)."""
    scores, labels = _pool(pred_probs, true_masks)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.arange(1, scores.size + 1)
    # average ranks within tie groups
    s_sorted = scores[order]
    boundary = np.nonzero(np.diff(s_sorted))[0]
    starts = np.concatenate([[0], boundary + 1])
    ends = np.concatenate([boundary, [scores.size - 1]])
    for a, b in zip(starts, ends):
        if b > a:
            ranks[order[a : b + 1]] = 0.5 * (a + b) + 1.0
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalReport:
    """Scores of one model over one image set at one threshold."""

    threshold: float
    pooled: ConfusionCounts
    per_image: list = field(default_factory=list)
    precision: float = 0.0
    recall: float = 0.0
    dsc: float = 0.0
    ap: float = 0.0
    auc: float = 0.0

    def as_row(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "dsc": self.dsc,
            "ap": self.ap,
            "auc": self.auc,
        }


def evaluate(pred_probs, true_masks, threshold: float = 0.5, per_image: bool = False) -> EvalReport:
    """Score predictions against masks; pooled across images by default.

    With ``per_image`` the threshold metrics and AP are averaged over
    images instead (images without positives are skipped for AP), matching
    a per-image reading of the summary tables.
    """
    preds = pred_probs if isinstance(pred_probs, (list, tuple)) else [pred_probs]
    masks = true_masks if isinstance(true_masks, (list, tuple)) else [true_masks]
    if len(preds) != len(masks):
        raise ValueError("pred/mask list lengths differ")
    counts = [confusion(p, m, threshold) for p, m in zip(preds, masks)]
    pooled = ConfusionCounts(0, 0, 0, 0)
    for c in counts:
        pooled = pooled + c
    report = EvalReport(threshold=threshold, pooled=pooled, per_image=counts)
    if per_image:
        report.precision = float(np.mean([precision(c) for c in counts]))
        report.recall = float(np.mean([recall(c) for c in counts]))
        report.dsc = float(np.mean([dsc(c) for c in counts]))
        aps = [
            pr_curve(p, m).ap
            for p, m in zip(preds, masks)
            if np.count_nonzero(np.asarray(m)) > 0
        ]
        if not aps:
            raise ValueError("average precision is undefined without positive pixels")
        report.ap = float(np.mean(aps))
    else:
        report.precision = precision(pooled)
        report.recall = recall(pooled)
        report.dsc = dsc(pooled)
        report.ap = pr_curve(preds, masks).ap
    report.auc = roc_auc(preds, masks)
    return report


REPORT_COLUMNS = ("precision", "recall", "dsc", "ap", "auc")


def write_report_csv(path, rows: list) -> Path:
    """Write evaluation rows (dicts) with the Precision/Recall/DSC/AP/AUC
    column block; floats use repr so re-parsing is lossless."""
    path = Path(path)
    if not rows:
        raise ValueError("no rows to write")
    id_cols = [k for k in rows[0] if k not in REPORT_COLUMNS]
    header = id_cols + list(REPORT_COLUMNS)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([
                repr(row[k]) if isinstance(row[k], float) else row[k] for k in header
            ])
    return path


def read_report_csv(path) -> list:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = dict(raw)
            for col in REPORT_COLUMNS:
                if col in row:
                    row[col] = float(row[col])
            rows.append(row)
    return rows


def write_pr_csv(path, curve: PRCurve) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall", "ap"])
        for t, p, r in curve.points:
            writer.writerow([repr(t), repr(p), repr(r), repr(curve.ap)])
    return path


def read_pr_csv(path) -> PRCurve:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {
            "threshold",
            "precision",
            "recall",
            "ap",
        }:
            raise ValueError(f"{path} is not a PR-curve CSV (bad header {reader.fieldnames})")
        points = []
        ap = None
        for row in reader:
            points.append((float(row["threshold"]), float(row["precision"]), float(row["recall"])))
            ap = float(row["ap"])
    if ap is None:
        raise ValueError(f"{path} contains no curve points")
    return PRCurve(points=points, ap=ap)
