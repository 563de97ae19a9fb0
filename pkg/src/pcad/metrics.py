"""Anomaly ranking metrics and semantic mIoU."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, UndefinedMetricError


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if len(s) != len(y):
        raise ContractError(f"{len(s)} scores for {len(y)} labels")
    if not np.all(np.isfinite(s)):
        raise ContractError("scores must be finite")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic: P(pos > neg) + 0.5 P(pos == neg)."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks give ties half credit
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def _grouped_counts(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) after each distinct threshold, scores descending."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def aupr(scores, labels) -> float:
    """Average precision: sum of precision at each threshold times recall gained."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive")
    _, tp, fp = _grouped_counts(s, y)
    precision = tp / (tp + fp)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * recall_gain))


def threshold_sweep(scores, labels, n_thresholds: int = 101) -> dict[str, list]:
    """Confusion counts for ``score >= t`` on an even grid of thresholds in [0, 1]."""
    s, y = _prepare(scores, labels)
    thresholds = np.linspace(0.0, 1.0, n_thresholds)
    pos_sorted = np.sort(s[y])
    neg_sorted = np.sort(s[~y])
    tp = len(pos_sorted) - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = len(neg_sorted) - np.searchsorted(neg_sorted, thresholds, side="left")
    return {
        "threshold": thresholds.tolist(),
        "tp": tp.tolist(),
        "fp": fp.tolist(),
        "fn": (len(pos_sorted) - tp).tolist(),
        "tn": (len(neg_sorted) - fp).tolist(),
    }


def miou(pred, gt, classes, skip_absent: bool = True) -> tuple[float, dict[int, float]]:
    """Mean IoU over ``classes`` on points whose groundtruth is one of them.

    Classes absent from both prediction and groundtruth are skipped unless
    ``skip_absent`` is False, in which case they count as IoU 0.
    """
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if len(pred) != len(gt):
        raise ContractError(f"{len(pred)} predictions for {len(gt)} groundtruth labels")
    classes = sorted(int(c) for c in classes)
    keep = np.isin(gt, classes)
    pred, gt = pred[keep], gt[keep]
    per_class = {}
    for c in classes:
        p, g = pred == c, gt == c
        union = int(np.count_nonzero(p | g))
        if union == 0:
            if not skip_absent:
                per_class[c] = 0.0
            continue
        per_class[c] = np.count_nonzero(p & g) / union
    if not per_class:
        raise UndefinedMetricError("no evaluable class for mIoU")
    return float(np.mean(list(per_class.values()))), per_class


@dataclass
class EvalReport:
    auroc: float
    aupr: float
    miou: float
    per_class_iou: dict[int, float]
    counts: dict[str, list] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_iou"] = {str(k): v for k, v in sorted(self.per_class_iou.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        d = dict(d)
        d["per_class_iou"] = {int(k): v for k, v in d["per_class_iou"].items()}
        return cls(**d)


def evaluate_arrays(scores, anomaly, pred, gt, classes, n_thresholds: int = 101) -> EvalReport:
    return EvalReport(
        auroc=auroc(scores, anomaly),
        aupr=aupr(scores, anomaly),
        miou=(m := miou(pred, gt, classes))[0],
        per_class_iou=m[1],
        counts=threshold_sweep(scores, anomaly, n_thresholds),
    )


def write_sweep_csv(sweep: dict[str, list], path: str | Path) -> None:
    keys = ["threshold", "tp", "fp", "fn", "tn"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in zip(*(sweep[k] for k in keys)):
            w.writerow([repr(float(row[0]))] + [int(v) for v in row[1:]])
