"""ROC/AUC and calibration tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def _check_scored(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("AUC needs both classes")
    return scores, labels, n_pos


def auc_concordance(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via midranks."""
    scores, labels, n_pos = _check_scored(scores, labels)
    n_neg = len(labels) - n_pos
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels) -> RocCurve:
    """Sweep ``t`` over distinct scores, predicting positive iff ``s >= t``.

    The curve starts at (0, 0) for ``t > max(s)`` and the AUC is the
    trapezoid area under it.
    """
    scores, labels, n_pos = _check_scored(scores, labels)
    n_neg = len(labels) - n_pos
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each block of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thresholds, auc)


def roc_auc(scores, labels) -> RocCurve:
    return roc_curve(scores, labels)


def quantile_bin(scores, n_bins: int = 100) -> np.ndarray:
    """Equal-count bins by ascending score; ties keep input order."""
    scores = np.asarray(scores, dtype=float)
    n = len(scores)
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    if n < n_bins:
        raise ValueError(f"cannot split {n} scores into {n_bins} bins")
    order = np.argsort(scores, kind="stable")
    bins = np.empty(n, dtype=int)
    bins[order] = (np.arange(n) * n_bins) // n
    return bins


@dataclass
class CalibrationTable:
    mean_score: np.ndarray
    default_rate: np.ndarray
    count: np.ndarray
    companion: np.ndarray | None = None

    def to_csv(self, path, companion_name: str = "mean_companion") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["bin", "count", "mean_score", "default_rate"]
            if self.companion is not None:
                head.append(companion_name)
            w.writerow(head)
            for i in range(len(self.count)):
                row = [i, int(self.count[i]), repr(float(self.mean_score[i])),
                       repr(float(self.default_rate[i]))]
                if self.companion is not None:
                    row.append(repr(float(self.companion[i])))
                w.writerow(row)


def calibration_table(scores, labels, bins, companion=None) -> CalibrationTable:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    bins = np.asarray(bins)
    n_bins = int(bins.max()) + 1 if len(bins) else 0
    count = np.bincount(bins, minlength=n_bins).astype(float)
    safe = np.where(count > 0, count, 1.0)
    mean_score = np.bincount(bins, scores, n_bins) / safe
    rate = np.bincount(bins, labels, n_bins) / safe
    comp = None
    if companion is not None:
        comp = np.bincount(bins, np.asarray(companion, dtype=float), n_bins) / safe
    return CalibrationTable(mean_score, rate, count.astype(int), comp)
