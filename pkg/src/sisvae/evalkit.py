"""Detection metrics over labeled scores and the History-Average baseline.

Operating points are indexed by the distinct score values: at threshold
``s`` every point scoring ``>= s`` is flagged, i.e. the detector ``A > alpha``
with alpha just below ``s``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .datagen import SeriesMatrix
from .scoring import ScoreMatrix


@dataclass
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must have the same length")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0/1")

    @classmethod
    def from_matrix(cls, scores: ScoreMatrix, labels) -> LabeledScores:
        labels = np.asarray(labels)
        if labels.shape != scores.scores.shape:
            raise ValueError(f"label shape {labels.shape} != score shape {scores.scores.shape}")
        mask = scores.covered
        return cls(scores.scores[mask], labels[mask])

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


def auroc(data: LabeledScores) -> float:
    """Probability a random positive outranks a random negative (ties count half)."""
    P, N = data.n_pos, data.n_neg
    if P == 0 or N == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    ranks = rankdata(data.scores)  # average ranks for ties
    rank_sum = ranks[data.labels == 1].sum()
    return float((rank_sum - P * (P + 1) / 2.0) / (P * N))


@dataclass
class Curves:
    thresholds: np.ndarray  # descending distinct scores
    tp: np.ndarray
    fp: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray


def operating_points(data: LabeledScores) -> Curves:
    order = np.argsort(-data.scores, kind="mergesort")
    s = data.scores[order]
    y = data.labels[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends].astype(np.float64)
    fp = (ends + 1) - tp
    P, N = data.n_pos, data.n_neg
    precision = tp / (tp + fp)
    recall = tp / P if P else np.zeros_like(tp)
    fpr = fp / N if N else np.zeros_like(fp)
    return Curves(s[ends], tp, fp, precision, recall, recall.copy(), fpr)


def pr_curve_and_auprc(data: LabeledScores) -> tuple[Curves, float, float]:
    """PR operating points, average precision and the best achievable F1."""
    if data.n_pos == 0:
        raise ValueError("AUPRC needs at least one positive label")
    c = operating_points(data)
    prev_recall = np.r_[0.0, c.recall[:-1]]
    auprc = float(np.sum((c.recall - prev_recall) * c.precision))
    denom = c.precision + c.recall
    f1 = np.divide(2 * c.precision * c.recall, denom, out=np.zeros_like(denom), where=denom > 0)
    return c, auprc, float(f1.max())


def precision_at_k(data: LabeledScores, k: int) -> float:
    n = data.scores.size
    if not (1 <= k <= n):
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    # sort by score descending, then original index ascending
    order = np.lexsort((np.arange(n), -data.scores))
    return float(data.labels[order[:k]].sum() / k)


def evaluate(data: LabeledScores, ks=(10, 50, 200)) -> dict:
    _, auprc, best_f1 = pr_curve_and_auprc(data)
    n = data.scores.size
    return {
        "auroc": auroc(data),
        "auprc": auprc,
        "best_f1": best_f1,
        "precision_at_k": {str(k): precision_at_k(data, k) for k in ks if 1 <= k <= n},
    }


def ha_baseline(series: SeriesMatrix | np.ndarray, causal: bool = True) -> ScoreMatrix:
    """|x_t - mean of x before t| per row (first step scores |x_0|); global mean when not causal."""
    x = series.values if isinstance(series, SeriesMatrix) else np.asarray(series, dtype=np.float64)
    if causal:
        csum = np.cumsum(x, axis=1)
        hist = np.zeros_like(x)
        hist[:, 1:] = csum[:, :-1] / np.arange(1, x.shape[1])
    else:
        hist = np.broadcast_to(x.mean(axis=1, keepdims=True), x.shape)
    return ScoreMatrix(np.abs(x - hist), np.ones(x.shape, dtype=bool))


def save_curves(curves: Curves, roc_path, pr_path) -> None:
    with open(roc_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "tpr", "fpr"])
        for th, a, b in zip(curves.thresholds, curves.tpr, curves.fpr):
            w.writerow([repr(float(th)), repr(float(a)), repr(float(b))])
    with open(pr_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for th, a, b in zip(curves.thresholds, curves.precision, curves.recall):
            w.writerow([repr(float(th)), repr(float(a)), repr(float(b))])
