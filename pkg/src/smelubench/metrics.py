"""Reproducibility and ranking metrics.

Relative prediction difference (PD) between two models trained from the same
recipe, pairwise ranking loss (fraction of mis-ordered positive/negative
pairs), its per-query mean, and a progressive-validation accumulator that
scores each example before the model trains on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricUndefinedError(ValueError):
    """Raised when a metric has no defined value on the given inputs."""


def _as_prob_array(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.size and (not np.all(np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0)):
        raise MetricUndefinedError(f"{name} must be probabilities in (0, 1)")
    return p


def relative_pd(p1, p2) -> float:
    """Mean of 2|p1 - p2| / (p1 + p2) over aligned prediction pairs.

    Ranges over [0, 2]; identical streams give exactly 0.0.
    """
    p1 = _as_prob_array(p1, "p1")
    p2 = _as_prob_array(p2, "p2")
    if p1.shape != p2.shape:
        raise MetricUndefinedError(f"prediction shapes differ: {p1.shape} vs {p2.shape}")
    if p1.size == 0:
        raise MetricUndefinedError("relative PD of an empty prediction set")
    return float(np.mean(2.0 * np.abs(p1 - p2) / (p1 + p2)))


def log_loss(p, y) -> float:
    """Mean binary cross-entropy; p strictly inside (0, 1)."""
    p = _as_prob_array(p, "p")
    y = np.asarray(y, dtype=np.float64)
    if p.size == 0:
        raise MetricUndefinedError("log loss of an empty prediction set")
    if p.shape != y.shape:
        raise MetricUndefinedError(f"prediction/label shapes differ: {p.shape} vs {y.shape}")
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log1p(-p)))


def auc_loss(scores, labels, ties: str = "zero") -> float:
    """Fraction of (positive, negative) pairs ranked the wrong way round.

    A pair counts 1 when the negative outscores the positive strictly; ties
    count 0 by default or 0.5 with ties="half". Sorted O(n log n); the O(n^2)
    definition is kept as a test oracle only.
    """
    if ties not in ("zero", "half"):
        raise ValueError(f"ties must be 'zero' or 'half', got {ties!r}")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricUndefinedError("scores and labels must be aligned 1-d arrays")
    if not np.all(np.isfinite(scores)):
        raise MetricUndefinedError("scores must be finite")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricUndefinedError("ranking loss needs both classes present")
    neg_sorted = np.sort(neg)
    # negatives strictly above each positive
    above = neg.size - np.searchsorted(neg_sorted, pos, side="right")
    flips = float(np.sum(above))
    if ties == "half":
        tied = np.searchsorted(neg_sorted, pos, side="right") - np.searchsorted(neg_sorted, pos, side="left")
        flips += 0.5 * float(np.sum(tied))
    return flips / (pos.size * neg.size)


def pq_auc(scores, labels, qids, ties: str = "zero") -> float:
    """Unweighted mean of per-query ranking loss over eligible queries.

    A query is eligible when it contains at least one positive and one
    negative. No eligible query at all is an error, not a silent 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    qids = np.asarray(qids)
    if not (scores.shape == labels.shape == qids.shape) or scores.ndim != 1:
        raise MetricUndefinedError("scores, labels, qids must be aligned 1-d arrays")
    order = np.argsort(qids, kind="stable")
    qs = qids[order]
    boundaries = np.flatnonzero(np.diff(qs)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [qs.size]))
    losses = []
    for s, e in zip(starts, ends):
        seg = order[s:e]
        seg_labels = labels[seg]
        if (seg_labels == 1).any() and (seg_labels == 0).any():
            losses.append(auc_loss(scores[seg], seg_labels, ties=ties))
    if not losses:
        raise MetricUndefinedError("no query contains both classes")
    return float(np.mean(losses))


@dataclass(frozen=True)
class ProgressiveMetrics:
    logloss: float
    auc: float
    pqauc: float
    count: int


class ProgressiveAccumulator:
    """Streaming progressive-validation scores.

    Each update records (prediction, label, qid) for one example scored
    *before* the model trained on it. finalize() returns mean log loss plus
    the stream-level and per-query ranking losses. The stream is stored in
    full (desk scale) so the ranking metrics are exact.
    """

    def __init__(self):
        self._preds = []
        self._labels = []
        self._qids = []

    def update(self, y_hat: float, y: int, qid: int):
        self._preds.append(float(y_hat))
        self._labels.append(int(y))
        self._qids.append(int(qid))

    def update_batch(self, y_hat, y, qid):
        self._preds.extend(np.asarray(y_hat, dtype=np.float64).tolist())
        self._labels.extend(np.asarray(y).tolist())
        self._qids.extend(np.asarray(qid).tolist())

    def __len__(self):
        return len(self._preds)

    def arrays(self):
        return (
            np.asarray(self._preds, dtype=np.float64),
            np.asarray(self._labels, dtype=np.int64),
            np.asarray(self._qids, dtype=np.int64),
        )

    def finalize(self) -> ProgressiveMetrics:
        preds, labels, qids = self.arrays()
        if preds.size == 0:
            raise MetricUndefinedError("no examples accumulated")
        return ProgressiveMetrics(
            logloss=log_loss(preds, labels),
            auc=auc_loss(preds, labels),
            pqauc=pq_auc(preds, labels, qids),
            count=int(preds.size),
        )


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise MetricUndefinedError("spearman needs two aligned 1-d arrays, n >= 2")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0.0:
        raise MetricUndefinedError("spearman undefined for constant input")
    return float(np.sum(rx * ry) / denom)


def _average_ranks(v):
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


# ---------------------------------------------------------------------------
# Flat emission for a single configuration row
# ---------------------------------------------------------------------------

PAIR_CSV_COLUMNS = ("activation", "params", "seed_pair", "logloss", "auc", "pqauc", "pd_percent")


def pair_row_dict(activation: str, params: int, seed_pair: str, metrics: ProgressiveMetrics, pd: float) -> dict:
    """Flat JSON-able record for one trained pair; pd reported in percent."""
    return {
        "activation": activation,
        "params": int(params),
        "seed_pair": seed_pair,
        "logloss": metrics.logloss,
        "auc": metrics.auc,
        "pqauc": metrics.pqauc,
        "pd_percent": 100.0 * pd,
    }


def pair_row_csv(row: dict) -> str:
    return ",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in PAIR_CSV_COLUMNS)
