"""Nonconformity scores for classification (cumulative-mass) and regression
(quantile-residual), with the matching prediction-set constructors.

All functions are pure; prediction sets/intervals are exact duals of the
scores: ``y`` is in the set at threshold ``t`` iff ``score(y) <= t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

PROB_SUM_TOL = 1e-6


def validate_probs(probs) -> np.ndarray:
    """Check a class-probability vector and return it as a float64 array."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValidationError(f"probability vector must be 1-D with >= 2 entries, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError("probability vector contains non-finite entries")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValidationError("probability entries must lie in [0, 1]")
    total = float(p.sum())
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise ValidationError(f"probabilities sum to {total}, expected 1 within {PROB_SUM_TOL}")
    return p


def _check_threshold(threshold: float) -> float:
    t = float(threshold)
    if math.isnan(t) or t == -math.inf:
        raise ValidationError("threshold must be finite or +inf")
    return t


def aps_score_matrix(prob_matrix) -> np.ndarray:
    """Cumulative-mass scores for every (sample, class) pair.

    Row-wise: sort classes by descending probability (ties broken by
    ascending class index), cumulative-sum, then map each class's running
    total back to its original column.  Entry [i, c] is the score of class
    ``c`` for sample ``i``.
    """
    p = np.atleast_2d(np.asarray(prob_matrix, dtype=np.float64))
    # stable argsort on -p keeps ascending index order within ties
    order = np.argsort(-p, axis=1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=1)
    cum = np.cumsum(sorted_p, axis=1)
    scores = np.empty_like(cum)
    np.put_along_axis(scores, order, cum, axis=1)
    return scores


def aps_score_vector(probs) -> np.ndarray:
    """Scores of every class for a single probability vector."""
    p = validate_probs(probs)
    return aps_score_matrix(p[None, :])[0]


def aps_score(probs, label: int) -> float:
    """Score of the given class: total mass of classes ranked at or before it.

    Ranking is by descending probability with ties broken toward the lower
    class index, so the result is the class's own mass plus everything
    strictly more probable (or equally probable with a smaller index).
    Always in (0, 1] for a valid probability vector.
    """
    p = validate_probs(probs)
    label = int(label)
    if label < 0 or label >= p.size:
        raise IndexError(f"label {label} out of range for {p.size} classes")
    return float(aps_score_vector(p)[label])


def aps_prediction_set(probs, threshold: float) -> set[int]:
    """All classes whose score is <= threshold; may be empty; +inf gives all."""
    p = validate_probs(probs)
    t = _check_threshold(threshold)
    if t == math.inf:
        return set(range(p.size))
    scores = aps_score_vector(p)
    return {int(c) for c in np.nonzero(scores <= t)[0]}


@dataclass(frozen=True)
class QuantilePair:
    """Lower/upper conditional-quantile predictions.

    A crossing pair (lo > hi) is repaired by swapping and flagged, since
    independently trained quantile heads can cross on hard inputs.
    """

    lo: float
    hi: float
    repaired: bool = False

    def __post_init__(self):
        lo = float(self.lo)
        hi = float(self.hi)
        if math.isnan(lo) or math.isnan(hi):
            raise ValidationError("quantile predictions must not be NaN")
        if lo > hi:
            object.__setattr__(self, "lo", hi)
            object.__setattr__(self, "hi", lo)
            object.__setattr__(self, "repaired", True)
        else:
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)


@dataclass(frozen=True)
class PredictionInterval:
    """Closed real interval; ``unbounded`` marks the whole-line sentinel."""

    lo: float
    hi: float
    unbounded: bool = False

    def contains(self, y: float) -> bool:
        if self.unbounded:
            return True
        return self.lo <= y <= self.hi

    def length(self) -> float:
        if self.unbounded:
            return math.inf
        return max(self.hi - self.lo, 0.0)


def cqr_score(y: float, pred: QuantilePair) -> float:
    """max(lo - y, y - hi): negative inside the band, zero on its edges."""
    y = float(y)
    if not math.isfinite(y):
        raise ValidationError(f"target value must be finite, got {y}")
    return max(pred.lo - y, y - pred.hi)


def cqr_prediction_interval(pred: QuantilePair, threshold: float) -> PredictionInterval:
    """Band [lo - t, hi + t]; +inf threshold yields the unbounded interval.

    Negative thresholds legitimately shrink the band (the score can be
    negative), possibly to emptiness when hi + t < lo - t.
    """
    t = _check_threshold(threshold)
    if t == math.inf:
        return PredictionInterval(-math.inf, math.inf, unbounded=True)
    return PredictionInterval(pred.lo - t, pred.hi + t)
