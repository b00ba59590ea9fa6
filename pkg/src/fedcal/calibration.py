"""Agent-local split conformal calibration.

The local threshold is the ceil((n+1)(1-alpha))-th smallest calibration
score.  When that rank exceeds n the sample is too small for the requested
level and the +inf sentinel is returned, which downstream turns into the
full label set / unbounded interval rather than an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class CalibrationConfig:
    """Miscoverage level alpha in (0, 1); nominal coverage is 1 - alpha."""

    alpha: float

    def __post_init__(self):
        a = float(self.alpha)
        if not (0.0 < a < 1.0) or math.isnan(a):
            raise ValidationError(f"alpha must be in (0, 1), got {self.alpha}")
        object.__setattr__(self, "alpha", a)


@dataclass(frozen=True)
class ScoreSample:
    """An agent's calibration scores; non-empty, all finite."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size == 0:
            raise ValidationError("score sample must be non-empty")
        if not np.all(np.isfinite(v)):
            raise ValidationError("score sample contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class LocalQuantileSummary:
    """The (threshold, sample size) pair — the only payload an agent sends."""

    agent_id: int
    q: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError(f"summary n must be >= 1, got {self.n}")
        q = float(self.q)
        if math.isnan(q) or q == -math.inf:
            raise ValidationError("summary q must be finite or +inf")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "agent_id", int(self.agent_id))


@dataclass(frozen=True)
class QuantileIndex:
    """Finite-sample rank r = ceil((n+1)(1-alpha)) and the corrected level r/n."""

    rank: int
    overflow: bool
    tau: float | None = field(default=None)


def empirical_quantile_index(n: int, alpha: float) -> QuantileIndex:
    """Rank of the split conformal order statistic, with overflow flag.

    ``overflow`` means r > n: the calibration set is too small to certify
    level 1 - alpha and callers should fall back to the +inf sentinel.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    a = CalibrationConfig(alpha).alpha
    rank = math.ceil((n + 1) * (1.0 - a))
    overflow = rank > n
    tau = None if overflow else rank / n
    return QuantileIndex(rank=rank, overflow=overflow, tau=tau)


def local_threshold(sample: ScoreSample, config: CalibrationConfig, agent_id: int = 0) -> LocalQuantileSummary:
    """Split conformal threshold of one agent's calibration scores.

    Selection is order-independent and counts duplicates as consecutive
    ranks; the overflow case returns the +inf sentinel.
    """
    idx = empirical_quantile_index(sample.n, config.alpha)
    if idx.overflow:
        return LocalQuantileSummary(agent_id=agent_id, q=math.inf, n=sample.n)
    # partial selection of the r-th smallest (1-indexed)
    q = float(np.partition(sample.values, idx.rank - 1)[idx.rank - 1])
    return LocalQuantileSummary(agent_id=agent_id, q=q, n=sample.n)
