"""Server-side combination of local quantile summaries into a global threshold.

Methods:
  * weighted_average     — size-weighted mean sum_k (n_k / N) q_k
  * unweighted_average   — plain mean of the q_k (size-agnostic ablation)
  * pooled_scores        — split threshold of the concatenated raw scores
  * quantile_of_quantiles — outer order statistic over the local quantiles
  * local_only           — no aggregation; each agent keeps its own q_k

A +inf local sentinel propagates to a +inf aggregate for the averaging
methods: averaging a finite number with infinity is undefined, and the
conservative value keeps undersized calibration sets visible in reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .calibration import CalibrationConfig, LocalQuantileSummary, ScoreSample, local_threshold
from .errors import ProtocolError, ValidationError


class AggregationMethod(str, Enum):
    WEIGHTED_AVERAGE = "weighted_average"
    UNWEIGHTED_AVERAGE = "unweighted_average"
    POOLED_SCORES = "pooled_scores"
    QUANTILE_OF_QUANTILES = "quantile_of_quantiles"
    LOCAL_ONLY = "local_only"


@dataclass(frozen=True)
class AggregatedThreshold:
    """Global threshold plus provenance.

    ``total_n`` / ``agent_count`` are None only on the agent side of a
    networked round, where the broadcast does not carry them.
    """

    q_hat: float
    method: AggregationMethod
    total_n: int | None
    agent_count: int | None
    agent_ids: tuple[int, ...] = ()

    def __post_init__(self):
        q = float(self.q_hat)
        if math.isnan(q):
            raise ValidationError("aggregated threshold must not be NaN")
        object.__setattr__(self, "q_hat", q)


def _checked(summaries: Sequence[LocalQuantileSummary]) -> list[LocalQuantileSummary]:
    """Validate and put summaries in canonical agent-id order.

    Canonical ordering makes every aggregate exactly permutation invariant,
    including at the floating-point bit level.
    """
    if len(summaries) == 0:
        raise ValidationError("need at least one summary")
    ids = [s.agent_id for s in summaries]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate agent ids in summaries: {sorted(ids)}")
    return sorted(summaries, key=lambda s: s.agent_id)


def weighted_average(summaries: Sequence[LocalQuantileSummary]) -> AggregatedThreshold:
    """q_hat = sum_k (n_k / N) q_k with N = sum_k n_k."""
    ss = _checked(summaries)
    total_n = sum(s.n for s in ss)
    if any(s.q == math.inf for s in ss):
        q_hat = math.inf
    else:
        q_hat = sum((s.n / total_n) * s.q for s in ss)
    return AggregatedThreshold(
        q_hat=q_hat,
        method=AggregationMethod.WEIGHTED_AVERAGE,
        total_n=total_n,
        agent_count=len(ss),
        agent_ids=tuple(s.agent_id for s in ss),
    )


def unweighted_average(summaries: Sequence[LocalQuantileSummary]) -> AggregatedThreshold:
    """Plain mean of the local quantiles; n_k recorded but not used."""
    ss = _checked(summaries)
    total_n = sum(s.n for s in ss)
    if any(s.q == math.inf for s in ss):
        q_hat = math.inf
    else:
        q_hat = sum(s.q for s in ss) / len(ss)
    return AggregatedThreshold(
        q_hat=q_hat,
        method=AggregationMethod.UNWEIGHTED_AVERAGE,
        total_n=total_n,
        agent_count=len(ss),
        agent_ids=tuple(s.agent_id for s in ss),
    )


def pooled_scores_threshold(
    samples: Sequence[ScoreSample],
    config: CalibrationConfig,
    agent_ids: Sequence[int] | None = None,
) -> AggregatedThreshold:
    """Split threshold of all scores pooled into one sample.

    This is the non-one-shot baseline and doubles as the empirical mixture
    quantile that the weighted average approximates.
    """
    if len(samples) == 0:
        raise ValidationError("need at least one score sample to pool")
    if agent_ids is None:
        agent_ids = tuple(range(len(samples)))
    elif len(set(agent_ids)) != len(samples):
        raise ProtocolError("agent ids must be distinct and match the samples")
    pooled = ScoreSample(np.concatenate([s.values for s in samples]))
    summary = local_threshold(pooled, config)
    return AggregatedThreshold(
        q_hat=summary.q,
        method=AggregationMethod.POOLED_SCORES,
        total_n=pooled.n,
        agent_count=len(samples),
        agent_ids=tuple(int(a) for a in agent_ids),
    )


def quantile_of_quantiles(
    summaries: Sequence[LocalQuantileSummary], config: CalibrationConfig
) -> AggregatedThreshold:
    """s-th smallest local quantile with s = ceil((M+1)(1-alpha)).

    With s > M (e.g. M=6 at alpha=0.05) the result is the +inf sentinel,
    which downstream yields full prediction sets — the systematic
    over-coverage this baseline is known for at small M.
    """
    ss = _checked(summaries)
    m = len(ss)
    s_rank = math.ceil((m + 1) * (1.0 - config.alpha))
    if s_rank > m:
        q_hat = math.inf
    else:
        q_hat = sorted(s.q for s in ss)[s_rank - 1]
    return AggregatedThreshold(
        q_hat=q_hat,
        method=AggregationMethod.QUANTILE_OF_QUANTILES,
        total_n=sum(s.n for s in ss),
        agent_count=m,
        agent_ids=tuple(s.agent_id for s in ss),
    )


def local_only(summaries: Sequence[LocalQuantileSummary]) -> list[AggregatedThreshold]:
    """Each agent keeps its own threshold (non-federated reference)."""
    ss = _checked(summaries)
    return [
        AggregatedThreshold(
            q_hat=s.q,
            method=AggregationMethod.LOCAL_ONLY,
            total_n=s.n,
            agent_count=1,
            agent_ids=(s.agent_id,),
        )
        for s in ss
    ]


def aggregate(
    data,
    method: AggregationMethod,
    config: CalibrationConfig | None = None,
) -> AggregatedThreshold | list[AggregatedThreshold]:
    """Dispatch on the method enum.

    PooledScores takes raw ScoreSamples (plus config); the one-shot methods
    take LocalQuantileSummary lists.  QuantileOfQuantiles also needs config.
    """
    method = AggregationMethod(method)
    items = list(data)
    if len(items) == 0:
        raise ValidationError("no inputs to aggregate")

    if method is AggregationMethod.POOLED_SCORES:
        if not all(isinstance(x, ScoreSample) for x in items):
            raise ValidationError("pooled_scores requires raw ScoreSample inputs")
        if config is None:
            raise ValidationError("pooled_scores requires a CalibrationConfig")
        return pooled_scores_threshold(items, config)

    if not all(isinstance(x, LocalQuantileSummary) for x in items):
        raise ValidationError(f"{method.value} requires LocalQuantileSummary inputs")
    if method is AggregationMethod.WEIGHTED_AVERAGE:
        return weighted_average(items)
    if method is AggregationMethod.UNWEIGHTED_AVERAGE:
        return unweighted_average(items)
    if method is AggregationMethod.QUANTILE_OF_QUANTILES:
        if config is None:
            raise ValidationError("quantile_of_quantiles requires a CalibrationConfig")
        return quantile_of_quantiles(items, config)
    if method is AggregationMethod.LOCAL_ONLY:
        return local_only(items)
    raise ValidationError(f"unknown aggregation method: {method}")
