"""Coverage and efficiency metrics plus multi-seed summary statistics.

Global coverage is the unweighted mean of agent-level coverages (all agents
score the same shared test set), so a strongly over-covering agent can mask
an under-covering one — which is exactly why per-agent numbers are always
reported alongside the average.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .aggregation import AggregationMethod
from .errors import ValidationError
from .scores import PredictionInterval


@dataclass(frozen=True)
class PredictionRecord:
    """One test-sample outcome: a label set + true label, or an interval + value."""

    agent_id: int
    label_set: frozenset[int] | None = None
    true_label: int | None = None
    interval: PredictionInterval | None = None
    true_value: float | None = None

    def __post_init__(self):
        classif = self.label_set is not None and self.true_label is not None
        regress = self.interval is not None and self.true_value is not None
        if classif == regress:
            raise ValidationError("record needs exactly one of (label_set, true_label) or (interval, true_value)")

    @property
    def covered(self) -> bool:
        if self.label_set is not None:
            return self.true_label in self.label_set
        return self.interval.contains(self.true_value)

    @property
    def size(self) -> float:
        if self.label_set is not None:
            return float(len(self.label_set))
        return self.interval.length()

    @property
    def unbounded(self) -> bool:
        return self.interval is not None and self.interval.unbounded


def _check_records(records: Sequence[PredictionRecord]) -> None:
    if len(records) == 0:
        raise ValidationError("no prediction records")
    first = records[0].agent_id
    if any(r.agent_id != first for r in records):
        raise ValidationError("records span multiple agents; pass one agent at a time")


def coverage(records: Sequence[PredictionRecord]) -> float:
    """Fraction of records whose truth lies in the prediction set/interval."""
    _check_records(records)
    return sum(1 for r in records if r.covered) / len(records)


def efficiency(records: Sequence[PredictionRecord]) -> float:
    """Mean set cardinality / interval length; +inf if any interval is unbounded."""
    _check_records(records)
    if any(r.unbounded for r in records):
        return math.inf
    return sum(r.size for r in records) / len(records)


@dataclass(frozen=True)
class SeedSummary:
    median: float
    ci_lo: float
    ci_hi: float
    n_seeds: int

    def __post_init__(self):
        if not (self.ci_lo <= self.median <= self.ci_hi):
            raise ValidationError(
                f"CI must bracket the median: {self.ci_lo} <= {self.median} <= {self.ci_hi}"
            )


def seed_summary(values: Sequence[float], n_boot: int = 2000, seed: int = 0) -> SeedSummary:
    """Median with a 95% percentile-bootstrap CI (resampled medians)."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size < 2:
        raise ValidationError(f"need >= 2 values to summarize, got {vals.size}")
    med = float(np.median(vals))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, vals.size, size=(n_boot, vals.size))
    boot_medians = np.median(vals[idx], axis=1)
    ci_lo, ci_hi = np.percentile(boot_medians, [2.5, 97.5])
    return SeedSummary(median=med, ci_lo=float(ci_lo), ci_hi=float(ci_hi), n_seeds=int(vals.size))


@dataclass(frozen=True)
class CoverageReport:
    """Per-agent and averaged metrics for one (method, seed) run."""

    per_agent_coverage: dict[int, float]
    global_coverage: float
    per_agent_efficiency: dict[int, float]
    global_efficiency: float
    test_size: int
    method: AggregationMethod
    seed: int
    unbounded_agents: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "seed": self.seed,
            "test_size": self.test_size,
            "per_agent_coverage": {str(k): v for k, v in self.per_agent_coverage.items()},
            "global_coverage": self.global_coverage,
            "per_agent_efficiency": {str(k): _json_float(v) for k, v in self.per_agent_efficiency.items()},
            "global_efficiency": _json_float(self.global_efficiency),
            "unbounded_agents": list(self.unbounded_agents),
        }


def _json_float(x: float):
    return "inf" if x == math.inf else x


def build_report(
    records_by_agent: Mapping[int, Sequence[PredictionRecord]],
    method: AggregationMethod,
    seed: int,
) -> CoverageReport:
    """Assemble one report row-set; global metrics are unweighted agent means."""
    if len(records_by_agent) == 0:
        raise ValidationError("no agents in report")
    cov = {}
    eff = {}
    unbounded = []
    test_size = None
    for agent_id in sorted(records_by_agent):
        records = list(records_by_agent[agent_id])
        if len(records) == 0:
            raise ValidationError(f"agent {agent_id} has no records")
        cov[agent_id] = coverage(records)
        eff[agent_id] = efficiency(records)
        if eff[agent_id] == math.inf:
            unbounded.append(agent_id)
        test_size = len(records) if test_size is None else test_size
    global_eff = math.inf if unbounded else sum(eff.values()) / len(eff)
    return CoverageReport(
        per_agent_coverage=cov,
        global_coverage=sum(cov.values()) / len(cov),
        per_agent_efficiency=eff,
        global_efficiency=global_eff,
        test_size=test_size,
        method=AggregationMethod(method),
        seed=int(seed),
        unbounded_agents=tuple(unbounded),
    )


CSV_COLUMNS = ["dataset", "method", "seed", "agent", "coverage", "efficiency", "runtime_s"]


def report_rows(report: CoverageReport, dataset: str, runtime_s: float) -> list[dict]:
    """Flatten a report to CSV rows: one per agent plus a 'global' row."""
    rows = []
    for agent_id in sorted(report.per_agent_coverage):
        rows.append(
            {
                "dataset": dataset,
                "method": report.method.value,
                "seed": report.seed,
                "agent": str(agent_id),
                "coverage": repr(report.per_agent_coverage[agent_id]),
                "efficiency": _csv_float(report.per_agent_efficiency[agent_id]),
                "runtime_s": repr(runtime_s),
            }
        )
    rows.append(
        {
            "dataset": dataset,
            "method": report.method.value,
            "seed": report.seed,
            "agent": "global",
            "coverage": repr(report.global_coverage),
            "efficiency": _csv_float(report.global_efficiency),
            "runtime_s": repr(runtime_s),
        }
    )
    return rows


def _csv_float(x: float) -> str:
    return "inf" if x == math.inf else repr(x)


def write_csv(rows: Sequence[Mapping], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize_rows(rows: Sequence[Mapping], boot_seed: int = 0) -> list[dict]:
    """Group CSV rows by (dataset, method, agent) and summarize across seeds."""
    grouped: dict[tuple, dict[str, list[float]]] = {}
    for row in rows:
        key = (row["dataset"], row["method"], row["agent"])
        entry = grouped.setdefault(key, {"coverage": [], "efficiency": []})
        entry["coverage"].append(float(row["coverage"]))
        entry["efficiency"].append(float(row["efficiency"]))
    out = []
    for (dataset, method, agent), metrics in sorted(grouped.items()):
        rec = {"dataset": dataset, "method": method, "agent": agent, "n_seeds": len(metrics["coverage"])}
        for name in ("coverage", "efficiency"):
            vals = metrics[name]
            if len(vals) >= 2 and all(math.isfinite(v) for v in vals):
                s = seed_summary(vals, seed=boot_seed)
                rec[name] = {"median": s.median, "ci_lo": s.ci_lo, "ci_hi": s.ci_hi}
            else:
                med = float(np.median(vals))
                rec[name] = {"median": _json_float(med)}
        out.append(rec)
    return out


def write_summary_json(summaries: Sequence[Mapping], path) -> None:
    with open(path, "w") as fh:
        json.dump({"schema_version": 1, "kind": "seed_summaries", "groups": list(summaries)}, fh, indent=2)
