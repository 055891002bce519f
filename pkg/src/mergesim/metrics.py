"""Outflow, average speed and cross-seed confidence intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import InsufficientSeeds

Z95 = 1.96

SUMMARY_HEADER = ("condition", "seed", "outflow", "avg_speed", "accepted_inflow")
AGGREGATE_HEADER = (
    "condition",
    "n",
    "outflow_mean",
    "outflow_lo",
    "outflow_hi",
    "avg_speed_mean",
    "avg_speed_lo",
    "avg_speed_hi",
    "accepted_inflow_mean",
    "accepted_inflow_lo",
    "accepted_inflow_hi",
)


@dataclass(frozen=True)
class SeedRecord:
    seed: int
    outflow: float  # veh/h
    avg_speed: float  # m/s
    accepted_inflow: float  # veh/h

    def __post_init__(self):
        if self.outflow < 0 or self.accepted_inflow < 0 or self.avg_speed < 0:
            raise ValueError(f"negative metric in {self}")


@dataclass
class MetricsSeries:
    """Per-seed results of one condition. Both headline metrics are always carried together."""

    condition: str
    records: list[SeedRecord] = field(default_factory=list)
    failures: dict[int, str] = field(default_factory=dict)  # seed -> error message
    nonconvergent: bool = False
    config_hash: str = ""  # digest of the condition minus its seed list

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.records]

    def ci(self, name: str) -> tuple[float, float, float]:
        return mean_ci(self.column(name))

    def summary_rows(self) -> list[tuple]:
        return [(self.condition, r.seed, r.outflow, r.avg_speed, r.accepted_inflow) for r in self.records]

    def aggregate_row(self) -> tuple:
        """Aggregate row; a single record gets a zero-width interval (one deterministic run)."""
        row: list = [self.condition, len(self.records)]
        for name in ("outflow", "avg_speed", "accepted_inflow"):
            col = self.column(name)
            if col.size == 0:
                row += [math.nan] * 3
            elif col.size == 1:
                row += [float(col[0])] * 3
            else:
                row += list(mean_ci(col))
        return tuple(row)


def outflow(exit_times: Iterable[float], window: float, start: float = 0.0) -> float:
    """Exits with ``start < t <= start + window``, scaled to veh/h."""
    if window <= 0:
        raise ValueError("window must be positive")
    end = start + window
    n = sum(1 for t in exit_times if start < t <= end)
    return n * 3600.0 / window


def mean_ci(values: Sequence[float]) -> tuple[float, float, float]:
    """Mean with a normal-approximation 95% interval.

    Raises:
        InsufficientSeeds: fewer than two values.
    """
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise InsufficientSeeds(f"need at least 2 values, got {x.size}")
    m = float(x.mean())
    half = Z95 * float(x.std(ddof=1)) / math.sqrt(x.size)
    return m, m - half, m + half


def paired_greater(treatment: Sequence[float], baseline: Sequence[float]) -> float:
    """One-sided paired t-test p-value for ``treatment > baseline``."""
    t = np.asarray(treatment, dtype=float)
    b = np.asarray(baseline, dtype=float)
    if t.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    if t.size < 2:
        raise InsufficientSeeds("paired test needs at least 2 pairs")
    diff = t - b
    if np.all(diff == diff[0]):
        # Zero variance: the t statistic is undefined; decide on the sign alone.
        return 0.0 if diff[0] > 0 else 1.0
    return float(stats.ttest_rel(t, b, alternative="greater").pvalue)
