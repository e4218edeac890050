"""Time-series comparison metrics: MAPE, percentage difference, run reports.

MAPE treats the first series as the reference:

    MAPE(%) = (1/n) * sum_i |(x1_i - x2_i) / x1_i| * 100

The per-sample percentage difference is normalized by the midpoint:

    PD_i(%) = (x1_i - x2_i) / ((x1_i + x2_i) / 2) * 100

``avg_pd`` aggregates the signed PD_i by arithmetic mean; because the
intended aggregation of tabulated "average PD" values is ambiguous, the
mean of |PD_i| is also available (``avg_abs_pd``) and is what the
comparison reports carry as the secondary column.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NoOverlap(Exception):
    """The two series share no common time interval."""


class ZeroReferenceSample(Exception):
    """A reference sample is zero; MAPE is undefined at that index."""


class ZeroMidpointSample(Exception):
    """A sample pair sums to zero; PD is undefined at that index."""


class LabelMismatch(Exception):
    """Trace bundles do not carry the same signal labels."""


@dataclass(frozen=True)
class TimeSeries:
    """A uniformly sampled signal: start time, step (µs) and samples."""

    t0_us: int
    dt_us: int
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "values", np.asarray(self.values, dtype=np.float64)
        )
        if self.dt_us <= 0:
            raise ValueError("dt_us must be positive")
        if self.values.ndim != 1 or len(self.values) == 0:
            raise ValueError("values must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def end_us(self) -> int:
        """Time of the last sample."""
        return self.t0_us + (len(self.values) - 1) * self.dt_us

    def times_us(self) -> np.ndarray:
        return self.t0_us + self.dt_us * np.arange(len(self.values), dtype=np.int64)


def align(a: TimeSeries, b: TimeSeries) -> tuple[TimeSeries, TimeSeries]:
    """Resample both series onto the coarser grid over their common window.

    Zero-order hold: the value at grid time t is the sample at or before t.
    Series already on identical grids are returned unchanged.
    """
    if a.t0_us == b.t0_us and a.dt_us == b.dt_us and len(a) == len(b):
        return a, b
    dt = max(a.dt_us, b.dt_us)
    start = max(a.t0_us, b.t0_us)
    end = min(a.end_us, b.end_us)
    if start > end:
        raise NoOverlap(
            f"series cover [{a.t0_us}, {a.end_us}] and [{b.t0_us}, {b.end_us}] µs"
        )
    n = (end - start) // dt + 1
    grid = start + dt * np.arange(n, dtype=np.int64)

    def hold(s: TimeSeries) -> np.ndarray:
        idx = (grid - s.t0_us) // s.dt_us
        return s.values[np.asarray(idx, dtype=np.int64)]

    return (
        TimeSeries(int(start), int(dt), hold(a)),
        TimeSeries(int(start), int(dt), hold(b)),
    )


def _check_aligned(x1: TimeSeries, x2: TimeSeries) -> None:
    if len(x1) != len(x2) or x1.t0_us != x2.t0_us or x1.dt_us != x2.dt_us:
        raise ValueError("series must be aligned (see align()) and of equal length")


def mape(x1: TimeSeries, x2: TimeSeries) -> float:
    """Mean absolute percentage error of x2 against reference x1, in percent."""
    _check_aligned(x1, x2)
    zeros = np.flatnonzero(x1.values == 0.0)
    if zeros.size:
        raise ZeroReferenceSample(f"reference sample is zero at index {zeros[0]}")
    return float(np.mean(np.abs((x1.values - x2.values) / x1.values)) * 100.0)


def pd_samples(x1: TimeSeries, x2: TimeSeries) -> np.ndarray:
    """Per-sample signed percentage differences PD_i."""
    _check_aligned(x1, x2)
    mid = 0.5 * (x1.values + x2.values)
    zeros = np.flatnonzero(mid == 0.0)
    if zeros.size:
        raise ZeroMidpointSample(f"sample midpoint is zero at index {zeros[0]}")
    return (x1.values - x2.values) / mid * 100.0


def avg_pd(x1: TimeSeries, x2: TimeSeries) -> float:
    """Mean signed percentage difference, in percent."""
    return float(np.mean(pd_samples(x1, x2)))


def avg_abs_pd(x1: TimeSeries, x2: TimeSeries) -> float:
    """Mean absolute percentage difference, in percent."""
    return float(np.mean(np.abs(pd_samples(x1, x2))))


@dataclass(frozen=True)
class ComparisonRow:
    comparison: str
    label: str
    mape_pct: float
    avg_pd_pct: float
    avg_abs_pd_pct: float
    n: int


@dataclass(frozen=True)
class TraceBundle:
    """One run's named signal traces (e.g. esm1..esm5 SOC series)."""

    name: str
    traces: dict[str, TimeSeries]

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.traces)


@dataclass
class ComparisonReport:
    scenario: str
    reference: str
    rows: list[ComparisonRow] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["scenario,comparison,esm,mape_pct,avg_pd_pct,avg_abs_pd_pct,n"]
        for r in self.rows:
            lines.append(
                f"{self.scenario},{r.comparison},{r.label},"
                f"{r.mape_pct!r},{r.avg_pd_pct!r},{r.avg_abs_pd_pct!r},{r.n}"
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """Aligned plain-text table, one block per comparison."""
        out = [f"scenario: {self.scenario}   reference: {self.reference}"]
        header = f"{'comparison':<32} {'signal':<8} {'MAPE (%)':>12} {'Avg PD (%)':>12} {'Avg |PD| (%)':>13} {'n':>9}"
        out.append(header)
        out.append("-" * len(header))
        for r in self.rows:
            out.append(
                f"{r.comparison:<32} {r.label:<8} {r.mape_pct:>12.6f} "
                f"{r.avg_pd_pct:>12.6f} {r.avg_abs_pd_pct:>13.6f} {r.n:>9}"
            )
        return "\n".join(out) + "\n"


def compare_runs(
    bundles: list[TraceBundle], scenario: str = "", reference_index: int = 0
) -> ComparisonReport:
    """Compare every bundle against the designated reference bundle.

    Emits one row per (comparison bundle, signal label): MAPE, mean signed
    PD and mean |PD| between the reference trace and the other trace.
    """
    if not bundles:
        raise ValueError("need at least one bundle")
    ref = bundles[reference_index]
    report = ComparisonReport(scenario=scenario or ref.name, reference=ref.name)
    for i, other in enumerate(bundles):
        if i == reference_index:
            continue
        if other.labels != ref.labels:
            raise LabelMismatch(
                f"bundle {other.name!r} labels {other.labels} != "
                f"reference labels {ref.labels}"
            )
        for label in ref.labels:
            x1, x2 = align(ref.traces[label], other.traces[label])
            report.rows.append(
                ComparisonRow(
                    comparison=f"{ref.name} vs {other.name}",
                    label=label,
                    mape_pct=mape(x1, x2),
                    avg_pd_pct=avg_pd(x1, x2),
                    avg_abs_pd_pct=avg_abs_pd(x1, x2),
                    n=len(x1),
                )
            )
    return report
