"""Aggregate statistics over per-kernel run results.

Reproduces the reporting surface of the evaluation: success rates and
average speedups per LOC category, speedup histogram and empirical CDF,
success-by-rounds, code-length-ratio behavior, and Spearman rank
correlations. Everything is pure over in-memory record lists; report
emission is deterministic (byte-identical on identical inputs).
"""

from __future__ import annotations

import itertools
import json
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .core import compute_speedup
from .errors import PersistenceError, StatisticsError

CATEGORIES: tuple[str, ...] = ("Q1", "Q2", "Q3", "Q4", "tail_high", "tail_low")
OVERALL = "overall"


@dataclass(frozen=True)
class RunResultRecord:
    """Per-kernel outcome row feeding the analysis stage."""

    case_id: str
    category: str
    baseline_us: float
    best_us: float
    rounds_used: int
    success: bool
    loc_original: int
    loc_optimized: int
    llm_calls: int = 0
    api_cost_usd: float = 0.0

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(
                f"category must be one of {CATEGORIES}, got {self.category!r}"
            )
        if self.baseline_us <= 0 or self.best_us <= 0:
            raise ValueError("baseline_us and best_us must be > 0")
        if self.rounds_used < 1:
            raise ValueError("rounds_used must be >= 1")
        if self.loc_original < 1 or self.loc_optimized < 1:
            raise ValueError("loc fields must be >= 1")
        if self.llm_calls < 0 or self.api_cost_usd < 0:
            raise ValueError("llm_calls and api_cost_usd must be >= 0")

    @property
    def speedup(self) -> float:
        return compute_speedup(self.baseline_us, self.best_us)

    @property
    def length_ratio(self) -> float:
        return self.loc_optimized / self.loc_original

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "category": self.category,
            "baseline_us": self.baseline_us,
            "best_us": self.best_us,
            "rounds_used": self.rounds_used,
            "success": self.success,
            "loc_original": self.loc_original,
            "loc_optimized": self.loc_optimized,
            "llm_calls": self.llm_calls,
            "api_cost_usd": self.api_cost_usd,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunResultRecord":
        return cls(**data)


# --- results ledger -----------------------------------------------------------


def append_record(path: Path | str, record: RunResultRecord) -> None:
    """Append one record to the JSONL results ledger."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a") as handle:
            handle.write(json.dumps(record.to_dict()) + "\n")
    except OSError as exc:
        raise PersistenceError(f"failed to append to ledger {path}: {exc}") from exc


def load_ledger(path: Path | str) -> list[RunResultRecord]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise PersistenceError(f"failed to read ledger {path}: {exc}") from exc
    return [RunResultRecord.from_dict(json.loads(line)) for line in lines if line.strip()]


# --- summary table ------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    category: str
    n_kernels: int
    n_success: int
    success_rate: float
    avg_speedup_on_success: float | None
    geomean_speedup_on_success: float | None


@dataclass(frozen=True)
class SummaryTable:
    """Per-category success/speedup rows plus an overall row.

    ``overall_avg_all`` averages best-achieved speedups over all records,
    failures included (they contribute their possibly sub-1.0 ratios); the
    per-row averages are over successful records only.
    """

    rows: tuple[SummaryRow, ...]
    overall: SummaryRow
    overall_avg_all: float

    def __post_init__(self) -> None:
        if self.overall.n_kernels != sum(r.n_kernels for r in self.rows):
            raise ValueError("overall row count must equal the category sum")
        if self.overall.n_success != sum(r.n_success for r in self.rows):
            raise ValueError("overall success count must equal the category sum")


def _speedup_stats(speedups: Sequence[float]) -> tuple[float | None, float | None]:
    if not speedups:
        return None, None
    mean = math.fsum(speedups) / len(speedups)
    geo = math.exp(math.fsum(math.log(s) for s in speedups) / len(speedups))
    return mean, geo


def aggregate(records: Sequence[RunResultRecord]) -> SummaryTable:
    """Build the per-category summary table.

    Categories with zero successes report their average speedup as absent,
    never as zero.
    """
    if not records:
        raise StatisticsError("cannot aggregate an empty record list")
    rows = []
    for category in CATEGORIES:
        members = [r for r in records if r.category == category]
        if not members:
            continue
        successes = [r.speedup for r in members if r.success]
        mean, geo = _speedup_stats(successes)
        rows.append(
            SummaryRow(
                category=category,
                n_kernels=len(members),
                n_success=len(successes),
                success_rate=len(successes) / len(members),
                avg_speedup_on_success=mean,
                geomean_speedup_on_success=geo,
            )
        )
    all_successes = [r.speedup for r in records if r.success]
    mean, geo = _speedup_stats(all_successes)
    overall = SummaryRow(
        category=OVERALL,
        n_kernels=len(records),
        n_success=len(all_successes),
        success_rate=len(all_successes) / len(records),
        avg_speedup_on_success=mean,
        geomean_speedup_on_success=geo,
    )
    overall_avg_all = math.fsum(r.speedup for r in records) / len(records)
    return SummaryTable(rows=tuple(rows), overall=overall, overall_avg_all=overall_avg_all)


# --- speedup distribution -------------------------------------------------------


@dataclass(frozen=True)
class HistogramBin:
    lo: float
    hi: float
    count: int


@dataclass(frozen=True)
class HistogramResult:
    bins: tuple[HistogramBin, ...]
    excluded_over_cap: int
    n_success: int
    bin_width: float
    cap: float


def speedup_histogram(
    records: Sequence[RunResultRecord],
    bin_width: float = 0.25,
    cap: float = 10.0,
) -> HistogramResult:
    """Histogram of successful speedups starting at 1.0.

    Values strictly above ``cap`` are excluded from the bins and counted
    separately (outlier policy). Bins are half-open with a right-closed
    lower bin on exact edges: a value landing exactly on a bin boundary is
    assigned to the bin it closes.
    """
    if bin_width <= 0:
        raise StatisticsError("bin_width must be > 0")
    start = 1.0
    speedups = [r.speedup for r in records if r.success]
    counts: dict[int, int] = {}
    excluded = 0
    for s in speedups:
        if s > cap:
            excluded += 1
            continue
        idx = int(math.floor((s - start) / bin_width))
        if idx > 0 and s == start + idx * bin_width:
            idx -= 1
        counts[idx] = counts.get(idx, 0) + 1
    bins = tuple(
        HistogramBin(
            lo=start + idx * bin_width,
            hi=start + (idx + 1) * bin_width,
            count=counts[idx],
        )
        for idx in sorted(counts)
    )
    return HistogramResult(
        bins=bins,
        excluded_over_cap=excluded,
        n_success=len(speedups),
        bin_width=bin_width,
        cap=cap,
    )


@dataclass(frozen=True)
class CdfResult:
    """Empirical CDF over successful speedups, plus the complementary
    "fraction of kernels at or above a threshold" view."""

    points: tuple[tuple[float, float], ...]
    tail_points: tuple[tuple[float, float], ...]
    n_success: int

    def fraction_at_least(self, threshold: float) -> float:
        total = 0.0
        prev = 0.0
        for value, cum in self.points:
            if value >= threshold:
                total += cum - prev
            prev = cum
        return total


def speedup_cdf(records: Sequence[RunResultRecord]) -> CdfResult:
    speedups = sorted(r.speedup for r in records if r.success)
    if not speedups:
        raise StatisticsError("CDF requires at least one successful record")
    n = len(speedups)
    points = []
    tail_points = []
    seen = 0
    for value, group in itertools.groupby(speedups):
        size = len(list(group))
        tail_points.append((value, (n - seen) / n))
        seen += size
        points.append((value, seen / n))
    return CdfResult(
        points=tuple(points), tail_points=tuple(tail_points), n_success=n
    )


@dataclass(frozen=True)
class RoundsRow:
    rounds_used: int
    n_attempted: int
    n_success: int
    success_rate: float


def success_by_rounds(records: Sequence[RunResultRecord]) -> tuple[RoundsRow, ...]:
    """Group outcomes by how many optimization rounds the case used."""
    groups: dict[int, list[RunResultRecord]] = {}
    for record in records:
        groups.setdefault(record.rounds_used, []).append(record)
    rows = []
    for rounds_used in sorted(groups):
        members = groups[rounds_used]
        n_success = sum(1 for r in members if r.success)
        rows.append(
            RoundsRow(
                rounds_used=rounds_used,
                n_attempted=len(members),
                n_success=n_success,
                success_rate=n_success / len(members),
            )
        )
    return tuple(rows)


@dataclass(frozen=True)
class LengthRatioStats:
    ratios: tuple[float, ...]
    median: float
    expansion_fraction: float


def length_ratio_stats(records: Sequence[RunResultRecord]) -> LengthRatioStats:
    """Optimized-over-original LOC ratios, their median, and the fraction of
    kernels that grew."""
    if not records:
        raise StatisticsError("length ratio stats require at least one record")
    ratios = tuple(r.length_ratio for r in records)
    return LengthRatioStats(
        ratios=ratios,
        median=statistics.median(ratios),
        expansion_fraction=sum(1 for r in ratios if r > 1.0) / len(ratios),
    )


# --- rank correlation ------------------------------------------------------------

_EXACT_PVALUE_MAX_N = 10
_PERMUTATION_BATCH = 100_000


def _average_ranks(values: Sequence[float]) -> list[float]:
    n = len(values)
    order = sorted(range(n), key=lambda i: values[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        average = (i + j) / 2 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = average
        i = j + 1
    return ranks


def _pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    num = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    dx = math.sqrt(math.fsum((x - mx) ** 2 for x in xs))
    dy = math.sqrt(math.fsum((y - my) ** 2 for y in ys))
    if dx == 0.0 or dy == 0.0:
        raise StatisticsError("constant series has no rank correlation")
    return num / (dx * dy)


def _exact_permutation_pvalue(
    rx: Sequence[float], ry: Sequence[float], rho_obs: float
) -> float:
    n = len(rx)
    rx_arr = np.asarray(rx, dtype=float)
    ry_arr = np.asarray(ry, dtype=float)
    rx_c = rx_arr - rx_arr.mean()
    denom_x = math.sqrt(float((rx_c**2).sum()))
    ry_c_sq = float(((ry_arr - ry_arr.mean()) ** 2).sum())
    denom_y = math.sqrt(ry_c_sq)
    ry_mean = float(ry_arr.mean())
    threshold = abs(rho_obs) - 1e-12

    total = math.factorial(n)
    count = 0
    perm_iter = itertools.permutations(range(n))
    while True:
        batch = list(itertools.islice(perm_iter, _PERMUTATION_BATCH))
        if not batch:
            break
        permuted = ry_arr[np.asarray(batch)] - ry_mean
        rhos = (permuted @ rx_c) / (denom_x * denom_y)
        count += int((np.abs(rhos) >= threshold).sum())
    return count / total


def spearman(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Spearman rank correlation with average ranks for ties.

    The p-value is exact (full permutation enumeration) for n <= 10 and uses
    the t-distribution approximation above that.
    """
    if len(xs) != len(ys):
        raise StatisticsError(
            f"series lengths differ: {len(xs)} vs {len(ys)}"
        )
    n = len(xs)
    if n < 3:
        raise StatisticsError("rank correlation requires at least 3 points")
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    rho = _pearson(rx, ry)
    if n <= _EXACT_PVALUE_MAX_N:
        p_value = _exact_permutation_pvalue(rx, ry, rho)
    else:
        if abs(rho) >= 1.0:
            p_value = 0.0
        else:
            from scipy.stats import t as t_dist

            t_stat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
            p_value = float(2.0 * t_dist.sf(abs(t_stat), df=n - 2))
    return rho, min(1.0, p_value)


@dataclass(frozen=True)
class CorrelationResult:
    name: str
    n: int
    rho: float
    p_value: float


# --- report emission --------------------------------------------------------------

REPORT_FILES = (
    "summary.csv",
    "hist.csv",
    "cdf.csv",
    "rounds.csv",
    "length.csv",
    "corr.csv",
    "report.txt",
)


def _fmt_opt(value: float | None) -> str:
    return "" if value is None else repr(value)


def emit_report(
    summary: SummaryTable,
    histogram: HistogramResult,
    cdf: CdfResult,
    rounds: Sequence[RoundsRow],
    length_stats: LengthRatioStats,
    correlations: Sequence[CorrelationResult],
    out_dir: Path | str,
) -> list[Path]:
    """Write the CSV tables and a plain-text summary under ``out_dir``.

    Fails before writing anything when the summary is empty; re-running on
    identical inputs produces byte-identical files.
    """
    if not summary.rows:
        raise StatisticsError("refusing to emit a report over zero records")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)

        lines = ["category,n_kernels,n_success,success_rate,avg_speedup_on_success,geomean_speedup_on_success"]
        for row in (*summary.rows, summary.overall):
            lines.append(
                f"{row.category},{row.n_kernels},{row.n_success},"
                f"{row.success_rate!r},{_fmt_opt(row.avg_speedup_on_success)},"
                f"{_fmt_opt(row.geomean_speedup_on_success)}"
            )
        (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")

        lines = ["bin_lo,bin_hi,count"]
        for b in histogram.bins:
            lines.append(f"{b.lo!r},{b.hi!r},{b.count}")
        (out_dir / "hist.csv").write_text("\n".join(lines) + "\n")

        lines = ["speedup,fraction_le,fraction_ge"]
        tail = dict(cdf.tail_points)
        for value, cum in cdf.points:
            lines.append(f"{value!r},{cum!r},{tail[value]!r}")
        (out_dir / "cdf.csv").write_text("\n".join(lines) + "\n")

        lines = ["rounds_used,n_attempted,n_success,success_rate"]
        for row in rounds:
            lines.append(
                f"{row.rounds_used},{row.n_attempted},{row.n_success},"
                f"{row.success_rate!r}"
            )
        (out_dir / "rounds.csv").write_text("\n".join(lines) + "\n")

        lines = ["ratio"]
        for ratio in length_stats.ratios:
            lines.append(repr(ratio))
        (out_dir / "length.csv").write_text("\n".join(lines) + "\n")

        lines = ["pair,n,rho,p_value"]
        for corr in correlations:
            lines.append(f"{corr.name},{corr.n},{corr.rho!r},{corr.p_value!r}")
        (out_dir / "corr.csv").write_text("\n".join(lines) + "\n")

        report = [
            f"kernels analyzed: {summary.overall.n_kernels}",
            f"successful (speedup at threshold or above): {summary.overall.n_success}",
            f"overall success rate: {summary.overall.success_rate:.1%}",
            "average speedup on success: "
            + (
                f"{summary.overall.avg_speedup_on_success:.2f}x"
                if summary.overall.avg_speedup_on_success is not None
                else "n/a"
            ),
            f"average speedup over all records (failures included): "
            f"{summary.overall_avg_all:.2f}x",
            f"histogram: {histogram.n_success} successes, "
            f"{histogram.excluded_over_cap} excluded above {histogram.cap:g}x cap",
            f"median length ratio: {length_stats.median:.3f}",
            f"fraction of kernels that grew: {length_stats.expansion_fraction:.1%}",
        ]
        (out_dir / "report.txt").write_text("\n".join(report) + "\n")
    except OSError as exc:
        raise PersistenceError(f"failed to write report under {out_dir}: {exc}") from exc
    return [out_dir / name for name in REPORT_FILES]
