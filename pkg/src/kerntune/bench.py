"""Corpus ingestion, LOC stratification, and deterministic subset sampling.

Corpus layout: one directory per case containing ``kernel.src``,
``tests/correctness/*``, ``tests/perf/*``, and an optional ``hardware.json``
overriding the global hardware profile. Non-conforming directories are
skipped with a reason, never fixed up.

The subset sampler is part of the external reproducibility contract: it
draws with a SplitMix64 stream (seeded with the user seed, consumed bin by
bin in Q1..Q4 order, indices via ``next() mod remaining``), so any
implementation of the same documented algorithm selects the same cases.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .analysis import RunResultRecord
from .core import (
    DEFAULT_HARDWARE,
    ArbiterThresholds,
    HardwareProfile,
    KernelVariant,
    Provenance,
    classify_success,
)
from .errors import (
    DegenerateDistributionError,
    EmptyCorpusError,
    PersistenceError,
    PreconditionError,
    SamplingError,
)

KERNEL_FILENAME = "kernel.src"
BIN_NAMES = ("Q1", "Q2", "Q3", "Q4")
CENTRAL_TOTAL = 30
TAIL_PICKS_EACH = 3


@dataclass(frozen=True)
class KernelCase:
    """One benchmark case: original kernel plus its test files."""

    case_id: str
    kernel: KernelVariant
    correctness_tests: tuple[str, ...]
    perf_tests: tuple[str, ...]
    hardware: HardwareProfile

    def __post_init__(self) -> None:
        object.__setattr__(self, "correctness_tests", tuple(self.correctness_tests))
        object.__setattr__(self, "perf_tests", tuple(self.perf_tests))
        if not self.case_id:
            raise ValueError("case_id must be non-empty")
        if self.kernel.provenance is not Provenance.ORIGINAL:
            raise ValueError("a corpus case must hold an original kernel")

    @property
    def loc(self) -> int:
        return self.kernel.loc


@dataclass(frozen=True)
class SkipRecord:
    case_id: str
    reason: str


@dataclass(frozen=True)
class IngestResult:
    """Conforming cases (ordered by case_id) plus the skip report."""

    cases: tuple[KernelCase, ...]
    skipped: tuple[SkipRecord, ...]

    def render_skip_report(self) -> str:
        lines = [
            json.dumps({"case_id": s.case_id, "reason": s.reason})
            for s in self.skipped
        ]
        return "\n".join(lines) + ("\n" if lines else "")


def _collect_tests(case_dir: Path, kind: str) -> tuple[str, ...]:
    test_dir = case_dir / "tests" / kind
    if not test_dir.is_dir():
        return ()
    return tuple(sorted(str(p) for p in test_dir.iterdir() if p.is_file()))


def ingest_corpus(
    root: Path | str, default_hardware: HardwareProfile = DEFAULT_HARDWARE
) -> IngestResult:
    """Scan a corpus directory into KernelCases, skipping non-conforming ones."""
    root = Path(root)
    if not root.is_dir():
        raise PersistenceError(f"corpus root {root} is not a readable directory")
    cases: list[KernelCase] = []
    skipped: list[SkipRecord] = []
    for case_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        case_id = case_dir.name
        kernel_path = case_dir / KERNEL_FILENAME
        if not kernel_path.is_file():
            skipped.append(SkipRecord(case_id, f"missing {KERNEL_FILENAME}"))
            continue
        try:
            source = kernel_path.read_text()
        except OSError as exc:
            skipped.append(SkipRecord(case_id, f"unreadable kernel source: {exc}"))
            continue
        correctness = _collect_tests(case_dir, "correctness")
        perf = _collect_tests(case_dir, "perf")
        if not correctness and not perf:
            skipped.append(SkipRecord(case_id, "no test files"))
            continue
        hardware = default_hardware
        hardware_path = case_dir / "hardware.json"
        if hardware_path.is_file():
            try:
                hardware = HardwareProfile.from_dict(
                    json.loads(hardware_path.read_text())
                )
            except (OSError, ValueError, TypeError, KeyError) as exc:
                skipped.append(SkipRecord(case_id, f"invalid hardware.json: {exc}"))
                continue
        try:
            kernel = KernelVariant(
                case_id=case_id,
                round=0,
                provenance=Provenance.ORIGINAL,
                source=source,
            )
        except ValueError as exc:
            skipped.append(SkipRecord(case_id, f"unusable kernel source: {exc}"))
            continue
        cases.append(
            KernelCase(
                case_id=case_id,
                kernel=kernel,
                correctness_tests=correctness,
                perf_tests=perf,
                hardware=hardware,
            )
        )
    if not cases:
        raise EmptyCorpusError(f"no conforming cases under {root}")
    return IngestResult(cases=tuple(cases), skipped=tuple(skipped))


# --- stratification -----------------------------------------------------------


def linear_percentile(sorted_values: Sequence[float], q: float) -> float:
    """Percentile by linear interpolation between closest ranks.

    With n sorted values, the q-th percentile sits at fractional rank
    h = (n - 1) * q / 100 and interpolates between the neighbors of h.
    """
    if not sorted_values:
        raise ValueError("percentile of an empty sequence")
    n = len(sorted_values)
    h = (n - 1) * q / 100.0
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    frac = h - lo
    return sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo])


@dataclass(frozen=True)
class CentralBin:
    name: str
    lo: float
    hi: float
    cases: tuple[KernelCase, ...]


@dataclass(frozen=True)
class Stratification:
    """Partition of a corpus into central LOC quartiles and tail groups."""

    p5: float
    p95: float
    central_bins: tuple[CentralBin, ...]
    tail_low: tuple[KernelCase, ...]
    tail_high: tuple[KernelCase, ...]

    def category_of(self, case_id: str) -> str:
        for bin_ in self.central_bins:
            if any(c.case_id == case_id for c in bin_.cases):
                return bin_.name
        if any(c.case_id == case_id for c in self.tail_low):
            return "tail_low"
        if any(c.case_id == case_id for c in self.tail_high):
            return "tail_high"
        raise KeyError(f"case {case_id!r} not in this stratification")

    @property
    def n_cases(self) -> int:
        return (
            sum(len(b.cases) for b in self.central_bins)
            + len(self.tail_low)
            + len(self.tail_high)
        )


def _by_loc_then_id(cases: Iterable[KernelCase]) -> tuple[KernelCase, ...]:
    return tuple(sorted(cases, key=lambda c: (c.loc, c.case_id)))


def stratify(cases: Sequence[KernelCase]) -> Stratification:
    """Split cases into P5/P95 tails and LOC quartiles over the central 90%.

    Quartile boundaries are computed over the central population only;
    every case lands in exactly one bin, deterministically ordered by
    (LOC, case_id).
    """
    if len(cases) < 8:
        raise PreconditionError(
            f"stratification needs at least 8 cases, got {len(cases)}"
        )
    locs = sorted(c.loc for c in cases)
    if locs[0] == locs[-1]:
        raise DegenerateDistributionError(
            f"all {len(cases)} cases share LOC={locs[0]}; the LOC distribution "
            "collapses to a single bin and cannot be stratified"
        )
    p5 = linear_percentile(locs, 5.0)
    p95 = linear_percentile(locs, 95.0)
    tail_low = _by_loc_then_id(c for c in cases if c.loc < p5)
    tail_high = _by_loc_then_id(c for c in cases if c.loc > p95)
    central = [c for c in cases if p5 <= c.loc <= p95]
    central_locs = sorted(c.loc for c in central)
    q25 = linear_percentile(central_locs, 25.0)
    q50 = linear_percentile(central_locs, 50.0)
    q75 = linear_percentile(central_locs, 75.0)
    bounds = ((p5, q25), (q25, q50), (q50, q75), (q75, p95))
    members: list[list[KernelCase]] = [[], [], [], []]
    for case in central:
        if case.loc <= q25:
            members[0].append(case)
        elif case.loc <= q50:
            members[1].append(case)
        elif case.loc <= q75:
            members[2].append(case)
        else:
            members[3].append(case)
    central_bins = tuple(
        CentralBin(name=name, lo=lo, hi=hi, cases=_by_loc_then_id(group))
        for name, (lo, hi), group in zip(BIN_NAMES, bounds, members)
    )
    return Stratification(
        p5=p5,
        p95=p95,
        central_bins=central_bins,
        tail_low=tail_low,
        tail_high=tail_high,
    )


# --- seeded subset sampling -----------------------------------------------------

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64: the documented 64-bit counter-based generator behind
    subset sampling. Part of the reproducibility contract, so reimplement
    bit-for-bit rather than swapping in a library RNG."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        return self.next_u64() % n


def largest_remainder_allocation(
    populations: Sequence[int], total: int
) -> list[int]:
    """Allocate ``total`` picks proportionally with largest-remainder
    rounding; remainder ties break by bin index order."""
    n_total = sum(populations)
    if n_total == 0:
        raise SamplingError("cannot allocate picks over empty bins")
    quotas = [total * p / n_total for p in populations]
    base = [math.floor(q) for q in quotas]
    leftover = total - sum(base)
    order = sorted(
        range(len(populations)), key=lambda i: (-(quotas[i] - base[i]), i)
    )
    for i in order[:leftover]:
        base[i] += 1
    return base


@dataclass(frozen=True)
class SubsetSelection:
    """36 deterministic case picks: 30 central (proportional by bin) plus
    the 3 shortest and 3 longest kernels."""

    seed: int
    central_picks: tuple[tuple[str, tuple[str, ...]], ...]
    tail_low_picks: tuple[str, ...]
    tail_high_picks: tuple[str, ...]

    @property
    def allocation(self) -> dict[str, int]:
        return {name: len(ids) for name, ids in self.central_picks}

    @property
    def all_ids(self) -> tuple[str, ...]:
        ids: list[str] = []
        for _, bin_ids in self.central_picks:
            ids.extend(bin_ids)
        ids.extend(self.tail_low_picks)
        ids.extend(self.tail_high_picks)
        return tuple(ids)

    def __post_init__(self) -> None:
        ids = self.all_ids
        if len(set(ids)) != len(ids):
            raise ValueError("subset selection contains duplicate case ids")


def sample_subset(
    s: Stratification,
    seed: int,
    central_total: int = CENTRAL_TOTAL,
    tail_each: int = TAIL_PICKS_EACH,
) -> SubsetSelection:
    """Draw the evaluation subset from a stratification, reproducibly.

    Central picks: proportional largest-remainder allocation across Q1..Q4,
    then a partial Fisher-Yates draw per bin over candidates sorted by
    case_id, consuming one SplitMix64 stream seeded with ``seed``. Tail
    picks are the deterministic extremes (ties broken by case_id).
    """
    populations = [len(b.cases) for b in s.central_bins]
    for bin_, population in zip(s.central_bins, populations):
        if population == 0:
            raise SamplingError(f"central bin {bin_.name} is empty")
    if len(s.tail_low) < tail_each or len(s.tail_high) < tail_each:
        raise SamplingError(
            f"tail groups must each hold at least {tail_each} cases "
            f"(low={len(s.tail_low)}, high={len(s.tail_high)})"
        )
    allocation = largest_remainder_allocation(populations, central_total)
    for bin_, count, population in zip(s.central_bins, allocation, populations):
        if count > population:
            raise SamplingError(
                f"central bin {bin_.name} holds {population} cases but "
                f"{count} are allocated"
            )
    rng = SplitMix64(seed)
    central_picks = []
    for bin_, count in zip(s.central_bins, allocation):
        candidates = sorted(c.case_id for c in bin_.cases)
        for i in range(count):
            j = i + rng.below(len(candidates) - i)
            candidates[i], candidates[j] = candidates[j], candidates[i]
        central_picks.append((bin_.name, tuple(sorted(candidates[:count]))))

    low_sorted = sorted(s.tail_low, key=lambda c: (c.loc, c.case_id))
    high_sorted = sorted(s.tail_high, key=lambda c: (-c.loc, c.case_id))
    return SubsetSelection(
        seed=seed,
        central_picks=tuple(central_picks),
        tail_low_picks=tuple(c.case_id for c in low_sorted[:tail_each]),
        tail_high_picks=tuple(c.case_id for c in high_sorted[:tail_each]),
    )


def classify_case(
    record: RunResultRecord,
    thresholds: ArbiterThresholds,
    stratification: Stratification | None = None,
) -> RunResultRecord:
    """Label a run result with its success flag and stratification category."""
    success = classify_success(record.speedup, thresholds)
    category = record.category
    if stratification is not None:
        category = stratification.category_of(record.case_id)
    return dataclasses.replace(record, success=success, category=category)
