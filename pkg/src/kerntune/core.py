"""Shared domain types, speedup/success arithmetic, and trace persistence.

All types here are immutable after construction and safe to share between
concurrent workers. Durations are microseconds everywhere; throughput and
occupancy values are percentages in [0, 100].
"""

from __future__ import annotations

import enum
import hashlib
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .errors import DomainError, PersistenceError

TIMED_ITERATIONS = 5
WARMUP_ITERATIONS = 3

# ProfileReport field -> canonical metric name used in raw_metrics, hint
# rules, and report deltas. The compute field maps onto the profiler's
# SM-throughput name.
CANONICAL_METRICS: dict[str, str] = {
    "duration_us": "duration_us",
    "memory_throughput_pct": "memory_throughput_pct",
    "compute_throughput_pct": "sm_throughput_pct",
    "l2_throughput_pct": "l2_throughput_pct",
    "achieved_occupancy_pct": "achieved_occupancy_pct",
}

CANONICAL_METRIC_NAMES: tuple[str, ...] = tuple(CANONICAL_METRICS.values())


def _require_positive(name: str, value: float) -> None:
    if not value > 0:
        raise ValueError(f"{name} must be strictly positive, got {value!r}")


def _require_pct(name: str, value: float) -> None:
    if not 0.0 <= value <= 100.0:
        raise ValueError(f"{name} must lie in [0, 100], got {value!r}")


def digest_text(text: str) -> str:
    """Short stable content digest used for prompt/response audit fields."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class HardwareProfile:
    """Static description of the target GPU used to condition proposals."""

    gpu_name: str
    sm_count: int
    clock_mhz: float
    memory_gib: float
    l2_cache_kib: int
    shared_mem_per_sm_kib: int
    dram_bandwidth_gbps: float

    def __post_init__(self) -> None:
        for name in (
            "sm_count",
            "clock_mhz",
            "memory_gib",
            "l2_cache_kib",
            "shared_mem_per_sm_kib",
            "dram_bandwidth_gbps",
        ):
            _require_positive(name, getattr(self, name))

    def to_dict(self) -> dict[str, Any]:
        return {
            "gpu_name": self.gpu_name,
            "sm_count": self.sm_count,
            "clock_mhz": self.clock_mhz,
            "memory_gib": self.memory_gib,
            "l2_cache_kib": self.l2_cache_kib,
            "shared_mem_per_sm_kib": self.shared_mem_per_sm_kib,
            "dram_bandwidth_gbps": self.dram_bandwidth_gbps,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HardwareProfile":
        return cls(**data)


DEFAULT_HARDWARE = HardwareProfile(
    gpu_name="NVIDIA H100",
    sm_count=132,
    clock_mhz=1980.0,
    memory_gib=96.0,
    l2_cache_kib=51200,
    shared_mem_per_sm_kib=228,
    dram_bandwidth_gbps=3350.0,
)


class Provenance(str, enum.Enum):
    ORIGINAL = "original"
    PROPOSAL = "proposal"
    REMEDIATION = "remediation"


def count_loc(source: str, comment_prefixes: Sequence[str] = ("#",)) -> int:
    """Count lines that are neither blank nor comment-only.

    A line is comment-only when its first non-whitespace characters start a
    line comment (``#`` for the Python-embedded kernel DSL). Inline comments
    do not blank a line.
    """
    count = 0
    for line in source.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if any(stripped.startswith(prefix) for prefix in comment_prefixes):
            continue
        count += 1
    return count


@dataclass(frozen=True)
class KernelVariant:
    """A versioned kernel source with provenance and round index."""

    case_id: str
    round: int
    provenance: Provenance
    source: str
    loc: int = -1

    def __post_init__(self) -> None:
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        if self.round < 0:
            raise ValueError(f"round must be >= 0, got {self.round}")
        if (self.round == 0) != (self.provenance is Provenance.ORIGINAL):
            raise ValueError(
                "round 0 must carry provenance 'original' and vice versa "
                f"(round={self.round}, provenance={self.provenance.value})"
            )
        actual = count_loc(self.source)
        if self.loc == -1:
            object.__setattr__(self, "loc", actual)
        elif self.loc != actual:
            raise ValueError(
                f"loc={self.loc} does not match count_loc(source)={actual}"
            )
        if self.loc < 1:
            raise ValueError("kernel source must contain at least one code line")

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "round": self.round,
            "provenance": self.provenance.value,
            "source": self.source,
            "loc": self.loc,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KernelVariant":
        return cls(
            case_id=data["case_id"],
            round=data["round"],
            provenance=Provenance(data["provenance"]),
            source=data["source"],
            loc=data.get("loc", -1),
        )


def _median(samples: Sequence[float]) -> float:
    return statistics.median(samples)


LATENCY_AGGREGATORS: dict[str, Callable[[Sequence[float]], float]] = {
    "median": _median,
    "mean": lambda s: sum(s) / len(s),
    "min": min,
}


@dataclass(frozen=True)
class LatencyMeasurement:
    """Five timed samples after three untimed warmups, plus their aggregate.

    The aggregate defaults to the median of the five samples, which resists
    single-sample jitter; the aggregator is configurable at construction.
    """

    samples_us: tuple[float, ...]
    aggregate_us: float
    warmup_count: int = WARMUP_ITERATIONS

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples_us", tuple(self.samples_us))
        if len(self.samples_us) != TIMED_ITERATIONS:
            raise ValueError(
                f"expected exactly {TIMED_ITERATIONS} timed samples, "
                f"got {len(self.samples_us)}"
            )
        if any(s < 0 for s in self.samples_us):
            raise ValueError("latency samples must be >= 0")
        if not min(self.samples_us) <= self.aggregate_us <= max(self.samples_us):
            raise ValueError(
                "aggregate_us must lie within [min(samples), max(samples)]"
            )

    @classmethod
    def from_samples(
        cls, samples: Sequence[float], aggregator: str = "median"
    ) -> "LatencyMeasurement":
        if aggregator not in LATENCY_AGGREGATORS:
            raise ValueError(f"unknown latency aggregator {aggregator!r}")
        samples = tuple(float(s) for s in samples)
        if len(samples) != TIMED_ITERATIONS:
            raise ValueError(
                f"expected exactly {TIMED_ITERATIONS} timed samples, "
                f"got {len(samples)}"
            )
        return cls(
            samples_us=samples,
            aggregate_us=LATENCY_AGGREGATORS[aggregator](samples),
        )

    @property
    def spread_us(self) -> float:
        return max(self.samples_us) - min(self.samples_us)

    def to_dict(self) -> dict[str, Any]:
        return {
            "warmup_count": self.warmup_count,
            "samples_us": list(self.samples_us),
            "aggregate_us": self.aggregate_us,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LatencyMeasurement":
        return cls(
            samples_us=tuple(data["samples_us"]),
            aggregate_us=data["aggregate_us"],
            warmup_count=data.get("warmup_count", WARMUP_ITERATIONS),
        )


@dataclass(frozen=True)
class ProfileReport:
    """Parsed hardware metrics for one profiled kernel region.

    The five named fields are mirrored into ``raw_metrics`` under their
    canonical metric names at construction, so report deltas and hint rules
    can treat all metrics uniformly.
    """

    duration_us: float
    memory_throughput_pct: float
    compute_throughput_pct: float
    l2_throughput_pct: float
    achieved_occupancy_pct: float
    latency: LatencyMeasurement
    raw_metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.duration_us < 0:
            raise ValueError(f"duration_us must be >= 0, got {self.duration_us}")
        for name in (
            "memory_throughput_pct",
            "compute_throughput_pct",
            "l2_throughput_pct",
            "achieved_occupancy_pct",
        ):
            _require_pct(name, getattr(self, name))
        merged = dict(self.raw_metrics)
        # canonical entries always mirror the named fields, even if the
        # caller passed conflicting values
        for field_name, canonical in CANONICAL_METRICS.items():
            merged[canonical] = getattr(self, field_name)
        object.__setattr__(self, "raw_metrics", merged)

    def to_dict(self) -> dict[str, Any]:
        return {
            "duration_us": self.duration_us,
            "memory_throughput_pct": self.memory_throughput_pct,
            "compute_throughput_pct": self.compute_throughput_pct,
            "l2_throughput_pct": self.l2_throughput_pct,
            "achieved_occupancy_pct": self.achieved_occupancy_pct,
            "latency": self.latency.to_dict(),
            "raw_metrics": dict(self.raw_metrics),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ProfileReport":
        return cls(
            duration_us=data["duration_us"],
            memory_throughput_pct=data["memory_throughput_pct"],
            compute_throughput_pct=data["compute_throughput_pct"],
            l2_throughput_pct=data["l2_throughput_pct"],
            achieved_occupancy_pct=data["achieved_occupancy_pct"],
            latency=LatencyMeasurement.from_dict(data["latency"]),
            raw_metrics=dict(data.get("raw_metrics", {})),
        )


@dataclass(frozen=True)
class ArbiterThresholds:
    """Decision parameters for the per-round performance arbiter.

    ``success_threshold`` classifies a whole case (>= 1.05x counts as a
    success); ``accept_margin`` guards single-round accepts against timing
    noise; ``diminish_epsilon``/``patience_rounds`` drive the
    diminishing-returns stop; ``spread_fraction`` flags noisy latency
    samples (spread greater than this fraction of the aggregate).
    """

    success_threshold: float = 1.05
    accept_margin: float = 1.01
    diminish_epsilon: float = 0.01
    patience_rounds: int = 2
    round_cap: int = 8
    remediation_cap: int = 3
    spread_fraction: float = 0.25

    def __post_init__(self) -> None:
        if not self.success_threshold > 1.0:
            raise ValueError("success_threshold must be > 1.0")
        if not self.accept_margin >= 1.0:
            raise ValueError("accept_margin must be >= 1.0")
        if not 0.0 < self.diminish_epsilon < 1.0:
            raise ValueError("diminish_epsilon must lie in (0, 1)")
        if self.round_cap < 1:
            raise ValueError("round_cap must be >= 1")
        if self.remediation_cap < 1:
            raise ValueError("remediation_cap must be >= 1")
        if self.patience_rounds < 1:
            raise ValueError("patience_rounds must be >= 1")
        if not self.spread_fraction > 0:
            raise ValueError("spread_fraction must be > 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "success_threshold": self.success_threshold,
            "accept_margin": self.accept_margin,
            "diminish_epsilon": self.diminish_epsilon,
            "patience_rounds": self.patience_rounds,
            "round_cap": self.round_cap,
            "remediation_cap": self.remediation_cap,
            "spread_fraction": self.spread_fraction,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ArbiterThresholds":
        return cls(**data)


class DecisionKind(str, enum.Enum):
    ACCEPT = "accept"
    CONTINUE = "continue"
    FINISH = "finish"


@dataclass(frozen=True)
class Decision:
    """Per-round arbiter verdict with the criterion that fired."""

    kind: DecisionKind
    reason: str

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "reason": self.reason}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Decision":
        return cls(kind=DecisionKind(data["kind"]), reason=data["reason"])


@dataclass(frozen=True)
class RoundRecord:
    """Everything the loop did in one optimization round.

    Stores the full prompt/response/log texts so a persisted trace is a
    complete audit log; the index file carries only their digests.
    """

    round: int
    kernel: KernelVariant
    prompt_text: str
    response_text: str
    build_status: str
    build_log: str
    remediation_attempts: int
    report: ProfileReport | None
    decision: Decision

    def __post_init__(self) -> None:
        if self.round < 1:
            raise ValueError(f"round index must be >= 1, got {self.round}")
        if self.remediation_attempts < 0:
            raise ValueError("remediation_attempts must be >= 0")

    @property
    def prompt_digest(self) -> str:
        return digest_text(self.prompt_text)

    @property
    def response_digest(self) -> str:
        return digest_text(self.response_text)


@dataclass(frozen=True)
class OptimizationTrace:
    """Ordered per-round audit log plus the best kernel/report found.

    Rounds must be contiguous starting at 1. The finish-last and
    best-dominates-accepts invariants are enforced when a trace is
    persisted (a trace under construction legitimately violates them
    mid-loop).
    """

    case_id: str
    rounds: tuple[RoundRecord, ...]
    best_variant: KernelVariant
    best_report: ProfileReport

    def __post_init__(self) -> None:
        object.__setattr__(self, "rounds", tuple(self.rounds))
        for i, record in enumerate(self.rounds, start=1):
            if record.round != i:
                raise ValueError(
                    f"rounds must be contiguous from 1; position {i} has "
                    f"round index {record.round}"
                )

    def validate_final(self) -> None:
        """Check the invariants that only a finished trace must satisfy."""
        if not self.rounds:
            raise ValueError("a finished trace must contain at least one round")
        if self.rounds[-1].decision.kind is not DecisionKind.FINISH:
            raise ValueError("last round of a finished trace must decide 'finish'")
        best = self.best_report.latency.aggregate_us
        for record in self.rounds:
            if record.decision.kind is DecisionKind.ACCEPT and record.report:
                if best > record.report.latency.aggregate_us:
                    raise ValueError(
                        "best_report latency exceeds an accepted round's latency"
                    )


def compute_speedup(baseline_us: float, candidate_us: float) -> float:
    """Speedup of a candidate over a baseline: baseline / candidate latency."""
    if baseline_us <= 0 or candidate_us <= 0:
        raise DomainError(
            f"latencies must be strictly positive, got baseline={baseline_us}, "
            f"candidate={candidate_us}"
        )
    return baseline_us / candidate_us


def classify_success(
    speedup: float, thresholds: ArbiterThresholds | None = None
) -> bool:
    """A case counts as successful at or above the success threshold."""
    if speedup <= 0:
        raise DomainError(f"speedup must be > 0, got {speedup}")
    thresholds = thresholds or ArbiterThresholds()
    return speedup >= thresholds.success_threshold


# --- trace persistence -----------------------------------------------------
#
# Layout per case:
#   <root>/<case_id>/round_<n>/{kernel.src, proposal_prompt.txt,
#                               proposal_response.txt, build.log, profile.json}
#   <root>/<case_id>/trace.json
#
# Round files are written before the index so partially persisted traces
# survive crashes; the index is the completion marker.

_ROUND_FILES = ("kernel.src", "proposal_prompt.txt", "proposal_response.txt", "build.log")


def persist_trace(trace: OptimizationTrace, root: Path | str) -> Path:
    """Write a finished trace under ``root`` and return the index path."""
    trace.validate_final()
    root = Path(root)
    case_dir = root / trace.case_id
    try:
        case_dir.mkdir(parents=True, exist_ok=True)
        for record in trace.rounds:
            round_dir = case_dir / f"round_{record.round}"
            round_dir.mkdir(exist_ok=True)
            (round_dir / "kernel.src").write_text(record.kernel.source)
            (round_dir / "proposal_prompt.txt").write_text(record.prompt_text)
            (round_dir / "proposal_response.txt").write_text(record.response_text)
            (round_dir / "build.log").write_text(record.build_log)
            if record.report is not None:
                (round_dir / "profile.json").write_text(
                    json.dumps(record.report.to_dict(), indent=2)
                )
        index = {
            "case_id": trace.case_id,
            "best_variant": trace.best_variant.to_dict(),
            "best_report": trace.best_report.to_dict(),
            "rounds": [
                {
                    "round": r.round,
                    "kernel": {
                        "case_id": r.kernel.case_id,
                        "round": r.kernel.round,
                        "provenance": r.kernel.provenance.value,
                        "loc": r.kernel.loc,
                    },
                    "prompt_digest": r.prompt_digest,
                    "response_digest": r.response_digest,
                    "build_status": r.build_status,
                    "remediation_attempts": r.remediation_attempts,
                    "has_report": r.report is not None,
                    "decision": r.decision.to_dict(),
                }
                for r in trace.rounds
            ],
        }
        index_path = case_dir / "trace.json"
        index_path.write_text(json.dumps(index, indent=2))
    except OSError as exc:
        raise PersistenceError(
            f"failed to persist trace for case {trace.case_id!r} under "
            f"{case_dir}: {exc}"
        ) from exc
    return index_path


def load_trace(index_path: Path | str) -> OptimizationTrace:
    """Re-load a persisted trace; inverse of :func:`persist_trace`."""
    index_path = Path(index_path)
    try:
        index = json.loads(index_path.read_text())
        case_dir = index_path.parent
        rounds = []
        for entry in index["rounds"]:
            round_dir = case_dir / f"round_{entry['round']}"
            kernel = KernelVariant(
                case_id=entry["kernel"]["case_id"],
                round=entry["kernel"]["round"],
                provenance=Provenance(entry["kernel"]["provenance"]),
                source=(round_dir / "kernel.src").read_text(),
                loc=entry["kernel"]["loc"],
            )
            report = None
            if entry["has_report"]:
                report = ProfileReport.from_dict(
                    json.loads((round_dir / "profile.json").read_text())
                )
            rounds.append(
                RoundRecord(
                    round=entry["round"],
                    kernel=kernel,
                    prompt_text=(round_dir / "proposal_prompt.txt").read_text(),
                    response_text=(round_dir / "proposal_response.txt").read_text(),
                    build_status=entry["build_status"],
                    build_log=(round_dir / "build.log").read_text(),
                    remediation_attempts=entry["remediation_attempts"],
                    report=report,
                    decision=Decision.from_dict(entry["decision"]),
                )
            )
        return OptimizationTrace(
            case_id=index["case_id"],
            rounds=tuple(rounds),
            best_variant=KernelVariant.from_dict(index["best_variant"]),
            best_report=ProfileReport.from_dict(index["best_report"]),
        )
    except (OSError, KeyError, ValueError) as exc:
        raise PersistenceError(
            f"failed to load trace from {index_path}: {exc}"
        ) from exc
