"""Timing protocol, profiler invocation/parsing, report deltas, simulator.

Parsing and diffing are pure. Real profiler invocations serialize through a
module-level gate because the profiler needs the GPU to itself; simulator
calls have no such restriction.
"""

from __future__ import annotations

import enum
import math
import re
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol

from .core import (
    CANONICAL_METRIC_NAMES,
    TIMED_ITERATIONS,
    WARMUP_ITERATIONS,
    KernelVariant,
    LatencyMeasurement,
    ProfileReport,
)
from .errors import (
    ConfigurationError,
    DeltaError,
    InvalidInvocationError,
    ParseError,
    ProtocolViolationError,
)

DEFAULT_RANGE_LABEL = "BIG_OP"

# Only one real profiler run may touch the GPU at a time.
PROFILER_GATE = threading.Lock()


@dataclass(frozen=True)
class ProfilerInvocation:
    """One profiler launch: the annotated range to capture and the command
    whose kernels it wraps."""

    target_command: tuple[str, ...]
    range_label: str = DEFAULT_RANGE_LABEL
    extra_flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_command", tuple(self.target_command))
        object.__setattr__(self, "extra_flags", tuple(self.extra_flags))
        validate_range_label(self.range_label)
        if not self.target_command:
            raise InvalidInvocationError("target_command must be non-empty")


def validate_range_label(label: str) -> None:
    if not label or any(ch.isspace() for ch in label):
        raise InvalidInvocationError(
            f"range label must be non-empty and contain no whitespace, "
            f"got {label!r}"
        )


def build_ncu_command(inv: ProfilerInvocation, output_path: Path | str) -> list[str]:
    """Assemble the profiler command line for one invocation.

    The fixed prefix selects forced overwrite and NVTX range filtering;
    extra flags slot in before the export path so callers can pick metric
    sets or replay modes without disturbing the contract.
    """
    if not inv.target_command:
        raise InvalidInvocationError("target_command must be non-empty")
    return [
        "ncu",
        "-f",
        "--nvtx",
        "--nvtx-include",
        inv.range_label,
        *inv.extra_flags,
        "--export",
        str(output_path),
        *inv.target_command,
    ]


# --- report parsing ---------------------------------------------------------
#
# Two front-ends map onto the same ProfileReport: the human-readable `ncu`
# text summary and its CSV export. Profiler versions rename metrics, so the
# native-name mapping is data, not code.

TEXT_METRIC_MAP: dict[str, str] = {
    "Memory Throughput": "memory_throughput_pct",
    "Compute (SM) Throughput": "sm_throughput_pct",
    "SM Throughput": "sm_throughput_pct",
    "L2 Cache Throughput": "l2_throughput_pct",
    "Achieved Occupancy": "achieved_occupancy_pct",
    "Duration": "duration_us",
    "Kernel Duration": "duration_us",
}

CSV_METRIC_MAP: dict[str, str] = {
    "dram__throughput.avg.pct_of_peak_sustained_elapsed": "memory_throughput_pct",
    "gpu__compute_memory_throughput.avg.pct_of_peak_sustained_elapsed": "memory_throughput_pct",
    "sm__throughput.avg.pct_of_peak_sustained_elapsed": "sm_throughput_pct",
    "lts__throughput.avg.pct_of_peak_sustained_elapsed": "l2_throughput_pct",
    "sm__warps_active.avg.pct_of_peak_sustained_active": "achieved_occupancy_pct",
    "gpu__time_duration.sum": "duration_us",
    **TEXT_METRIC_MAP,
}

# All internal durations are microseconds; table fixtures quoting ms are
# normalized at parse time.
_DURATION_UNITS: dict[str, float] = {
    "usecond": 1.0,
    "us": 1.0,
    "usec": 1.0,
    "msecond": 1e3,
    "ms": 1e3,
    "msec": 1e3,
    "nsecond": 1e-3,
    "ns": 1e-3,
    "nsec": 1e-3,
    "second": 1e6,
    "s": 1e6,
}

_SEPARATOR_RE = re.compile(r"^[\s\-=]+$")


def _parse_number(token: str) -> float:
    return float(token.replace(",", ""))


def _normalize_unknown_name(name: str, unit: str | None) -> str:
    slug = re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")
    if unit == "%" and not slug.endswith("_pct"):
        slug += "_pct"
    elif unit in _DURATION_UNITS and not slug.endswith("_us"):
        slug += "_us"
    return slug


def _convert(value: float, unit: str | None) -> float:
    if unit in _DURATION_UNITS:
        return value * _DURATION_UNITS[unit]
    return value


def _collect_text_metrics(text: str, metric_map: Mapping[str, str]) -> dict[str, float]:
    metrics: dict[str, float] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or _SEPARATOR_RE.match(line) or line.startswith("Section:"):
            continue
        tokens = line.split()
        if len(tokens) < 2 or ("Metric" in tokens and "Value" in tokens):
            continue
        value_token = tokens[-1]
        unit = tokens[-2] if len(tokens) >= 3 else None
        name = " ".join(tokens[:-2]) if unit is not None else tokens[0]
        mapped = metric_map.get(name)
        if mapped is None and unit is not None:
            # Some summaries omit the unit column for ratio metrics.
            alt = " ".join(tokens[:-1])
            if alt in metric_map:
                mapped, name, unit = metric_map[alt], alt, None
        try:
            value = _parse_number(value_token)
        except ValueError:
            if mapped is not None:
                raise ParseError(
                    f"malformed numeric value for {name!r} on line {lineno}: "
                    f"{raw_line.strip()!r}"
                ) from None
            continue
        key = mapped if mapped is not None else _normalize_unknown_name(name, unit)
        metrics[key] = _convert(value, unit)
    return metrics


def _collect_csv_metrics(text: str, metric_map: Mapping[str, str]) -> dict[str, float]:
    import csv
    import io

    metrics: dict[str, float] = {}
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or "Metric Name" not in reader.fieldnames:
        raise ParseError("CSV export lacks a 'Metric Name' column")
    for lineno, row in enumerate(reader, start=2):
        name = (row.get("Metric Name") or "").strip()
        unit = (row.get("Metric Unit") or "").strip() or None
        value_token = (row.get("Metric Value") or "").strip()
        if not name:
            continue
        mapped = metric_map.get(name)
        try:
            value = _parse_number(value_token)
        except ValueError:
            if mapped is not None:
                raise ParseError(
                    f"malformed numeric value for {name!r} on CSV line "
                    f"{lineno}: {value_token!r}"
                ) from None
            continue
        key = mapped if mapped is not None else _normalize_unknown_name(name, unit)
        metrics[key] = _convert(value, unit)
    return metrics


def _looks_like_csv(text: str) -> bool:
    for line in text.splitlines():
        if line.strip():
            return "Metric Name" in line and "," in line
    return False


def parse_ncu_report(
    text: str, latency: LatencyMeasurement | None = None
) -> ProfileReport:
    """Parse one profiled kernel region into a ProfileReport.

    Accepts either the human-readable summary or the CSV export; the format
    is auto-detected. When no timing-protocol measurement accompanies the
    report, a degenerate latency (five copies of the profiled duration) is
    synthesized so the report is self-contained.
    """
    if not text.strip():
        raise ParseError("empty profiler report")
    if _looks_like_csv(text):
        metrics = _collect_csv_metrics(text, CSV_METRIC_MAP)
    else:
        metrics = _collect_text_metrics(text, TEXT_METRIC_MAP)
    for required in CANONICAL_METRIC_NAMES:
        if required not in metrics:
            raise ParseError(f"required metric {required!r} absent from report")
    duration = metrics["duration_us"]
    if latency is None:
        latency = LatencyMeasurement.from_samples([duration] * TIMED_ITERATIONS)
    return ProfileReport(
        duration_us=duration,
        memory_throughput_pct=metrics["memory_throughput_pct"],
        compute_throughput_pct=metrics["sm_throughput_pct"],
        l2_throughput_pct=metrics["l2_throughput_pct"],
        achieved_occupancy_pct=metrics["achieved_occupancy_pct"],
        latency=latency,
        raw_metrics=metrics,
    )


def render_report_text(report: ProfileReport) -> str:
    """Render a report back into the human-readable summary format.

    Fixture tooling: values are written with full precision so
    :func:`parse_ncu_report` recovers every one of them exactly.
    """
    rows = [
        ("Compute (SM) Throughput", "%", report.compute_throughput_pct),
        ("Memory Throughput", "%", report.memory_throughput_pct),
        ("L2 Cache Throughput", "%", report.l2_throughput_pct),
        ("Duration", "usecond", report.duration_us),
        ("Achieved Occupancy", "%", report.achieved_occupancy_pct),
    ]
    lines = ["  Section: GPU Speed Of Light Throughput"]
    for name, unit, value in rows:
        lines.append(f"  {name:<28}{unit:>8}  {value!r}")
    return "\n".join(lines) + "\n"


# --- report deltas ----------------------------------------------------------


class Direction(str, enum.Enum):
    UP = "up"
    DOWN = "down"
    NEUTRAL = "neutral"


@dataclass(frozen=True)
class MetricDelta:
    metric: str
    before: float
    after: float
    direction: Direction


@dataclass(frozen=True)
class ProfileDelta:
    """Per-metric change labels between two reports, ordered by metric name."""

    entries: tuple[MetricDelta, ...]

    def direction_of(self, metric: str) -> Direction:
        for entry in self.entries:
            if entry.metric == metric:
                return entry.direction
        raise DeltaError(f"metric {metric!r} not present in delta")

    def __iter__(self):
        return iter(self.entries)


DEFAULT_NEUTRAL_BAND_PCT = 0.5
DEFAULT_DURATION_RELATIVE_BAND = 0.01


def diff_reports(
    prev: ProfileReport,
    new: ProfileReport,
    neutral_band: float = DEFAULT_NEUTRAL_BAND_PCT,
    duration_relative_band: float = DEFAULT_DURATION_RELATIVE_BAND,
) -> ProfileDelta:
    """Label each metric's change between two reports.

    Percentage metrics use an absolute band in percentage points; duration
    and other scale metrics use a band relative to the previous value
    (timing noise grows with magnitude, throughput noise does not).
    """
    before_metrics = prev.raw_metrics
    after_metrics = new.raw_metrics
    only_before = sorted(set(before_metrics) - set(after_metrics))
    only_after = sorted(set(after_metrics) - set(before_metrics))
    if only_before or only_after:
        missing = (only_before + only_after)[0]
        raise DeltaError(f"metric {missing!r} present in only one report")
    entries = []
    for metric in sorted(before_metrics):
        before = before_metrics[metric]
        after = after_metrics[metric]
        if metric.endswith("_pct"):
            band = neutral_band
        else:
            band = duration_relative_band * abs(before)
        change = after - before
        if abs(change) < band or change == 0.0:
            direction = Direction.NEUTRAL
        elif change > 0:
            direction = Direction.UP
        else:
            direction = Direction.DOWN
        entries.append(MetricDelta(metric, before, after, direction))
    return ProfileDelta(entries=tuple(entries))


# --- synthetic perf models ---------------------------------------------------
#
# Desk-scale stand-in for a real GPU: a documented closed-form model maps a
# tuning-parameter vector to a deterministic ProfileReport, so the whole
# optimization loop is testable without hardware.


@dataclass(frozen=True)
class SimPerfModel:
    """Closed-form performance model over a discrete parameter domain."""

    model_id: str
    domain: dict[str, tuple[int, ...]]
    defaults: dict[str, int]
    evaluate: Callable[[dict[str, int]], dict[str, float]]


def _elementwise_outcome(params: dict[str, int]) -> dict[str, float]:
    """Elementwise-map kernel model.

    N elements are processed by ceil(N / BLOCK_SIZE) blocks of
    32 * num_warps threads. With R resident blocks per SM
    (R = min(32, 64 // num_warps)) the machine sustains
    p = min(min(SM * R, grid) * min(BLOCK_SIZE, threads), N) concurrent
    lanes, and

        duration_us = LAUNCH + WAVE * ceil(grid / (SM * R)) + N * T_ELEM / p

    Occupancy is R * num_warps / 64; SM throughput is p over the machine's
    total lanes; memory throughput is achieved bytes/us over DRAM peak.
    """
    n = 1_048_576
    bytes_per_element = 8.0
    t_elem_us = 0.002
    launch_us = 5.0
    wave_us = 0.5
    sm_count = 128
    max_warps_per_sm = 64
    max_blocks_per_sm = 32
    dram_bytes_per_us = 3.35e6

    block_size = params["BLOCK_SIZE"]
    num_warps = params["num_warps"]
    threads = 32 * num_warps
    grid = math.ceil(n / block_size)
    resident = min(max_blocks_per_sm, max_warps_per_sm // num_warps)
    concurrent = min(sm_count * resident, grid)
    useful = min(block_size, threads)
    parallelism = min(concurrent * useful, n)
    waves = math.ceil(grid / (sm_count * resident))
    duration = launch_us + wave_us * waves + n * t_elem_us / parallelism

    machine_lanes = sm_count * max_warps_per_sm * 32
    sm_pct = min(100.0, 100.0 * parallelism / machine_lanes)
    memory_pct = min(
        100.0, 100.0 * (n * bytes_per_element / duration) / dram_bytes_per_us
    )
    l2_pct = min(100.0, memory_pct * 1.4)
    occupancy_pct = 100.0 * resident * num_warps / max_warps_per_sm
    return {
        "duration_us": duration,
        "memory_throughput_pct": memory_pct,
        "sm_throughput_pct": sm_pct,
        "l2_throughput_pct": l2_pct,
        "achieved_occupancy_pct": occupancy_pct,
        "sim_parallelism": float(parallelism),
        "sim_waves": float(waves),
    }


SIM_MODELS: dict[str, SimPerfModel] = {
    "elementwise": SimPerfModel(
        model_id="elementwise",
        domain={
            "BLOCK_SIZE": tuple(2**k for k in range(13)),
            "num_warps": (1, 2, 4, 8, 16),
        },
        defaults={"BLOCK_SIZE": 128, "num_warps": 4},
        evaluate=_elementwise_outcome,
    ),
}


@dataclass(frozen=True)
class SimKernelSpec:
    """Tuning-parameter vector evaluated against a named perf model."""

    param_vector: dict[str, int]
    perf_model_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "param_vector", dict(self.param_vector))


def _resolve_params(spec: SimKernelSpec) -> tuple[SimPerfModel, dict[str, int]]:
    model = SIM_MODELS.get(spec.perf_model_id)
    if model is None:
        raise ConfigurationError(f"unknown perf model {spec.perf_model_id!r}")
    params = dict(model.defaults)
    for name, value in spec.param_vector.items():
        if name not in model.domain:
            raise ConfigurationError(
                f"parameter {name!r} not declared by model {model.model_id!r}"
            )
        if value not in model.domain[name]:
            raise ConfigurationError(
                f"value {value!r} outside the domain of parameter {name!r} "
                f"for model {model.model_id!r}"
            )
        params[name] = value
    return model, params


def simulate_profile(spec: SimKernelSpec) -> ProfileReport:
    """Deterministic ProfileReport from a documented closed-form model."""
    model, params = _resolve_params(spec)
    outcome = model.evaluate(params)
    duration = outcome["duration_us"]
    latency = LatencyMeasurement.from_samples([duration] * TIMED_ITERATIONS)
    return ProfileReport(
        duration_us=duration,
        memory_throughput_pct=outcome["memory_throughput_pct"],
        compute_throughput_pct=outcome["sm_throughput_pct"],
        l2_throughput_pct=outcome["l2_throughput_pct"],
        achieved_occupancy_pct=outcome["achieved_occupancy_pct"],
        latency=latency,
        raw_metrics=dict(outcome),
    )


def extract_tuning_params(source: str, model_id: str) -> dict[str, int]:
    """Pull declared tuning parameters out of kernel source text.

    Matches assignments or keyword uses like ``BLOCK_SIZE = 1024`` or
    ``num_warps=8``; the last occurrence of each parameter wins. Parameters
    not mentioned fall back to the model's defaults downstream.
    """
    model = SIM_MODELS.get(model_id)
    if model is None:
        raise ConfigurationError(f"unknown perf model {model_id!r}")
    params: dict[str, int] = {}
    for name in model.domain:
        matches = re.findall(rf"\b{re.escape(name)}\s*[:=]\s*(\d+)", source)
        if matches:
            params[name] = int(matches[-1])
    return params


# --- timing protocol and profiler handles ------------------------------------


@dataclass(frozen=True)
class PerfTestRef:
    """Reference to one performance test: the kernel plus its test file."""

    kernel: KernelVariant
    test_path: str | None = None


class PerfExecutor(Protocol):
    def run_perf(
        self,
        kernel: KernelVariant,
        test_path: str | None,
        warmups: int,
        iterations: int,
    ) -> list[float]: ...


def run_timing_protocol(executor: PerfExecutor, test: PerfTestRef) -> LatencyMeasurement:
    """Run the fixed timing protocol: 3 untimed warmups, 5 timed iterations.

    The executor is responsible for device-event timing with explicit
    synchronization per iteration; this layer enforces the sample-count
    contract and aggregates.
    """
    samples = executor.run_perf(
        test.kernel,
        test.test_path,
        warmups=WARMUP_ITERATIONS,
        iterations=TIMED_ITERATIONS,
    )
    if len(samples) != TIMED_ITERATIONS:
        raise ProtocolViolationError(
            f"executor returned {len(samples)} timed samples, "
            f"expected {TIMED_ITERATIONS}"
        )
    return LatencyMeasurement.from_samples(samples)


class Profiler(Protocol):
    """Anything that can produce a ProfileReport for a kernel variant."""

    def profile(self, kernel: KernelVariant, test: PerfTestRef | None = None) -> ProfileReport: ...


@dataclass
class SimulatedProfiler:
    """GPU-free profiler: reads tuning parameters from the kernel source and
    evaluates the named perf model."""

    model_id: str = "elementwise"

    def profile(
        self, kernel: KernelVariant, test: PerfTestRef | None = None
    ) -> ProfileReport:
        params = extract_tuning_params(kernel.source, self.model_id)
        return simulate_profile(SimKernelSpec(params, self.model_id))


@dataclass
class NcuProfiler:
    """Real profiler handle: wraps the target command under `ncu`, captures
    the CSV log, and parses it.

    ``launch_command`` is the prefix that executes one perf test given a
    kernel file and a test file (typically the runner in perf mode). Runs
    serialize through the module profiler gate.
    """

    workdir: Path
    launch_command: tuple[str, ...]
    range_label: str = DEFAULT_RANGE_LABEL
    extra_flags: tuple[str, ...] = ()
    ncu_timeout_s: float = 600.0

    def profile(
        self, kernel: KernelVariant, test: PerfTestRef | None = None
    ) -> ProfileReport:
        self.workdir.mkdir(parents=True, exist_ok=True)
        kernel_path = self.workdir / f"{kernel.case_id}_r{kernel.round}.py"
        kernel_path.write_text(kernel.source)
        log_path = self.workdir / f"{kernel.case_id}_r{kernel.round}.csv"
        export_path = self.workdir / f"{kernel.case_id}_r{kernel.round}"
        target = [*self.launch_command, str(kernel_path)]
        if test is not None and test.test_path is not None:
            target.append(str(test.test_path))
        inv = ProfilerInvocation(
            target_command=tuple(target),
            range_label=self.range_label,
            extra_flags=(*self.extra_flags, "--csv", "--log-file", str(log_path)),
        )
        cmd = build_ncu_command(inv, export_path)
        with PROFILER_GATE:
            proc = subprocess.run(
                cmd, capture_output=True, text=True, timeout=self.ncu_timeout_s
            )
        if proc.returncode != 0:
            raise ParseError(
                f"profiler exited with status {proc.returncode}: "
                f"{proc.stderr.strip()[-2000:]}"
            )
        try:
            text = log_path.read_text()
        except OSError as exc:
            raise ParseError(f"profiler produced no log at {log_path}: {exc}") from exc
        return parse_ncu_report(text)
