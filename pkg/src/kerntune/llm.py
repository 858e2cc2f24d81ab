"""Prompt assembly, completion backends, hint rules, and code extraction.

Rendering is pure: identical inputs produce byte-identical prompts, which
(together with the scripted backend) makes the whole optimization loop
replayable. Templates live as data files next to this module; they are
loaded once and cached.
"""

from __future__ import annotations

import enum
import json
import os
import re
import string
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .core import (
    CANONICAL_METRIC_NAMES,
    HardwareProfile,
    KernelVariant,
    ProfileReport,
    digest_text,
)
from .errors import (
    ExtractionError,
    FixtureError,
    PreconditionError,
    TransientBackendError,
)
from .profiling import (
    Direction,
    ProfileDelta,
    diff_reports,
    validate_range_label,
)

TEMPLATE_DIR = Path(__file__).parent / "templates"
DEFAULT_LOG_TAIL_CHARS = 8000


class PromptRole(str, enum.Enum):
    TEST_GENERATOR = "test_generator"
    PROPOSAL = "proposal"
    REMEDIATION = "remediation"
    REFINE_HINT = "refine_hint"


REQUIRED_SECTIONS: dict[PromptRole, tuple[str, ...]] = {
    PromptRole.PROPOSAL: ("## Hardware", "## Kernel Source", "## Profiler Report"),
    PromptRole.REMEDIATION: ("## Kernel Source", "## Diagnostic Logs"),
    PromptRole.TEST_GENERATOR: ("## Kernel Source", "## Existing Tests"),
    PromptRole.REFINE_HINT: ("## Refinement Hint",),
}

_TEMPLATE_FILES: dict[PromptRole, str] = {
    PromptRole.PROPOSAL: "proposal.txt",
    PromptRole.REMEDIATION: "remediation.txt",
    PromptRole.TEST_GENERATOR: "test_generator.txt",
    PromptRole.REFINE_HINT: "refine_hint.txt",
}


@lru_cache(maxsize=None)
def _template(role: PromptRole) -> string.Template:
    path = TEMPLATE_DIR / _TEMPLATE_FILES[role]
    return string.Template(path.read_text())


@dataclass(frozen=True)
class Prompt:
    """A fully rendered prompt for one agent role."""

    role: PromptRole
    rendered_text: str
    context_digest: str

    def __post_init__(self) -> None:
        if not self.rendered_text:
            raise ValueError("rendered_text must be non-empty")
        for header in REQUIRED_SECTIONS[self.role]:
            if header not in self.rendered_text:
                raise ValueError(
                    f"prompt for role {self.role.value!r} is missing the "
                    f"required section header {header!r}"
                )


@dataclass(frozen=True)
class LlmResponse:
    text: str
    backend_id: str
    latency_s: float = 0.0

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("response text must be non-empty")
        if self.latency_s < 0:
            raise ValueError("latency_s must be >= 0")


def _fmt(value: float) -> str:
    return f"{value:g}"


def truncate_log(logs: str, limit: int = DEFAULT_LOG_TAIL_CHARS) -> str:
    """Keep the tail of oversized logs; the failure usually sits at the end."""
    if len(logs) <= limit:
        return logs
    dropped = len(logs) - limit
    return f"[... {dropped} characters truncated ...]\n" + logs[-limit:]


def render_proposal_prompt(
    hw: HardwareProfile,
    kernel: KernelVariant,
    report: ProfileReport,
    hint: str = "",
) -> Prompt:
    """Prompt the optimizer with hardware, source, metrics, and an optional
    refinement hint carried over from the previous round."""
    if not kernel.source.strip():
        raise PreconditionError("kernel source must be non-empty")
    hint_section = ""
    if hint:
        hint_section = "\n" + _template(PromptRole.REFINE_HINT).substitute(
            hint_text=hint
        )
    text = _template(PromptRole.PROPOSAL).substitute(
        gpu_name=hw.gpu_name,
        sm_count=hw.sm_count,
        clock_mhz=_fmt(hw.clock_mhz),
        memory_gib=_fmt(hw.memory_gib),
        l2_cache_kib=hw.l2_cache_kib,
        shared_mem_per_sm_kib=hw.shared_mem_per_sm_kib,
        dram_bandwidth_gbps=_fmt(hw.dram_bandwidth_gbps),
        case_id=kernel.case_id,
        round=kernel.round,
        kernel_source=kernel.source,
        duration_us=_fmt(report.duration_us),
        memory_throughput_pct=_fmt(report.memory_throughput_pct),
        sm_throughput_pct=_fmt(report.compute_throughput_pct),
        l2_throughput_pct=_fmt(report.l2_throughput_pct),
        achieved_occupancy_pct=_fmt(report.achieved_occupancy_pct),
        hint_section=hint_section,
    )
    digest = digest_text(
        json.dumps(
            [hw.to_dict(), kernel.to_dict(), report.to_dict(), hint],
            sort_keys=True,
        )
    )
    return Prompt(role=PromptRole.PROPOSAL, rendered_text=text, context_digest=digest)


def render_remediation_prompt(
    kernel: KernelVariant, logs: str, log_tail_chars: int = DEFAULT_LOG_TAIL_CHARS
) -> Prompt:
    """Prompt the repair agent with the failing source and its diagnostics."""
    if not logs:
        raise PreconditionError("diagnostic logs must be non-empty")
    text = _template(PromptRole.REMEDIATION).substitute(
        case_id=kernel.case_id,
        round=kernel.round,
        kernel_source=kernel.source,
        logs=truncate_log(logs, log_tail_chars),
    )
    digest = digest_text(json.dumps([kernel.to_dict(), logs], sort_keys=True))
    return Prompt(
        role=PromptRole.REMEDIATION, rendered_text=text, context_digest=digest
    )


NO_EXISTING_TESTS_MARKER = "(no existing tests for this kernel)"


def render_testgen_prompt(
    kernel: KernelVariant, existing_tests: str, range_label: str
) -> Prompt:
    """Prompt the test generator; generated tests must wrap the measured
    region in the given range label."""
    validate_range_label(range_label)
    text = _template(PromptRole.TEST_GENERATOR).substitute(
        case_id=kernel.case_id,
        kernel_source=kernel.source,
        existing_tests=existing_tests.strip() or NO_EXISTING_TESTS_MARKER,
        range_label=range_label,
    )
    digest = digest_text(
        json.dumps([kernel.to_dict(), existing_tests, range_label], sort_keys=True)
    )
    return Prompt(
        role=PromptRole.TEST_GENERATOR, rendered_text=text, context_digest=digest
    )


# --- hint rules ---------------------------------------------------------------

_NUMERIC_COMPARATORS = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "==": lambda a, b: a == b,
}
_DIRECTION_COMPARATORS = {"up", "down", "neutral"}


@dataclass(frozen=True)
class MetricCondition:
    """One atomic predicate over a canonical metric.

    Numeric comparators test the new report's absolute value against the
    threshold; direction comparators test the metric's delta label.
    """

    metric: str
    comparator: str
    threshold: float | None = None

    def __post_init__(self) -> None:
        if self.metric not in CANONICAL_METRIC_NAMES:
            raise ValueError(
                f"hint conditions must reference canonical metric names, "
                f"got {self.metric!r}"
            )
        if self.comparator in _NUMERIC_COMPARATORS:
            if self.threshold is None:
                raise ValueError(
                    f"comparator {self.comparator!r} requires a threshold"
                )
        elif self.comparator in _DIRECTION_COMPARATORS:
            if self.threshold is not None:
                raise ValueError(
                    f"direction comparator {self.comparator!r} takes no threshold"
                )
        else:
            raise ValueError(f"unknown comparator {self.comparator!r}")

    def holds(self, delta: ProfileDelta, new: ProfileReport) -> bool:
        if self.comparator in _DIRECTION_COMPARATORS:
            return delta.direction_of(self.metric) is Direction(self.comparator)
        value = new.raw_metrics[self.metric]
        return _NUMERIC_COMPARATORS[self.comparator](value, self.threshold)


@dataclass(frozen=True)
class HintRule:
    """Fires when all of its conditions hold; contributes its hint text."""

    conditions: tuple[MetricCondition, ...]
    hint_text: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "conditions", tuple(self.conditions))
        if not self.conditions:
            raise ValueError("a hint rule needs at least one condition")

    def fires(self, delta: ProfileDelta, new: ProfileReport) -> bool:
        return all(cond.holds(delta, new) for cond in self.conditions)


GENERIC_HINT = (
    "No dominant bottleneck shift detected; vary tiling and launch "
    "configuration to explore nearby schedules."
)

DEFAULT_HINT_RULES: tuple[HintRule, ...] = (
    HintRule(
        conditions=(
            MetricCondition("memory_throughput_pct", "<", 60.0),
            MetricCondition("sm_throughput_pct", "<", 10.0),
        ),
        hint_text=(
            "Execution is memory-bound with idle compute: avoid materializing "
            "broadcast intermediates, make loads contiguous along the "
            "fastest-moving axis, and tile or stage data through shared memory."
        ),
    ),
    HintRule(
        conditions=(MetricCondition("achieved_occupancy_pct", "<", 20.0),),
        hint_text=(
            "Occupancy is low: reduce register and shared-memory pressure per "
            "CTA so more blocks can stay resident on each SM."
        ),
    ),
    HintRule(
        conditions=(
            MetricCondition("sm_throughput_pct", "<", 50.0),
            MetricCondition("achieved_occupancy_pct", ">=", 20.0),
        ),
        hint_text=(
            "The grid underfills the machine: retune grid and block sizing so "
            "the final wave of blocks is full; partial waves waste runtime."
        ),
    ),
)


def derive_refine_hint(
    prev: ProfileReport,
    new: ProfileReport,
    rules: Sequence[HintRule] = DEFAULT_HINT_RULES,
) -> str:
    """Turn profiler deltas into actionable feedback text.

    All firing rules contribute, in rule order; an empty fire-set yields a
    generic hint so the next proposal prompt is never silent about the
    previous round.
    """
    delta = diff_reports(prev, new)
    fired = [rule.hint_text for rule in rules if rule.fires(delta, new)]
    if not fired:
        return GENERIC_HINT
    return "\n".join(fired)


# --- completion backends -------------------------------------------------------


class CompletionBackend(Protocol):
    backend_id: str

    def complete(self, prompt: Prompt) -> LlmResponse: ...


def complete(backend: CompletionBackend, prompt: Prompt) -> LlmResponse:
    """Obtain a completion from the configured backend."""
    return backend.complete(prompt)


class ScriptedBackend:
    """Deterministic replay backend: responses are popped from a transcript
    keyed by (role, sequence). Sequential per transcript by design."""

    backend_id = "scripted"

    def __init__(self, records: Iterable[dict[str, str]]):
        self._queues: dict[str, list[str]] = {}
        for record in records:
            role = record["role"]
            self._queues.setdefault(role, []).append(record["response_text"])
        self._cursors: dict[str, int] = {role: 0 for role in self._queues}
        self.call_count = 0

    @classmethod
    def from_file(cls, path: Path | str) -> "ScriptedBackend":
        data = json.loads(Path(path).read_text())
        return cls(data["records"] if isinstance(data, dict) else data)

    def complete(self, prompt: Prompt) -> LlmResponse:
        role = prompt.role.value
        queue = self._queues.get(role, [])
        cursor = self._cursors.get(role, 0)
        if cursor >= len(queue):
            raise FixtureError(
                f"transcript exhausted for role {role!r} "
                f"(served {cursor} responses)"
            )
        self._cursors[role] = cursor + 1
        self.call_count += 1
        return LlmResponse(text=queue[cursor], backend_id=self.backend_id)


@dataclass
class HttpBackendConfig:
    """Chat-completion endpoint settings; the API key comes from the named
    environment variable, never from code."""

    base_url: str
    model: str
    api_key_env: str = "KERNTUNE_API_KEY"
    timeout_s: float = 120.0
    max_retries: int = 2
    max_concurrency: int = 4


class HttpBackend:
    """HTTP chat-completion backend with bounded retries on transient
    failures and a concurrency cap on in-flight requests."""

    def __init__(self, config: HttpBackendConfig, transport=None):
        import threading

        import httpx

        self.config = config
        self.backend_id = f"http:{config.model}"
        self.call_count = 0
        self._semaphore = threading.BoundedSemaphore(config.max_concurrency)
        self._client = httpx.Client(
            base_url=config.base_url,
            timeout=config.timeout_s,
            transport=transport,
        )

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.config.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, prompt: Prompt) -> LlmResponse:
        import httpx

        body = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt.rendered_text}],
        }
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(min(0.5 * 2 ** (attempt - 1), 8.0))
            started = time.monotonic()
            try:
                with self._semaphore:
                    response = self._client.post(
                        "/chat/completions", json=body, headers=self._headers()
                    )
            except httpx.TimeoutException as exc:
                last_error = TransientBackendError(f"request timed out: {exc}")
                continue
            except httpx.TransportError as exc:
                last_error = TransientBackendError(f"transport failure: {exc}")
                continue
            if response.status_code == 429 or response.status_code >= 500:
                last_error = TransientBackendError(
                    f"backend returned HTTP {response.status_code}"
                )
                continue
            response.raise_for_status()
            data = response.json()
            text = data["choices"][0]["message"]["content"]
            self.call_count += 1
            return LlmResponse(
                text=text,
                backend_id=self.backend_id,
                latency_s=time.monotonic() - started,
            )
        raise last_error if last_error else TransientBackendError("no attempts made")


# --- response post-processing ---------------------------------------------------

_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)

# Heuristic markers that make unfenced text plausible kernel code.
KERNEL_CODE_MARKERS = ("def ", "@triton", "tl.", "__global__")


def extract_code_block(response: LlmResponse) -> str:
    """Pull the actionable code out of a free-text answer.

    Models usually explain first and finish with the final code, so the last
    fenced block wins. Unfenced text is accepted only when it plausibly is
    code already.
    """
    blocks = _FENCE_RE.findall(response.text)
    if blocks:
        return blocks[-1].rstrip("\n")
    text = response.text
    if any(marker in text for marker in KERNEL_CODE_MARKERS):
        return text.strip("\n")
    raise ExtractionError("response contains no extractable code block")
