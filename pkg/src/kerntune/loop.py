"""The optimization state machine: propose, build/run with fault-aware
remediation, profile, arbitrate, derive a refinement hint, repeat.

One loop instance per kernel case, strictly sequential internally. The loop
never exceeds its round cap, never spends more than the remediation cap of
repair calls per round, and only ever replaces the best-so-far kernel on an
accepted improvement.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Protocol, Sequence

from .core import (
    ArbiterThresholds,
    Decision,
    DecisionKind,
    HardwareProfile,
    KernelVariant,
    OptimizationTrace,
    ProfileReport,
    Provenance,
    RoundRecord,
    compute_speedup,
)
from .errors import (
    ConfigurationError,
    ExtractionError,
    FixtureError,
    PreconditionError,
    TransientBackendError,
)
from .llm import (
    DEFAULT_HINT_RULES,
    CompletionBackend,
    HintRule,
    complete,
    derive_refine_hint,
    extract_code_block,
    render_proposal_prompt,
    render_remediation_prompt,
)
from .profiling import PerfTestRef, Profiler, validate_range_label


class BuildStatus(str, enum.Enum):
    OK = "ok"
    COMPILE_FAIL = "compile_fail"
    RUNTIME_FAIL = "runtime_fail"
    CORRECTNESS_FAIL = "correctness_fail"


# Round-level statuses beyond BuildStatus: the proposal itself never yielded
# a buildable kernel, or the backend failed after retries.
PROPOSAL_FAIL = "proposal_fail"
BACKEND_FAIL = "backend_fail"


@dataclass(frozen=True)
class BuildRunResult:
    """Outcome of compiling a kernel and checking it against reference
    input/output pairs."""

    status: BuildStatus
    logs: str
    outputs_digest: str | None = None

    def __post_init__(self) -> None:
        if self.status is BuildStatus.OK and self.outputs_digest is None:
            raise ValueError("an ok result must carry an outputs digest")
        if self.status is not BuildStatus.OK and not self.logs:
            raise ValueError("a failing result must carry non-empty logs")

    @property
    def ok(self) -> bool:
        return self.status is BuildStatus.OK


class ProfilerMode(str, enum.Enum):
    REAL = "real"
    SIMULATED = "simulated"


@dataclass(frozen=True)
class LoopConfig:
    thresholds: ArbiterThresholds
    range_label: str = "BIG_OP"
    backend_id: str = "scripted"
    profiler_mode: ProfilerMode = ProfilerMode.SIMULATED

    def __post_init__(self) -> None:
        validate_range_label(self.range_label)


class KernelExecutor(Protocol):
    """Build/correctness/perf surface the loop needs from an executor.

    Implementations: the in-process simulator (GPU-free) and the child
    process runner client. Infrastructure failures raise ExecutorError and
    abort the case; kernel failures come back as BuildRunResult statuses.
    """

    def build(self, kernel: KernelVariant) -> BuildRunResult: ...

    def run_correctness(
        self, kernel: KernelVariant, tests: Sequence[str]
    ) -> BuildRunResult: ...

    def run_perf(
        self,
        kernel: KernelVariant,
        test_path: str | None,
        warmups: int,
        iterations: int,
    ) -> list[float]: ...


def build_and_run(
    kernel: KernelVariant,
    tests: Sequence[str],
    executor: KernelExecutor,
) -> BuildRunResult:
    """Compile the kernel, then verify it against reference outputs.

    Returns ok only when compile, run, and correctness all pass; a
    correctness mismatch carries its diff summary in the logs and is
    remediated like any other failure.
    """
    result = executor.build(kernel)
    if not result.ok:
        return result
    return executor.run_correctness(kernel, tests)


@dataclass(frozen=True)
class RemediationOutcome:
    kernel: KernelVariant
    result: BuildRunResult
    attempts: int


def remediate(
    kernel: KernelVariant,
    result: BuildRunResult,
    backend: CompletionBackend,
    cap: int,
    *,
    tests: Sequence[str] = (),
    executor: KernelExecutor,
) -> RemediationOutcome:
    """Repair a failing kernel with up to ``cap`` targeted LLM edits.

    Each iteration consumes one attempt, including attempts where the
    response yields no extractable code. Returns the first passing result
    or the last failing one.
    """
    if result.ok:
        raise PreconditionError("remediation requires a failing build result")
    attempts = 0
    while attempts < cap and not result.ok:
        attempts += 1
        prompt = render_remediation_prompt(kernel, result.logs)
        try:
            response = complete(backend, prompt)
        except (TransientBackendError, FixtureError) as exc:
            result = BuildRunResult(
                status=result.status,
                logs=f"{result.logs}\n[remediation backend failed: {exc}]",
            )
            break
        try:
            source = extract_code_block(response)
            repaired = KernelVariant(
                case_id=kernel.case_id,
                round=kernel.round,
                provenance=Provenance.REMEDIATION,
                source=source,
            )
        except (ExtractionError, ValueError) as exc:
            result = BuildRunResult(
                status=result.status,
                logs=f"{result.logs}\n[remediation produced no usable kernel: {exc}]",
            )
            continue
        kernel = repaired
        result = build_and_run(kernel, tests, executor)
    return RemediationOutcome(kernel=kernel, result=result, attempts=attempts)


def _latency_flagged(report: ProfileReport, thresholds: ArbiterThresholds) -> bool:
    aggregate = report.latency.aggregate_us
    if aggregate <= 0:
        return False
    return report.latency.spread_us > thresholds.spread_fraction * aggregate


def arbiter(
    new: ProfileReport,
    best: ProfileReport,
    trace_so_far: OptimizationTrace,
    thresholds: ArbiterThresholds,
) -> Decision:
    """Multi-criteria per-round decision.

    Finish criteria take precedence (the cap applies regardless of metrics);
    the caller applies the best-so-far update whenever the accept criterion
    held, even when the same round finishes.
    """
    speedup = compute_speedup(
        best.latency.aggregate_us, new.latency.aggregate_us
    )
    accepts = speedup >= thresholds.accept_margin
    accept_note = (
        f"; improvement {speedup:.4f}x accepted first" if accepts else ""
    )
    current_round = len(trace_so_far.rounds) + 1

    if current_round >= thresholds.round_cap:
        return Decision(
            DecisionKind.FINISH,
            f"round cap {thresholds.round_cap} reached{accept_note}",
        )

    window_reports = [
        r.report for r in trace_so_far.rounds if r.report is not None
    ] + [new]
    window = window_reports[-thresholds.patience_rounds :]
    if len(window) >= thresholds.patience_rounds:
        improvements = [
            compute_speedup(best.latency.aggregate_us, r.latency.aggregate_us) - 1.0
            for r in window
        ]
        best_improvement = max(improvements)
        if best_improvement < thresholds.diminish_epsilon:
            return Decision(
                DecisionKind.FINISH,
                f"diminishing returns: best relative improvement "
                f"{best_improvement:.4f} over the last "
                f"{thresholds.patience_rounds} profiled rounds is below "
                f"{thresholds.diminish_epsilon}{accept_note}",
            )
        if all(_latency_flagged(r, thresholds) for r in window):
            return Decision(
                DecisionKind.FINISH,
                f"latency samples too noisy (spread above "
                f"{thresholds.spread_fraction:.0%} of aggregate) for "
                f"{thresholds.patience_rounds} consecutive rounds{accept_note}",
            )

    if accepts:
        return Decision(
            DecisionKind.ACCEPT,
            f"speedup {speedup:.4f}x over best-so-far meets accept margin "
            f"{thresholds.accept_margin}",
        )
    return Decision(
        DecisionKind.CONTINUE,
        f"speedup {speedup:.4f}x below accept margin "
        f"{thresholds.accept_margin}; no finish criterion fired",
    )


def optimize_kernel(
    hw: HardwareProfile,
    kernel: KernelVariant,
    baseline: ProfileReport,
    cfg: LoopConfig,
    *,
    backend: CompletionBackend,
    executor: KernelExecutor,
    profiler: Profiler,
    correctness_tests: Sequence[str] = (),
    perf_test: str | None = None,
    hint_rules: Sequence[HintRule] = DEFAULT_HINT_RULES,
) -> tuple[KernelVariant, ProfileReport, OptimizationTrace]:
    """Run the bounded optimization loop for one kernel case.

    Each round proposes a variant, builds and (if needed) remediates it,
    profiles it on success, and asks the arbiter whether to accept,
    continue, or finish. Failed rounds are recorded and the loop moves on;
    the total number of rounds never exceeds the round cap. Returns the
    best variant, its report, and the full trace.
    """
    if kernel.provenance is not Provenance.ORIGINAL:
        raise ConfigurationError(
            "optimization must start from an original kernel variant"
        )
    if baseline.latency.aggregate_us <= 0:
        raise ConfigurationError("baseline profile has non-positive latency")
    thresholds = cfg.thresholds

    best_variant, best_report = kernel, baseline
    current_kernel, prev_report = kernel, baseline
    hint = ""
    rounds: list[RoundRecord] = []

    for round_idx in range(1, thresholds.round_cap + 1):
        is_last = round_idx == thresholds.round_cap
        prompt = render_proposal_prompt(hw, current_kernel, prev_report, hint)

        try:
            response = complete(backend, prompt)
        except (TransientBackendError, FixtureError) as exc:
            decision = _failed_round_decision(is_last, f"backend failure: {exc}")
            rounds.append(
                RoundRecord(
                    round=round_idx,
                    kernel=current_kernel,
                    prompt_text=prompt.rendered_text,
                    response_text="",
                    build_status=BACKEND_FAIL,
                    build_log=str(exc),
                    remediation_attempts=0,
                    report=None,
                    decision=decision,
                )
            )
            if decision.kind is DecisionKind.FINISH:
                break
            continue

        try:
            source = extract_code_block(response)
        except ExtractionError:
            source = response.text
        try:
            variant = KernelVariant(
                case_id=kernel.case_id,
                round=round_idx,
                provenance=Provenance.PROPOSAL,
                source=source,
            )
        except ValueError as exc:
            decision = _failed_round_decision(
                is_last, f"proposal yielded no buildable kernel: {exc}"
            )
            rounds.append(
                RoundRecord(
                    round=round_idx,
                    kernel=current_kernel,
                    prompt_text=prompt.rendered_text,
                    response_text=response.text,
                    build_status=PROPOSAL_FAIL,
                    build_log=str(exc),
                    remediation_attempts=0,
                    report=None,
                    decision=decision,
                )
            )
            if decision.kind is DecisionKind.FINISH:
                break
            continue

        result = build_and_run(variant, correctness_tests, executor)
        attempts = 0
        if not result.ok:
            outcome = remediate(
                variant,
                result,
                backend,
                thresholds.remediation_cap,
                tests=correctness_tests,
                executor=executor,
            )
            variant, result, attempts = outcome.kernel, outcome.result, outcome.attempts

        if not result.ok:
            decision = _failed_round_decision(
                is_last,
                f"proposal failed ({result.status.value}) after "
                f"{attempts} remediation attempts",
            )
            rounds.append(
                RoundRecord(
                    round=round_idx,
                    kernel=variant,
                    prompt_text=prompt.rendered_text,
                    response_text=response.text,
                    build_status=result.status.value,
                    build_log=result.logs,
                    remediation_attempts=attempts,
                    report=None,
                    decision=decision,
                )
            )
            if decision.kind is DecisionKind.FINISH:
                break
            continue

        report = profiler.profile(variant, PerfTestRef(variant, perf_test))
        accepts = (
            compute_speedup(
                best_report.latency.aggregate_us, report.latency.aggregate_us
            )
            >= thresholds.accept_margin
        )
        trace_so_far = OptimizationTrace(
            case_id=kernel.case_id,
            rounds=tuple(rounds),
            best_variant=best_variant,
            best_report=best_report,
        )
        decision = arbiter(report, best_report, trace_so_far, thresholds)
        if accepts:
            best_variant, best_report = variant, report
        hint = derive_refine_hint(prev_report, report, hint_rules)
        prev_report = report
        current_kernel = variant
        rounds.append(
            RoundRecord(
                round=round_idx,
                kernel=variant,
                prompt_text=prompt.rendered_text,
                response_text=response.text,
                build_status=result.status.value,
                build_log=result.logs,
                remediation_attempts=attempts,
                report=report,
                decision=decision,
            )
        )
        if decision.kind is DecisionKind.FINISH:
            break

    trace = OptimizationTrace(
        case_id=kernel.case_id,
        rounds=tuple(rounds),
        best_variant=best_variant,
        best_report=best_report,
    )
    trace.validate_final()
    return best_variant, best_report, trace


def _failed_round_decision(is_last_round: bool, reason: str) -> Decision:
    if is_last_round:
        return Decision(
            DecisionKind.FINISH, f"round cap reached after failed round: {reason}"
        )
    return Decision(DecisionKind.CONTINUE, reason)
