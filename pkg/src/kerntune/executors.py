"""Kernel executors: an in-process simulator and a child-process runner client.

The simulator lets the entire orchestration stack run without a GPU or a
runner build: "compilation" is a syntax and parameter-domain check,
correctness is driven by explicit fault markers, and timing comes from the
synthetic perf models. The runner client speaks the line-delimited JSON job
protocol over a child process's standard streams.
"""

from __future__ import annotations

import json
import subprocess
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .core import KernelVariant, digest_text
from .errors import ExecutorError
from .loop import BuildRunResult, BuildStatus
from .profiling import (
    SIM_MODELS,
    SimKernelSpec,
    extract_tuning_params,
    simulate_profile,
)

# Source markers that make the simulator fail a stage deliberately; tests
# use them to exercise the remediation paths without real kernels.
DEFAULT_FAULT_MARKERS: dict[str, BuildStatus] = {
    "SIM_RUNTIME_FAIL": BuildStatus.RUNTIME_FAIL,
    "SIM_CORRECTNESS_FAIL": BuildStatus.CORRECTNESS_FAIL,
}


@dataclass
class SimulatedExecutor:
    """GPU-free executor backed by a synthetic perf model."""

    model_id: str = "elementwise"
    fault_markers: Mapping[str, BuildStatus] = field(
        default_factory=lambda: dict(DEFAULT_FAULT_MARKERS)
    )

    def build(self, kernel: KernelVariant) -> BuildRunResult:
        try:
            compile(kernel.source, f"<{kernel.case_id}>", "exec")
        except (SyntaxError, ValueError):
            return BuildRunResult(
                status=BuildStatus.COMPILE_FAIL,
                logs=traceback.format_exc(limit=0),
            )
        model = SIM_MODELS[self.model_id]
        params = extract_tuning_params(kernel.source, self.model_id)
        for name, value in params.items():
            if value not in model.domain[name]:
                return BuildRunResult(
                    status=BuildStatus.COMPILE_FAIL,
                    logs=(
                        f"invalid meta-parameter: {name}={value} is outside "
                        f"the supported domain {model.domain[name]}"
                    ),
                )
        return BuildRunResult(
            status=BuildStatus.OK,
            logs="",
            outputs_digest=digest_text(kernel.source),
        )

    def run_correctness(
        self, kernel: KernelVariant, tests: Sequence[str]
    ) -> BuildRunResult:
        for marker, status in self.fault_markers.items():
            if marker in kernel.source:
                if status is BuildStatus.CORRECTNESS_FAIL:
                    logs = (
                        f"output mismatch (marker {marker}): first divergence "
                        "at flat index 0: got 0.0, want 1.0"
                    )
                else:
                    logs = f"runtime failure triggered by marker {marker}"
                return BuildRunResult(status=status, logs=logs)
        return BuildRunResult(
            status=BuildStatus.OK,
            logs="",
            outputs_digest=digest_text("outputs:" + kernel.source),
        )

    def run_perf(
        self,
        kernel: KernelVariant,
        test_path: str | None,
        warmups: int,
        iterations: int,
    ) -> list[float]:
        params = extract_tuning_params(kernel.source, self.model_id)
        report = simulate_profile(SimKernelSpec(params, self.model_id))
        return [report.duration_us] * iterations


@dataclass
class RunnerProcessExecutor:
    """Client side of the runner wire protocol.

    Spawns the runner command as a child process on first use and exchanges
    UTF-8 line-delimited JSON jobs/replies over its standard streams, one
    job in flight at a time. Transport problems raise ExecutorError (an
    infrastructure failure, distinct from a kernel failure).
    """

    command: Sequence[str]
    workdir: Path
    range_label: str = "BIG_OP"

    def __post_init__(self) -> None:
        self.workdir = Path(self.workdir)
        self._proc: subprocess.Popen | None = None
        self._job_counter = 0

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    list(self.command),
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                )
            except OSError as exc:
                raise ExecutorError(f"failed to spawn runner: {exc}") from exc
        return self._proc

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            assert self._proc.stdin is not None
            self._proc.stdin.close()
            self._proc.wait(timeout=30)
        self._proc = None

    def __enter__(self) -> "RunnerProcessExecutor":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _submit(self, job: dict) -> dict:
        proc = self._ensure_process()
        assert proc.stdin is not None and proc.stdout is not None
        try:
            proc.stdin.write(json.dumps(job) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        except (OSError, ValueError) as exc:
            raise ExecutorError(f"runner transport failure: {exc}") from exc
        if not line:
            raise ExecutorError("runner closed its reply stream mid-job")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ExecutorError(
                f"runner emitted a non-JSON reply: {line[:200]!r}"
            ) from exc
        if reply.get("job_id") != job["job_id"]:
            raise ExecutorError(
                f"reply job_id {reply.get('job_id')!r} does not match "
                f"request {job['job_id']!r}"
            )
        return reply

    def _next_job_id(self) -> str:
        self._job_counter += 1
        return f"job-{self._job_counter}"

    def _write_kernel(self, kernel: KernelVariant) -> Path:
        self.workdir.mkdir(parents=True, exist_ok=True)
        path = self.workdir / f"{kernel.case_id}_r{kernel.round}.py"
        path.write_text(kernel.source)
        return path

    def _reply_to_result(self, reply: dict) -> BuildRunResult:
        status = BuildStatus(reply["status"])
        if status is BuildStatus.OK:
            return BuildRunResult(
                status=status,
                logs=reply.get("logs", ""),
                outputs_digest=reply.get("outputs_digest")
                or digest_text(reply.get("logs", "")),
            )
        return BuildRunResult(
            status=status, logs=reply.get("logs") or "(no logs in reply)"
        )

    def build(self, kernel: KernelVariant) -> BuildRunResult:
        kernel_path = self._write_kernel(kernel)
        reply = self._submit(
            {
                "job_id": self._next_job_id(),
                "mode": "build",
                "kernel_path": str(kernel_path),
            }
        )
        return self._reply_to_result(reply)

    def run_correctness(
        self, kernel: KernelVariant, tests: Sequence[str]
    ) -> BuildRunResult:
        kernel_path = self._write_kernel(kernel)
        digests = []
        last_logs = ""
        for test_path in tests:
            reply = self._submit(
                {
                    "job_id": self._next_job_id(),
                    "mode": "correctness",
                    "kernel_path": str(kernel_path),
                    "test_path": str(test_path),
                }
            )
            result = self._reply_to_result(reply)
            if not result.ok:
                return result
            digests.append(result.outputs_digest or "")
            last_logs = result.logs
        return BuildRunResult(
            status=BuildStatus.OK,
            logs=last_logs,
            outputs_digest=digest_text("|".join(digests)),
        )

    def run_perf(
        self,
        kernel: KernelVariant,
        test_path: str | None,
        warmups: int,
        iterations: int,
    ) -> list[float]:
        kernel_path = self._write_kernel(kernel)
        job = {
            "job_id": self._next_job_id(),
            "mode": "perf",
            "kernel_path": str(kernel_path),
            "range_label": self.range_label,
            "warmups": warmups,
            "iterations": iterations,
        }
        if test_path is not None:
            job["test_path"] = str(test_path)
        reply = self._submit(job)
        if reply["status"] != "ok":
            raise ExecutorError(
                f"perf job failed ({reply['status']})",
                logs=reply.get("logs", ""),
            )
        latencies_ms = reply.get("latencies_ms") or []
        return [ms * 1000.0 for ms in latencies_ms]
