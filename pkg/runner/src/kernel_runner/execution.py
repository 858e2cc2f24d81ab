"""Job execution: build a kernel file, verify outputs against a reference,
and time the measured region.

Correctness tests are Python modules exposing ``run(kernel)`` (produce
outputs from the kernel module) and ``reference()`` (produce the expected
outputs); comparison is elementwise closeness with configurable absolute
and relative tolerances. Perf tests expose ``run(kernel)`` for one measured
iteration; the runner controls the warmup/timing loop and wraps the
measured region in the named NVTX range.

CPU-stub mode keeps the full job lifecycle (imports, warmups, iterations)
but reports deterministic synthetic latencies, so protocol tests run
anywhere; device mode requires torch with CUDA available.
"""

from __future__ import annotations

import hashlib
import importlib.util
import sys
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .protocol import RunnerJob, RunnerReply


@dataclass
class ExecutionConfig:
    cpu_stub: bool = False
    device: int = 0
    tolerance_abs: float = 1e-3
    tolerance_rel: float = 1e-3
    allow_custom_timing: bool = False


class _KernelLoadError(Exception):
    pass


def _load_module(path: str, name: str):
    spec = importlib.util.spec_from_file_location(name, path)
    if spec is None or spec.loader is None:
        raise _KernelLoadError(f"cannot load module from {path}")
    module = importlib.util.module_from_spec(spec)
    sys.modules[name] = module
    try:
        spec.loader.exec_module(module)
    finally:
        sys.modules.pop(name, None)
    return module


def _source_digest(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def execute_build(job: RunnerJob, config: ExecutionConfig) -> RunnerReply:
    """Compile and import the kernel file; any failure is a build failure."""
    try:
        source = Path(job.kernel_path).read_text()
    except OSError as exc:
        return RunnerReply(job.job_id, "compile_fail", logs=f"unreadable kernel: {exc}")
    try:
        compile(source, job.kernel_path, "exec")
        _load_module(job.kernel_path, f"_kernel_{job.job_id}")
    except Exception:
        return RunnerReply(job.job_id, "compile_fail", logs=traceback.format_exc())
    return RunnerReply(
        job.job_id, "ok", outputs_digest=_source_digest(job.kernel_path)
    )


def _as_named_arrays(outputs: Any) -> dict[str, np.ndarray]:
    if isinstance(outputs, Mapping):
        return {str(k): np.asarray(v) for k, v in sorted(outputs.items())}
    return {"output": np.asarray(outputs)}


def _first_divergence(
    got: dict[str, np.ndarray],
    want: dict[str, np.ndarray],
    atol: float,
    rtol: float,
) -> str | None:
    if set(got) != set(want):
        return (
            f"output keys differ: got {sorted(got)}, want {sorted(want)}"
        )
    for name in sorted(want):
        got_arr = np.asarray(got[name], dtype=np.float64)
        want_arr = np.asarray(want[name], dtype=np.float64)
        if got_arr.shape != want_arr.shape:
            return (
                f"{name}: shape mismatch, got {got_arr.shape}, "
                f"want {want_arr.shape}"
            )
        close = np.isclose(got_arr, want_arr, atol=atol, rtol=rtol, equal_nan=True)
        if not close.all():
            index = tuple(int(i) for i in np.argwhere(~close)[0])
            flat = index if len(index) != 1 else index[0]
            return (
                f"{name}: first divergence at index {flat}: "
                f"got {got_arr[index]!r}, want {want_arr[index]!r} "
                f"(atol={atol}, rtol={rtol})"
            )
    return None


def _outputs_digest(outputs: dict[str, np.ndarray]) -> str:
    hasher = hashlib.sha256()
    for name in sorted(outputs):
        hasher.update(name.encode())
        hasher.update(
            np.ascontiguousarray(outputs[name].astype(np.float64)).tobytes()
        )
    return hasher.hexdigest()[:16]


def execute_correctness(job: RunnerJob, config: ExecutionConfig) -> RunnerReply:
    try:
        kernel = _load_module(job.kernel_path, f"_kernel_{job.job_id}")
    except Exception:
        return RunnerReply(job.job_id, "compile_fail", logs=traceback.format_exc())
    try:
        test = _load_module(job.test_path, f"_test_{job.job_id}")
        got = _as_named_arrays(test.run(kernel))
        want = _as_named_arrays(test.reference())
    except Exception:
        return RunnerReply(job.job_id, "runtime_fail", logs=traceback.format_exc())
    divergence = _first_divergence(
        got, want, config.tolerance_abs, config.tolerance_rel
    )
    if divergence is not None:
        return RunnerReply(job.job_id, "correctness_fail", logs=divergence)
    return RunnerReply(job.job_id, "ok", outputs_digest=_outputs_digest(got))


def _stub_latencies(job: RunnerJob) -> list[float]:
    """Deterministic synthetic latencies: a stable function of the kernel
    bytes, so identical jobs always report identical timings."""
    digest = hashlib.sha256(Path(job.kernel_path).read_bytes()).digest()
    base_ms = 1.0 + digest[0] / 512.0
    return [
        round(base_ms * (1.0 + ((digest[1 + i % 16] % 21) - 10) / 1000.0), 6)
        for i in range(job.iterations)
    ]


class _TestLoadError(Exception):
    pass


def _resolve_region(job: RunnerJob) -> Callable[[], Any]:
    kernel = _load_module(job.kernel_path, f"_kernel_{job.job_id}")
    if job.test_path is not None:
        try:
            test = _load_module(job.test_path, f"_test_{job.job_id}")
        except Exception as exc:
            raise _TestLoadError(str(exc)) from exc
        return lambda: test.run(kernel)
    if hasattr(kernel, "run"):
        return kernel.run
    return lambda: None


def execute_perf(job: RunnerJob, config: ExecutionConfig) -> RunnerReply:
    """Timing protocol: ``warmups`` untimed iterations, then ``iterations``
    timed ones, each wrapped in the job's NVTX range."""
    if not job.uses_standard_timing() and not config.allow_custom_timing:
        return RunnerReply(
            job.job_id,
            "runtime_fail",
            logs=(
                f"perf jobs use the fixed protocol ({job.warmups} warmups / "
                f"{job.iterations} iterations requested); restart the runner "
                "with --allow-custom-timing to override"
            ),
        )
    try:
        region = _resolve_region(job)
    except _TestLoadError:
        # a broken test harness is not a kernel build failure
        return RunnerReply(job.job_id, "runtime_fail", logs=traceback.format_exc())
    except Exception:
        return RunnerReply(job.job_id, "compile_fail", logs=traceback.format_exc())

    if config.cpu_stub:
        log_lines = []
        try:
            for _ in range(job.warmups):
                region()
            for _ in range(job.iterations):
                log_lines.append(f"range {job.range_label}: begin")
                started = time.perf_counter()
                region()
                elapsed_ms = (time.perf_counter() - started) * 1e3
                log_lines.append(
                    f"range {job.range_label}: end ({elapsed_ms:.3f} ms wall)"
                )
        except Exception:
            return RunnerReply(job.job_id, "runtime_fail", logs=traceback.format_exc())
        return RunnerReply(
            job.job_id,
            "ok",
            logs="\n".join(log_lines),
            latencies_ms=tuple(_stub_latencies(job)),
            outputs_digest=_source_digest(job.kernel_path),
        )

    try:
        import torch
    except ImportError:
        return RunnerReply(
            job.job_id, "runtime_fail",
            logs="torch is required for device mode (or pass --cpu-stub)",
        )
    if not torch.cuda.is_available():
        return RunnerReply(
            job.job_id, "runtime_fail",
            logs="no CUDA device available (pass --cpu-stub for protocol tests)",
        )
    try:
        torch.cuda.set_device(config.device)
        for _ in range(job.warmups):
            region()
        torch.cuda.synchronize()
        latencies_ms = []
        for _ in range(job.iterations):
            start_event = torch.cuda.Event(enable_timing=True)
            end_event = torch.cuda.Event(enable_timing=True)
            torch.cuda.nvtx.range_push(job.range_label)
            start_event.record()
            region()
            end_event.record()
            torch.cuda.nvtx.range_pop()
            torch.cuda.synchronize()
            latencies_ms.append(start_event.elapsed_time(end_event))
    except Exception:
        return RunnerReply(job.job_id, "runtime_fail", logs=traceback.format_exc())
    return RunnerReply(
        job.job_id,
        "ok",
        latencies_ms=tuple(latencies_ms),
        outputs_digest=_source_digest(job.kernel_path),
    )


def execute_job(job: RunnerJob, config: ExecutionConfig) -> RunnerReply:
    if job.mode == "build":
        return execute_build(job, config)
    if job.mode == "correctness":
        return execute_correctness(job, config)
    return execute_perf(job, config)
