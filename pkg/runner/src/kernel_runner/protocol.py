"""Wire types for the runner's job protocol.

One UTF-8 JSON object per line in each direction; the schema shipped at
``schema/runner_protocol.schema.json`` is the normative description.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

MODES = ("build", "correctness", "perf")
STATUSES = ("ok", "compile_fail", "runtime_fail", "correctness_fail")

STANDARD_WARMUPS = 3
STANDARD_ITERATIONS = 5


class ProtocolError(ValueError):
    """A job payload violates the wire contract."""


@dataclass(frozen=True)
class RunnerJob:
    job_id: str
    mode: str
    kernel_path: str
    test_path: str | None = None
    range_label: str = "BIG_OP"
    warmups: int = STANDARD_WARMUPS
    iterations: int = STANDARD_ITERATIONS

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "RunnerJob":
        job_id = payload.get("job_id")
        if not isinstance(job_id, str) or not job_id:
            raise ProtocolError("job_id must be a non-empty string")
        mode = payload.get("mode")
        if mode not in MODES:
            raise ProtocolError(f"mode must be one of {MODES}, got {mode!r}")
        kernel_path = payload.get("kernel_path")
        if not isinstance(kernel_path, str) or not kernel_path:
            raise ProtocolError("kernel_path must be a non-empty string")
        test_path = payload.get("test_path")
        if test_path is not None and not isinstance(test_path, str):
            raise ProtocolError("test_path must be a string when present")
        range_label = payload.get("range_label", "BIG_OP")
        if (
            not isinstance(range_label, str)
            or not range_label
            or any(ch.isspace() for ch in range_label)
        ):
            raise ProtocolError("range_label must be non-empty without whitespace")
        warmups = payload.get("warmups", STANDARD_WARMUPS)
        iterations = payload.get("iterations", STANDARD_ITERATIONS)
        if not isinstance(warmups, int) or warmups < 0:
            raise ProtocolError("warmups must be a non-negative integer")
        if not isinstance(iterations, int) or iterations < 1:
            raise ProtocolError("iterations must be a positive integer")
        if mode == "correctness" and test_path is None:
            raise ProtocolError("correctness jobs require a test_path")
        return cls(
            job_id=job_id,
            mode=mode,
            kernel_path=kernel_path,
            test_path=test_path,
            range_label=range_label,
            warmups=warmups,
            iterations=iterations,
        )

    def uses_standard_timing(self) -> bool:
        return (
            self.warmups == STANDARD_WARMUPS
            and self.iterations == STANDARD_ITERATIONS
        )


@dataclass(frozen=True)
class RunnerReply:
    job_id: str
    status: str
    logs: str = ""
    latencies_ms: tuple[float, ...] | None = None
    outputs_digest: str | None = None

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ProtocolError(f"status must be one of {STATUSES}")
        if self.latencies_ms is not None:
            object.__setattr__(self, "latencies_ms", tuple(self.latencies_ms))

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "job_id": self.job_id,
            "status": self.status,
            "logs": self.logs,
        }
        if self.latencies_ms is not None:
            payload["latencies_ms"] = list(self.latencies_ms)
        if self.outputs_digest is not None:
            payload["outputs_digest"] = self.outputs_digest
        return payload
