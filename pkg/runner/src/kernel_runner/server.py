"""Single-threaded job loop over standard streams.

One JSON job per input line, one JSON reply per output line, in request
order, never interleaved. Anything kernel or test code prints is captured
into the reply's logs; the reply stream carries nothing but JSON lines.
"""

from __future__ import annotations

import io
import json
import sys
from contextlib import redirect_stderr, redirect_stdout
from typing import IO

from .execution import ExecutionConfig, execute_job
from .protocol import ProtocolError, RunnerJob, RunnerReply


def _merge_logs(reply: RunnerReply, captured: str) -> RunnerReply:
    captured = captured.strip()
    if not captured:
        return reply
    merged = f"{captured}\n{reply.logs}" if reply.logs else captured
    return RunnerReply(
        job_id=reply.job_id,
        status=reply.status,
        logs=merged,
        latencies_ms=reply.latencies_ms,
        outputs_digest=reply.outputs_digest,
    )


def handle_line(line: str, config: ExecutionConfig) -> RunnerReply:
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        return RunnerReply(
            "unknown", "runtime_fail", logs=f"malformed job line: {exc}"
        )
    if not isinstance(payload, dict):
        return RunnerReply(
            "unknown", "runtime_fail", logs="job payload must be a JSON object"
        )
    try:
        job = RunnerJob.from_dict(payload)
    except ProtocolError as exc:
        job_id = payload.get("job_id")
        job_id = job_id if isinstance(job_id, str) and job_id else "unknown"
        return RunnerReply(job_id, "runtime_fail", logs=f"invalid job: {exc}")
    capture = io.StringIO()
    with redirect_stdout(capture), redirect_stderr(capture):
        reply = execute_job(job, config)
    return _merge_logs(reply, capture.getvalue())


def serve(
    stdin: IO[str] | None = None,
    stdout: IO[str] | None = None,
    config: ExecutionConfig | None = None,
) -> None:
    """Process jobs until end-of-input, then return cleanly."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    config = config or ExecutionConfig()
    for line in stdin:
        if not line.strip():
            continue
        reply = handle_line(line, config)
        stdout.write(json.dumps(reply.to_dict()) + "\n")
        stdout.flush()
