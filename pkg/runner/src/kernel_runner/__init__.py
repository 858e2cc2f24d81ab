"""Kernel execution service: build, correctness, and timing jobs over a
line-delimited JSON stdio protocol."""

from .execution import ExecutionConfig, execute_job
from .protocol import ProtocolError, RunnerJob, RunnerReply
from .server import handle_line, serve

__version__ = "0.1.0"

__all__ = [
    "ExecutionConfig",
    "ProtocolError",
    "RunnerJob",
    "RunnerReply",
    "execute_job",
    "handle_line",
    "serve",
    "__version__",
]
