"""Exception hierarchy shared across kerntune modules.

Every operation-level failure raises one of these so callers can
distinguish kernel problems (build/run failures, handled inside the
optimization loop) from infrastructure and contract problems (which
abort a case).
"""

from __future__ import annotations


class KernTuneError(Exception):
    """Base class for all kerntune errors."""


class DomainError(KernTuneError):
    """An argument is outside the mathematical domain of an operation."""


class PersistenceError(KernTuneError):
    """Trace or report I/O failed; message carries the offending path."""


class ParseError(KernTuneError):
    """Profiler report text could not be parsed into the expected metrics."""


class DeltaError(KernTuneError):
    """Report comparison failed, e.g. a metric exists in only one report."""


class ConfigurationError(KernTuneError):
    """Invalid or unknown configuration (perf model, loop setup, backend)."""


class InvalidInvocationError(KernTuneError):
    """A profiler invocation violates its construction rules."""


class ProtocolViolationError(KernTuneError):
    """An executor or runner broke the timing/reply protocol."""


class ExecutorError(KernTuneError):
    """Infrastructure failure talking to a kernel executor (not a kernel
    failure); aborts the case rather than the round."""

    def __init__(self, message: str, logs: str = ""):
        super().__init__(message)
        self.logs = logs


class PreconditionError(KernTuneError):
    """An operation was called with inputs violating its stated precondition."""


class ExtractionError(KernTuneError):
    """No usable code block could be extracted from an LLM response."""


class TransientBackendError(KernTuneError):
    """Retryable LLM backend failure (timeout, rate limit, 5xx)."""


class FixtureError(KernTuneError):
    """A scripted transcript was exhausted or malformed."""


class EmptyCorpusError(KernTuneError):
    """Corpus ingestion found zero conforming cases."""


class DegenerateDistributionError(KernTuneError):
    """LOC distribution cannot be stratified (e.g. all values equal)."""


class SamplingError(KernTuneError):
    """Subset sampling preconditions violated; names the offending bin."""


class StatisticsError(KernTuneError):
    """Statistical operation on invalid input (length mismatch, constants)."""
