"""kerntune: a profiling-guided orchestration loop for GPU kernel optimization.

The public surface groups into six areas: shared domain types and trace
persistence (``core``), the timing/profiling layer with its synthetic
simulator (``profiling``), prompt assembly and completion backends
(``llm``), the bounded optimization state machine (``loop``), corpus
stratification and subset sampling (``bench``), and results aggregation
(``analysis``).
"""

from .core import (
    ArbiterThresholds,
    Decision,
    DecisionKind,
    HardwareProfile,
    KernelVariant,
    LatencyMeasurement,
    OptimizationTrace,
    ProfileReport,
    Provenance,
    RoundRecord,
    classify_success,
    compute_speedup,
    count_loc,
    load_trace,
    persist_trace,
)
from .loop import (
    BuildRunResult,
    BuildStatus,
    LoopConfig,
    ProfilerMode,
    arbiter,
    build_and_run,
    optimize_kernel,
    remediate,
)

__version__ = "0.1.0"

__all__ = [
    "ArbiterThresholds",
    "BuildRunResult",
    "BuildStatus",
    "Decision",
    "DecisionKind",
    "HardwareProfile",
    "KernelVariant",
    "LatencyMeasurement",
    "LoopConfig",
    "OptimizationTrace",
    "ProfileReport",
    "ProfilerMode",
    "Provenance",
    "RoundRecord",
    "arbiter",
    "build_and_run",
    "classify_success",
    "compute_speedup",
    "count_loc",
    "load_trace",
    "optimize_kernel",
    "persist_trace",
    "remediate",
    "__version__",
]
