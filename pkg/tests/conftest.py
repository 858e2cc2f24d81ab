from __future__ import annotations

from pathlib import Path

import pytest

from kerntune.core import (
    KernelVariant,
    LatencyMeasurement,
    ProfileReport,
    Provenance,
)
from kerntune.profiling import parse_ncu_report

FIXTURE_DIR = Path(__file__).parent / "fixtures"


def make_report(
    duration_us: float = 100.0,
    memory: float = 50.0,
    sm: float = 20.0,
    l2: float = 40.0,
    occupancy: float = 30.0,
    samples=None,
    extra=None,
) -> ProfileReport:
    if samples is None:
        samples = [duration_us] * 5
    latency = LatencyMeasurement.from_samples(samples)
    return ProfileReport(
        duration_us=duration_us,
        memory_throughput_pct=memory,
        compute_throughput_pct=sm,
        l2_throughput_pct=l2,
        achieved_occupancy_pct=occupancy,
        latency=latency,
        raw_metrics=dict(extra or {}),
    )


def make_kernel(
    source: str = "x = 1\n",
    case_id: str = "case",
    round: int = 0,
    provenance: Provenance = Provenance.ORIGINAL,
) -> KernelVariant:
    return KernelVariant(
        case_id=case_id, round=round, provenance=provenance, source=source
    )


@pytest.fixture
def ncu_fixture():
    def load(name: str) -> str:
        return (FIXTURE_DIR / "ncu" / name).read_text()

    return load


@pytest.fixture
def bmm_evolution_reports(ncu_fixture):
    return [
        parse_ncu_report(ncu_fixture(f"bmm_bwd_round{i}.txt")) for i in range(1, 6)
    ]
