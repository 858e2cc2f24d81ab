from __future__ import annotations

import sys
from pathlib import Path

import pytest

from kerntune.errors import ExecutorError
from kerntune.executors import RunnerProcessExecutor, SimulatedExecutor
from kerntune.loop import BuildStatus
from kerntune.profiling import PerfTestRef, run_timing_protocol

from conftest import make_kernel

FAKE_RUNNER = Path(__file__).parent / "fake_runner.py"


class TestSimulatedExecutor:
    def test_build_ok(self):
        result = SimulatedExecutor().build(make_kernel("x = 1\n"))
        assert result.ok and result.outputs_digest

    def test_syntax_error(self):
        result = SimulatedExecutor().build(make_kernel("def f(:\n"))
        assert result.status is BuildStatus.COMPILE_FAIL

    def test_out_of_domain_param_fails_build(self):
        result = SimulatedExecutor().build(make_kernel("BLOCK_SIZE = 7\n"))
        assert result.status is BuildStatus.COMPILE_FAIL
        assert "BLOCK_SIZE" in result.logs

    def test_runtime_fault_marker(self):
        result = SimulatedExecutor().run_correctness(
            make_kernel("x = 1  # SIM_RUNTIME_FAIL\n"), ()
        )
        assert result.status is BuildStatus.RUNTIME_FAIL

    def test_perf_returns_requested_iterations(self):
        samples = SimulatedExecutor().run_perf(
            make_kernel("BLOCK_SIZE = 64\n"), None, warmups=3, iterations=5
        )
        assert len(samples) == 5
        assert len(set(samples)) == 1


class TestRunnerProcessExecutor:
    def _executor(self, tmp_path, command=None):
        return RunnerProcessExecutor(
            command=command or (sys.executable, str(FAKE_RUNNER)),
            workdir=tmp_path / "work",
        )

    def test_build_round_trip(self, tmp_path):
        with self._executor(tmp_path) as executor:
            result = executor.build(make_kernel("x = 1\n"))
        assert result.ok

    def test_build_failure_carries_logs(self, tmp_path):
        with self._executor(tmp_path) as executor:
            result = executor.build(make_kernel("def f(:\n"))
        assert result.status is BuildStatus.COMPILE_FAIL
        assert "SyntaxError" in result.logs

    def test_correctness_mismatch(self, tmp_path):
        with self._executor(tmp_path) as executor:
            result = executor.run_correctness(
                make_kernel("x = 1  # FAKE_MISMATCH\n"), ("t.py",)
            )
        assert result.status is BuildStatus.CORRECTNESS_FAIL
        assert "divergence" in result.logs

    def test_perf_converts_ms_to_us(self, tmp_path):
        with self._executor(tmp_path) as executor:
            measurement = run_timing_protocol(
                executor, PerfTestRef(make_kernel("x = 1\n"), "perf.py")
            )
        assert measurement.aggregate_us == 1500.0

    def test_dead_process_is_infrastructure_error(self, tmp_path):
        executor = self._executor(
            tmp_path, command=(sys.executable, "-c", "pass")
        )
        with pytest.raises(ExecutorError):
            executor.build(make_kernel("x = 1\n"))

    def test_non_json_reply_is_infrastructure_error(self, tmp_path):
        babbler = (
            sys.executable, "-c",
            "import sys\n"
            "for line in sys.stdin:\n"
            "    print('this is not json'); sys.stdout.flush()",
        )
        executor = self._executor(tmp_path, command=babbler)
        with pytest.raises(ExecutorError, match="non-JSON"):
            executor.build(make_kernel("x = 1\n"))

    def test_mismatched_job_id_is_infrastructure_error(self, tmp_path):
        imposter = (
            sys.executable, "-c",
            "import sys, json\n"
            "for line in sys.stdin:\n"
            "    print(json.dumps({'job_id': 'wrong', 'status': 'ok',\n"
            "                      'logs': '', 'outputs_digest': 'd'}))\n"
            "    sys.stdout.flush()",
        )
        executor = self._executor(tmp_path, command=imposter)
        with pytest.raises(ExecutorError, match="job_id"):
            executor.build(make_kernel("x = 1\n"))

    def test_perf_failure_surfaces_runner_logs(self, tmp_path):
        failer = (
            sys.executable, "-c",
            "import sys, json\n"
            "for line in sys.stdin:\n"
            "    job = json.loads(line)\n"
            "    print(json.dumps({'job_id': job['job_id'],\n"
            "                      'status': 'runtime_fail',\n"
            "                      'logs': 'device exploded'}))\n"
            "    sys.stdout.flush()",
        )
        executor = self._executor(tmp_path, command=failer)
        with pytest.raises(ExecutorError) as excinfo:
            executor.run_perf(make_kernel("x = 1\n"), None, 3, 5)
        assert "device exploded" in excinfo.value.logs
