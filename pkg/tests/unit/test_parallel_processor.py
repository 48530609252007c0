"""
Unit tests for the parallel run executor.
"""

import threading

import pytest
from unittest.mock import patch

from src.utils.parallel_processor import ParallelProcessor, RunResult, RunTask, run_parallel


def _tasks(n):
    return [RunTask("", arm=f"arm{i % 2}", seed=i) for i in range(n)]


class TestRunTask:
    """Test task construction."""

    def test_default_id(self):
        assert RunTask("", arm="l2d", seed=3).task_id == "l2d_seed3"

    def test_explicit_id(self):
        assert RunTask("custom", arm="l2d", seed=3).task_id == "custom"

    def test_result_timing(self):
        result = RunResult("t", "a", 0, True, started_at=10.0, completed_at=12.5)
        assert result.processing_time == 2.5


class TestParallelProcessor:
    """Test batch execution."""

    def test_results_sorted_by_task_id(self):
        results = run_parallel(_tasks(6), lambda task: task.seed * 10, max_workers=3)

        assert [r.task_id for r in results] == sorted(r.task_id for r in results)
        assert all(r.success for r in results)
        assert {r.seed: r.result for r in results} == {i: i * 10 for i in range(6)}

    def test_runs_on_worker_threads(self):
        names = set()
        lock = threading.Lock()

        def record(task):
            with lock:
                names.add(threading.current_thread().name)

        run_parallel(_tasks(4), record, max_workers=2)
        assert all(name.startswith("l2d-run") for name in names)

    def test_failures_are_captured(self):
        def flaky(task):
            if task.seed == 2:
                raise RuntimeError("boom")
            return task.seed

        results = run_parallel(_tasks(4), flaky, max_workers=2)
        failed = [r for r in results if not r.success]

        assert len(failed) == 1
        assert failed[0].seed == 2
        assert "RuntimeError: boom" in failed[0].error

    def test_retries_with_backoff(self):
        attempts = []

        def second_time_lucky(task):
            attempts.append(task.task_id)
            if len(attempts) == 1:
                raise ValueError("transient")
            return "ok"

        with patch("src.utils.parallel_processor.time.sleep") as mock_sleep:
            results = run_parallel(_tasks(1), second_time_lucky, max_retries=2)

        assert results[0].success
        assert results[0].result == "ok"
        assert len(attempts) == 2
        mock_sleep.assert_called_once_with(1)

    def test_statistics_and_progress(self):
        updates = []
        processor = ParallelProcessor(max_workers=2, progress_callback=updates.append)
        processor.add_batch(_tasks(3))
        processor.process_batch(lambda task: None)
        stats = processor.get_statistics()

        assert stats["total_tasks"] == 3
        assert stats["successful_tasks"] == 3
        assert stats["success_rate"] == 1.0
        assert stats["pending_tasks"] == 0
        assert [u["completed"] for u in updates] == [1, 2, 3]

    def test_broken_callback_does_not_stop_processing(self):
        def broken(update):
            raise RuntimeError("callback failed")

        processor = ParallelProcessor(progress_callback=broken)
        processor.add_batch(_tasks(2))
        assert all(r.success for r in processor.process_batch(lambda task: 1))

    def test_empty_batch(self):
        assert ParallelProcessor().process_batch(lambda task: 1) == []

    def test_invalid_worker_count(self):
        with pytest.raises(ValueError):
            ParallelProcessor(max_workers=0)

    def test_cancel_when_idle(self):
        assert ParallelProcessor().cancel_processing() is False
