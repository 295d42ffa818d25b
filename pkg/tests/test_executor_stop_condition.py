import threading
import time

import pytest

from weightlens import LocalThreadedExecutor
from weightlens.tasks import LayerTask


@pytest.fixture
def sqlite_memory():
    from weightlens.memory import SQLiteMemory
    return SQLiteMemory(":memory:")


# Test stop condition halts submission after a number of tasks have finished
def test_stop_condition_after_task_execution(sqlite_memory):
    executed = []
    lock = threading.Lock()

    def record(i):
        with lock:
            executed.append(i)
        time.sleep(0.02)
        return {"i": i}

    tasks = [LayerTask(f"task_{i}", record, args=(i,)) for i in range(6)]
    executor = LocalThreadedExecutor(tasks=tasks, memory=sqlite_memory, max_concurrency=1, progress=False,
                                     stop_all_when=lambda: len(executed) >= 2)
    executor.run()

    assert executor.stopped
    assert len(executed) < 6
    assert len(sqlite_memory.get_completed_tasks()) < 6


# Test a stop condition that is true from the start prevents any work
def test_stop_condition_true_before_start(sqlite_memory):
    calls = []
    tasks = [LayerTask(f"task_{i}", lambda: calls.append(1) or {}) for i in range(3)]
    executor = LocalThreadedExecutor(tasks=tasks, memory=sqlite_memory, stop_all_when=lambda: True, progress=False)
    executor.run()

    assert calls == []
    assert executor.stopped
    assert sqlite_memory.get_pending_tasks() == ["task_0", "task_1", "task_2"]


# Test stop condition never triggering lets every task finish
def test_stop_condition_never_met(sqlite_memory):
    tasks = [LayerTask(f"task_{i}", lambda i=i: {"i": i}) for i in range(4)]
    executor = LocalThreadedExecutor(tasks=tasks, memory=sqlite_memory, stop_all_when=lambda: False, progress=False)
    executor.run()

    assert not executor.stopped
    assert [r["i"] for r in executor.results()] == [0, 1, 2, 3]
