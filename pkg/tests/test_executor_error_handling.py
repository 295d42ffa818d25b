import logging

import pytest

from weightlens import LocalThreadedExecutor
from weightlens.errors import ShapeError
from weightlens.tasks import LayerTask


def layer_result(name, fail=False):
    if fail:
        raise ShapeError(f"{name}: base (4, 4) vs finetuned (4, 5)")
    return {"layer": name, "changed": 1}


def make_task(name, fail=False):
    return LayerTask(f"sparsity/{name}", layer_result, args=(name,), kwargs={"fail": fail}, layer_name=name)


# Fixture to provide a fresh SQLiteMemory for each test
@pytest.fixture
def sqlite_memory():
    from weightlens.memory import SQLiteMemory
    return SQLiteMemory(":memory:")


# Test task execution with exceptions: one failing layer does not stop the others
def test_task_execution_with_exceptions(sqlite_memory):
    tasks = [make_task("q_proj", fail=True), make_task("k_proj")]
    executor = LocalThreadedExecutor(tasks=tasks, memory=sqlite_memory, max_concurrency=2, progress=False)
    executor.run()

    assert sqlite_memory.get_task_status("sparsity/q_proj") == "failed"
    [(task_id, error)] = sqlite_memory.get_failed_tasks()
    assert task_id == "sparsity/q_proj"
    assert error.startswith("ShapeError: q_proj: base (4, 4) vs finetuned (4, 5)")
    assert "Traceback" in error
    assert sqlite_memory.get_task_status("sparsity/k_proj") == "completed"
    assert executor.results() == [None, {"layer": "k_proj", "changed": 1}]


# Test status summary after task execution
def test_status_summary_after_execution(sqlite_memory, caplog):
    tasks = [make_task("q_proj"), make_task("k_proj", fail=True), make_task("v_proj")]
    executor = LocalThreadedExecutor(tasks=tasks, memory=sqlite_memory, max_concurrency=2, progress=False)

    with caplog.at_level(logging.INFO, logger="weightlens.local_threaded_executor"):
        executor.run()

    assert "Pending tasks: 0, completed tasks: 2, failed tasks: 1" in caplog.text
    assert "Task sparsity/k_proj failed: ShapeError" in caplog.text


# Test failed tasks are retried when retries are configured
def test_failed_tasks_are_retried(sqlite_memory):
    execution_count = {"n": 0}

    def flaky():
        execution_count["n"] += 1
        if execution_count["n"] == 1:
            raise OSError("transient read failure")
        return {"attempt": execution_count["n"]}

    executor = LocalThreadedExecutor(tasks=[LayerTask("task_1", flaky)], memory=sqlite_memory, max_concurrency=1,
                                     retry=1, progress=False)
    executor.run()

    assert execution_count["n"] == 2
    assert sqlite_memory.get_task_status("task_1") == "completed"
    assert sqlite_memory.get_task_result("task_1") == {"attempt": 2}


# Test that without retries a failure is final for this run
def test_no_retry_by_default(sqlite_memory):
    calls = []

    def always_fails():
        calls.append(1)
        raise OSError("unreadable")

    LocalThreadedExecutor(tasks=[LayerTask("task_1", always_fails)], memory=sqlite_memory, progress=False).run()

    assert len(calls) == 1
    assert sqlite_memory.get_task_status("task_1") == "failed"
