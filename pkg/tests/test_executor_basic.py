import logging

import pytest

from weightlens import LocalThreadedExecutor
from weightlens.local_threaded_executor import run_layer_tasks
from weightlens.tasks import LayerTask


def count_nonzero(values):
    return {"nonzero": sum(1 for v in values if v != 0), "total": len(values)}


def layer_tasks(n):
    return [
        LayerTask(f"sparsity/layer{i}", count_nonzero, args=([0] * i + [1] * (4 - i),),
                  layer_name=f"model.layers.{i}.mlp.up_proj.weight", kind="sparsity")
        for i in range(n)
    ]


# Fixture to provide a fresh SQLiteMemory for each test
@pytest.fixture
def sqlite_memory():
    from weightlens.memory import SQLiteMemory
    return SQLiteMemory(":memory:")


# Test single task execution
def test_single_task_execution(sqlite_memory):
    tasks = layer_tasks(1)
    executor = LocalThreadedExecutor(tasks=tasks, memory=sqlite_memory, max_concurrency=1, progress=False)
    executor.run()

    assert sqlite_memory.get_task_status("sparsity/layer0") == "completed"
    assert sqlite_memory.get_task_result("sparsity/layer0") == {"nonzero": 4, "total": 4}


# Test multiple task execution, results come back in submission order
def test_multiple_task_execution(sqlite_memory):
    executor = LocalThreadedExecutor(tasks=layer_tasks(4), memory=sqlite_memory, max_concurrency=3, progress=False)
    executor.run()

    assert [r["nonzero"] for r in executor.results()] == [4, 3, 2, 1]
    assert executor.errors() == {}


# Test that run registers task definitions in memory
def test_run_registers_definitions(sqlite_memory):
    executor = LocalThreadedExecutor(tasks=layer_tasks(2), memory=sqlite_memory, progress=False)
    executor.run()

    definitions = sqlite_memory.dump_all()["task_definitions"]
    assert definitions["sparsity/layer1"] == {
        "kind": "sparsity",
        "layer": "model.layers.1.mlp.up_proj.weight",
        "fn_name": "count_nonzero",
    }


# Test that a preregistered definition is kept as is
def test_preregistered_definition_is_kept(sqlite_memory):
    sqlite_memory.store_tasks([("sparsity/layer0", {"kind": "custom"})])
    LocalThreadedExecutor(tasks=layer_tasks(1), memory=sqlite_memory, progress=False).run()

    assert sqlite_memory.dump_all()["task_definitions"]["sparsity/layer0"] == {"kind": "custom"}
    assert sqlite_memory.get_task_status("sparsity/layer0") == "completed"


# Test that duplicate task IDs are rejected
def test_duplicate_task_ids(sqlite_memory):
    tasks = layer_tasks(1) + layer_tasks(1)
    with pytest.raises(ValueError, match="Task IDs must be unique"):
        LocalThreadedExecutor(tasks=tasks, memory=sqlite_memory)


# Test that a path or a memory is required
def test_memory_or_path_required():
    with pytest.raises(ValueError, match="Either a memory instance or a path must be provided"):
        LocalThreadedExecutor(tasks=layer_tasks(1))


def test_invalid_concurrency(sqlite_memory):
    with pytest.raises(ValueError, match="max_concurrency must be at least 1"):
        LocalThreadedExecutor(tasks=layer_tasks(1), memory=sqlite_memory, max_concurrency=0)


# Test executor creating its own SQLiteMemory at the given path
def test_executor_with_path(tmp_path):
    path = str(tmp_path / "out" / "state.db")
    executor = LocalThreadedExecutor(tasks=layer_tasks(2), path=path, progress=False)
    executor.run()

    assert (tmp_path / "out" / "state.db").exists()
    assert executor.memory.get_completed_tasks() == ["sparsity/layer0", "sparsity/layer1"]


# Test the status summary goes through logging
def test_status_summary_logged(sqlite_memory, caplog):
    executor = LocalThreadedExecutor(tasks=layer_tasks(3), memory=sqlite_memory, progress=False)
    with caplog.at_level(logging.INFO, logger="weightlens.local_threaded_executor"):
        executor.run()

    assert "Pending tasks: 0, completed tasks: 3, failed tasks: 0" in caplog.text


# Test the convenience wrapper
def test_run_layer_tasks():
    results, errors = run_layer_tasks(layer_tasks(3), max_workers=2)
    assert [r["total"] for r in results] == [4, 4, 4]
    assert errors == {}
