import threading

import pytest

from weightlens.memory import SQLiteMemory

LAYER_0 = "model.layers.0.mlp.up_proj.weight"
LAYER_1 = "model.layers.1.mlp.up_proj.weight"


# Test setup: fixture to create a fresh SQLiteMemory instance
@pytest.fixture
def sqlite_memory():
    return SQLiteMemory(":memory:")


def _definition(layer):
    return {"kind": "sparsity", "layer": layer, "fn_name": "_layer_counts"}


# Basic CRUD Operations

def test_store_task(sqlite_memory):
    sqlite_memory.store_tasks([("sparsity/a", _definition(LAYER_0))])
    assert sqlite_memory.get_task_status("sparsity/a") == "pending"


def test_update_task_status_completed(sqlite_memory):
    sqlite_memory.store_tasks([("sparsity/a", _definition(LAYER_0))])
    sqlite_memory.update_task_statuses([("sparsity/a", "completed", {"changed": 25, "total": 100}, None)])
    assert sqlite_memory.get_task_status("sparsity/a") == "completed"
    assert sqlite_memory.get_task_result("sparsity/a") == {"changed": 25, "total": 100}


def test_update_task_status_failed(sqlite_memory):
    sqlite_memory.store_tasks([("sparsity/a", _definition(LAYER_0))])
    sqlite_memory.update_task_statuses([("sparsity/a", "failed", None, "ShapeError: (4, 4) vs (4, 5)")])
    assert sqlite_memory.get_task_status("sparsity/a") == "failed"
    assert sqlite_memory.get_failed_tasks() == [("sparsity/a", "ShapeError: (4, 4) vs (4, 5)")]


def test_pending_and_completed_tasks_follow_registration_order(sqlite_memory):
    sqlite_memory.store_tasks([(f"task_{i}", _definition(LAYER_0)) for i in (3, 1, 2, 0)])
    sqlite_memory.update_task_statuses([("task_1", "completed", {"ok": True}, None),
                                        ("task_0", "completed", {"ok": True}, None)])
    assert sqlite_memory.get_pending_tasks() == ["task_3", "task_2"]
    assert sqlite_memory.get_completed_tasks() == ["task_1", "task_0"]


def test_empty_status_update_is_a_no_op(sqlite_memory):
    sqlite_memory.store_tasks([("sparsity/a", _definition(LAYER_0))])
    sqlite_memory.update_task_statuses([])
    assert sqlite_memory.get_task_status("sparsity/a") == "pending"


# Batch Operations

def test_update_multiple_task_statuses(sqlite_memory):
    sqlite_memory.store_tasks([("sparsity/a", _definition(LAYER_0)), ("sparsity/b", _definition(LAYER_1))])
    sqlite_memory.update_task_statuses([
        ("sparsity/a", "completed", {"changed": 1}, None),
        ("sparsity/b", "failed", None, "NotFound: layer missing"),
    ])
    assert sqlite_memory.get_task_status("sparsity/a") == "completed"
    assert sqlite_memory.get_task_status("sparsity/b") == "failed"
    assert sqlite_memory.get_task_result("sparsity/a") == {"changed": 1}
    assert sqlite_memory.get_failed_tasks() == [("sparsity/b", "NotFound: layer missing")]


# Concurrency Tests

def test_concurrent_task_storage(sqlite_memory):
    def store_task(task_id):
        sqlite_memory.store_tasks([(task_id, _definition(task_id))])

    threads = [threading.Thread(target=store_task, args=(f"task_{i}",)) for i in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    for i in range(10):
        assert sqlite_memory.get_task_status(f"task_{i}") == "pending"


def test_concurrent_task_status_updates(sqlite_memory):
    sqlite_memory.store_tasks([(f"task_{i}", _definition(LAYER_0)) for i in range(10)])

    def complete(task_id):
        sqlite_memory.update_task_statuses([(task_id, "completed", {"task": task_id}, None)])

    threads = [threading.Thread(target=complete, args=(f"task_{i}",)) for i in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    for i in range(10):
        assert sqlite_memory.get_task_result(f"task_{i}") == {"task": f"task_{i}"}


# Error Handling and Recovery

def test_retry_after_failure_drops_the_stale_error(sqlite_memory):
    sqlite_memory.store_tasks([("sparsity/a", _definition(LAYER_0))])
    sqlite_memory.update_task_statuses([("sparsity/a", "failed", None, "IntegrityError: short read")])
    sqlite_memory.update_task_statuses([("sparsity/a", "completed", {"changed": 3}, None)])
    assert sqlite_memory.get_task_status("sparsity/a") == "completed"
    assert sqlite_memory.get_task_result("sparsity/a") == {"changed": 3}
    assert sqlite_memory.dump_all()["task_errors"] == {}


# Configuration binding

def test_bind_keeps_state_for_the_same_fingerprint(tmp_path):
    path = str(tmp_path / "state.db")
    memory = SQLiteMemory(path)
    assert memory.bind("abc") is False
    memory.store_tasks([("sparsity/a", _definition(LAYER_0))])
    memory.update_task_statuses([("sparsity/a", "completed", {"changed": 1}, None)])

    reopened = SQLiteMemory(path)
    assert reopened.bind("abc") is True
    assert reopened.get_task_result("sparsity/a") == {"changed": 1}


def test_bind_discards_state_for_a_new_fingerprint(tmp_path):
    path = str(tmp_path / "state.db")
    memory = SQLiteMemory(path)
    memory.bind("abc")
    memory.store_tasks([("sparsity/a", _definition(LAYER_0))])

    reopened = SQLiteMemory(path)
    assert reopened.bind("def") is False
    with pytest.raises(KeyError):
        reopened.get_task_status("sparsity/a")


# Selective and Full Data Deletion

def test_clear_all_tasks(sqlite_memory):
    sqlite_memory.store_tasks([("sparsity/a", _definition(LAYER_0)), ("sparsity/b", _definition(LAYER_1))])
    sqlite_memory.clear()
    assert sqlite_memory.get_pending_tasks() == []


def test_clear_specific_tasks(sqlite_memory):
    sqlite_memory.store_tasks([("sparsity/a", _definition(LAYER_0)), ("sparsity/b", _definition(LAYER_1))])
    sqlite_memory.clear_tasks(["sparsity/a"])
    assert sqlite_memory.get_task_status("sparsity/b") == "pending"
    with pytest.raises(KeyError):
        sqlite_memory.get_task_status("sparsity/a")


# Data Dumping

def test_dump_all(sqlite_memory):
    sqlite_memory.store_tasks([("sparsity/a", _definition(LAYER_0)), ("sparsity/b", _definition(LAYER_1))])
    sqlite_memory.update_task_statuses([("sparsity/a", "completed", {"changed": 2}, None)])
    sqlite_memory.update_task_statuses([("sparsity/b", "failed", None, "ParseError: bad header")])

    dump = sqlite_memory.dump_all()

    assert dump["task_definitions"] == {"sparsity/a": _definition(LAYER_0), "sparsity/b": _definition(LAYER_1)}
    assert dump["task_statuses"] == {"sparsity/a": "completed", "sparsity/b": "failed"}
    assert dump["task_results"] == {"sparsity/a": {"changed": 2}}
    assert dump["task_errors"] == {"sparsity/b": "ParseError: bad header"}


# Edge Cases

def test_store_task_with_non_dict_definition(sqlite_memory):
    with pytest.raises(TypeError, match="must be a dict"):
        sqlite_memory.store_tasks([("task_1", None)])


def test_store_task_with_unserializable_definition(sqlite_memory):
    with pytest.raises(TypeError, match="Definition for task task_1 is not JSON serializable"):
        sqlite_memory.store_tasks([("task_1", {"layers": {1, 2, 3}})])


def test_update_nonexistent_task(sqlite_memory):
    with pytest.raises(KeyError):
        sqlite_memory.update_task_statuses([("task_999", "completed", {"changed": 0}, None)])


def test_get_task_status_not_found(sqlite_memory):
    with pytest.raises(KeyError, match="Task with ID task_999 not found"):
        sqlite_memory.get_task_status("task_999")


def test_auto_create_directories_for_sqlite_memory(tmp_path):
    non_existent_dir = tmp_path / "out" / "nested"
    assert not non_existent_dir.exists()

    memory = SQLiteMemory(path=str(non_existent_dir / "state.db"))

    assert non_existent_dir.exists()
    memory.store_tasks([("task_1", _definition(LAYER_0))])
    assert memory.get_task_status("task_1") == "pending"


# Test batch result lookup in the requested order
def test_get_task_results(sqlite_memory):
    ids = [f"sparsity/{i}" for i in range(1200)]
    sqlite_memory.store_tasks([(task_id, _definition(LAYER_0)) for task_id in ids])
    sqlite_memory.update_task_statuses([(task_id, "completed", {"i": i}, None) for i, task_id in enumerate(ids)
                                        if i % 3])
    results = sqlite_memory.get_task_results(list(reversed(ids)))
    assert results[0] == {"i": 1199}
    assert results[-1] is None
    assert sum(r is None for r in results) == 400
    assert sqlite_memory.get_task_results([]) == []
