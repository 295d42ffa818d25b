import json
import logging
import os
import sqlite3
from threading import Lock
from typing import Dict, List, Optional, Tuple

from .memory_interface import Memory

logger = logging.getLogger(__name__)


class SQLiteMemory(Memory):
    """
    SQLite-backed task memory. Use ``":memory:"`` for a throwaway store or a
    file path under the output directory to make pipelines resumable.
    """

    def __init__(self, path: str):
        dir_path = os.path.dirname(path)
        if dir_path and not os.path.exists(dir_path):
            os.makedirs(dir_path, exist_ok=True)

        self.path = path
        self.conn = sqlite3.connect(path, check_same_thread=False)
        self.lock = Lock()
        self._setup_db()

    def _setup_db(self):
        with self.conn:
            self.conn.execute('''
                CREATE TABLE IF NOT EXISTS store_info (
                    key TEXT PRIMARY KEY,
                    value TEXT
                )
            ''')
            self.conn.execute('''
                CREATE TABLE IF NOT EXISTS layer_task (
                    seq INTEGER PRIMARY KEY AUTOINCREMENT,
                    task_id TEXT UNIQUE,
                    task_data TEXT
                )
            ''')
            self.conn.execute('''
                CREATE TABLE IF NOT EXISTS task_status (
                    task_id TEXT PRIMARY KEY,
                    status TEXT,
                    FOREIGN KEY(task_id) REFERENCES layer_task(task_id)
                )
            ''')
            self.conn.execute('''
                CREATE TABLE IF NOT EXISTS task_result (
                    task_id TEXT PRIMARY KEY,
                    result TEXT,
                    FOREIGN KEY(task_id) REFERENCES layer_task(task_id)
                )
            ''')
            self.conn.execute('''
                CREATE TABLE IF NOT EXISTS task_error (
                    task_id TEXT PRIMARY KEY,
                    error TEXT,
                    FOREIGN KEY(task_id) REFERENCES layer_task(task_id)
                )
            ''')

    def bind(self, fingerprint: str) -> bool:
        with self.conn, self.lock:
            row = self.conn.execute("SELECT value FROM store_info WHERE key = 'fingerprint'").fetchone()
            if row is not None and row[0] == fingerprint:
                return True
            if row is not None:
                logger.info("Configuration changed since %s was written; discarding stored tasks", self.path)
            for table in ("layer_task", "task_status", "task_result", "task_error"):
                self.conn.execute(f"DELETE FROM {table}")
            self.conn.execute(
                "INSERT OR REPLACE INTO store_info (key, value) VALUES ('fingerprint', ?)", (fingerprint,)
            )
            return False

    def store_tasks(self, tasks: List[Tuple[str, dict]]):
        serialized_tasks = []
        for task_id, task_data in tasks:
            if not isinstance(task_data, dict):
                raise TypeError(f"Definition for task {task_id} must be a dict, got {type(task_data).__name__}")
            try:
                json_data = json.dumps(task_data, sort_keys=True)
            except (TypeError, ValueError) as e:
                raise TypeError(f"Definition for task {task_id} is not JSON serializable: {e}")
            serialized_tasks.append((task_id, json_data))

        with self.conn, self.lock:
            self.conn.executemany('INSERT OR IGNORE INTO layer_task (task_id, task_data) VALUES (?, ?)', serialized_tasks)
            self.conn.executemany('INSERT OR IGNORE INTO task_status (task_id, status) VALUES (?, ?)',
                                  [(task_id, 'pending') for task_id, _ in tasks])

    def update_task_statuses(self, statuses: List[Tuple[str, str, Optional[dict], Optional[str]]]):
        if not statuses:
            return
        with self.conn, self.lock:
            task_ids = [task_id for task_id, _, _, _ in statuses]
            cursor = self.conn.execute(
                'SELECT task_id FROM task_status WHERE task_id IN ({})'.format(','.join('?' * len(task_ids))), task_ids
            )
            existing_task_ids = {row[0] for row in cursor.fetchall()}
            for task_id in task_ids:
                if task_id not in existing_task_ids:
                    raise KeyError(f"Task {task_id} does not exist")

            self.conn.executemany('UPDATE task_status SET status = ? WHERE task_id = ?',
                                  [(status, task_id) for task_id, status, _, _ in statuses])
            self.conn.executemany('INSERT OR REPLACE INTO task_result (task_id, result) VALUES (?, ?)',
                                  [(task_id, json.dumps(result)) for task_id, _, result, _ in statuses
                                   if result is not None])
            self.conn.executemany('INSERT OR REPLACE INTO task_error (task_id, error) VALUES (?, ?)',
                                  [(task_id, json.dumps(error)) for task_id, _, _, error in statuses if error])
            # A task that succeeds on a later run drops its stale error.
            self.conn.executemany('DELETE FROM task_error WHERE task_id = ?',
                                  [(task_id,) for task_id, status, _, _ in statuses if status == 'completed'])

    def get_task_status(self, task_id: str) -> str:
        cursor = self.conn.execute('SELECT status FROM task_status WHERE task_id = ?', (task_id,))
        result = cursor.fetchone()
        if result is None:
            raise KeyError(f"Task with ID {task_id} not found in the database.")
        return result[0]

    def _ids_with_status(self, status: str) -> List[str]:
        cursor = self.conn.execute('''
            SELECT ts.task_id FROM task_status ts
            JOIN layer_task lt ON ts.task_id = lt.task_id
            WHERE ts.status = ? ORDER BY lt.seq
        ''', (status,))
        return [row[0] for row in cursor.fetchall()]

    def get_pending_tasks(self) -> List[str]:
        return self._ids_with_status('pending')

    def get_completed_tasks(self) -> List[str]:
        return self._ids_with_status('completed')

    def get_failed_tasks(self) -> List[Tuple[str, str]]:
        cursor = self.conn.execute('''
            SELECT ts.task_id, te.error
            FROM task_status ts
            JOIN task_error te ON ts.task_id = te.task_id
            JOIN layer_task lt ON ts.task_id = lt.task_id
            WHERE ts.status = 'failed' ORDER BY lt.seq
        ''')
        return [(row[0], json.loads(row[1])) for row in cursor.fetchall()]

    def get_task_result(self, task_id: str) -> Optional[dict]:
        cursor = self.conn.execute('SELECT result FROM task_result WHERE task_id = ?', (task_id,))
        result = cursor.fetchone()
        return json.loads(result[0]) if result else None

    def get_task_results(self, task_ids: List[str]) -> List[Optional[dict]]:
        found = {}
        # SQLite caps the number of bound parameters per statement.
        for start in range(0, len(task_ids), 500):
            chunk = task_ids[start:start + 500]
            cursor = self.conn.execute(
                'SELECT task_id, result FROM task_result WHERE task_id IN ({})'.format(','.join('?' * len(chunk))), chunk
            )
            found.update((row[0], json.loads(row[1])) for row in cursor.fetchall())
        return [found.get(task_id) for task_id in task_ids]

    def clear(self):
        with self.conn, self.lock:
            for table in ("layer_task", "task_status", "task_result", "task_error"):
                self.conn.execute(f"DELETE FROM {table}")

    def clear_tasks(self, task_ids: List[str]):
        with self.conn, self.lock:
            for table in ("layer_task", "task_status", "task_result", "task_error"):
                self.conn.executemany(f"DELETE FROM {table} WHERE task_id = ?", [(t,) for t in task_ids])

    def dump_all(self) -> Dict[str, Dict[str, dict]]:
        cursor = self.conn.execute('SELECT task_id, task_data FROM layer_task ORDER BY seq')
        tasks = {row[0]: json.loads(row[1]) for row in cursor.fetchall()}

        cursor = self.conn.execute('SELECT task_id, status FROM task_status')
        statuses = {row[0]: row[1] for row in cursor.fetchall()}

        cursor = self.conn.execute('SELECT task_id, result FROM task_result')
        results = {row[0]: json.loads(row[1]) for row in cursor.fetchall()}

        cursor = self.conn.execute('SELECT task_id, error FROM task_error')
        errors = {row[0]: json.loads(row[1]) for row in cursor.fetchall()}

        return {
            "task_definitions": tasks,
            "task_statuses": statuses,
            "task_results": results,
            "task_errors": errors,
        }
