import logging
import traceback
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, List, Optional

from tqdm import tqdm

from weightlens.memory import Memory, SQLiteMemory
from weightlens.tasks import LayerTask

logger = logging.getLogger(__name__)


class LocalThreadedExecutor:
    def __init__(self, tasks: List[LayerTask], memory: Optional[Memory] = None, path: Optional[str] = None,
                 max_concurrency: int = 4, stop_all_when: Optional[Callable[[], bool]] = None, retry: int = 0,
                 progress: bool = True, desc: str = "Layers"):
        """
        Run per-layer tasks on a thread pool, recording results in a Memory.

        :param tasks: LayerTask instances; IDs must be unique
        :param memory: Memory used to track task states and results. If not provided, SQLiteMemory is used.
        :param path: Path for SQLiteMemory storage. Required if memory is not provided.
        :param max_concurrency: Maximum number of worker threads
        :param stop_all_when: Callable returning True when no further tasks should be submitted
        :param retry: Number of retries for each task in case of failure
        :param progress: Show a tqdm progress bar
        :param desc: Progress bar label
        """
        ids = [task.get_id() for task in tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("Task IDs must be unique")
        if max_concurrency < 1:
            raise ValueError(f"max_concurrency must be at least 1, got {max_concurrency}")

        self.tasks = tasks
        self.memory = memory
        self.path = path
        self.max_concurrency = max_concurrency
        self.stop_all_when = stop_all_when
        self.retry = retry
        self.progress = progress
        self.desc = desc
        self._stopped = False

        if self.memory is None:
            if self.path is None:
                raise ValueError("Either a memory instance or a path must be provided")
            self.memory = SQLiteMemory(path=self.path)

    @property
    def stopped(self) -> bool:
        return self._stopped

    def status_summary(self):
        pending = self.memory.get_pending_tasks()
        completed = self.memory.get_completed_tasks()
        failed = self.memory.get_failed_tasks()
        logger.info("Pending tasks: %d, completed tasks: %d, failed tasks: %d",
                    len(pending), len(completed), len(failed))
        for task_id, error in failed:
            logger.warning("Task %s failed: %s", task_id, error.splitlines()[0] if error else "")

    def run(self):
        """
        Execute every pending task. Tasks already completed in memory are
        skipped, failed tasks from an earlier run are attempted again.
        """
        self._initialize_tasks_in_memory()

        completed_ids = set(self.memory.get_completed_tasks())
        tasks_to_run = [task for task in self.tasks if task.get_id() not in completed_ids]

        if not tasks_to_run:
            logger.info("All %d tasks are already completed.", len(self.tasks))
            return

        with tqdm(total=len(self.tasks), desc=self.desc, unit="layer", initial=len(self.tasks) - len(tasks_to_run),
                  disable=not self.progress) as pbar:
            with ThreadPoolExecutor(max_workers=self.max_concurrency) as executor:
                future_to_task = {}
                for task in tasks_to_run:
                    if self._stopped or (self.stop_all_when and self.stop_all_when()):
                        logger.warning("Stop condition met. Halting task submission.")
                        self._stopped = True
                        break
                    future_to_task[executor.submit(self._execute_task, task, self.retry)] = task

                for future in as_completed(future_to_task):
                    task = future_to_task[future]
                    try:
                        result = future.result()
                        self.memory.update_task_statuses([(task.get_id(), 'completed', result, None)])
                    except Exception as e:
                        error_info = f"{type(e).__name__}: {e}\n{traceback.format_exc()}"
                        self.memory.update_task_statuses([(task.get_id(), 'failed', None, error_info)])
                    pbar.update(1)

                    if not self._stopped and self.stop_all_when and self.stop_all_when():
                        logger.warning("Stop condition met. Remaining tasks will not start.")
                        self._stopped = True

        self.status_summary()

    def results(self) -> List[Optional[dict]]:
        """Stored results in task submission order; None for tasks without a result."""
        return self.memory.get_task_results([task.get_id() for task in self.tasks])

    def errors(self) -> dict:
        return dict(self.memory.get_failed_tasks())

    def _execute_task(self, task: LayerTask, retries_left: int):
        if self._stopped:
            raise RuntimeError("Execution was stopped by an external condition.")
        try:
            return task()
        except Exception:
            if retries_left >= 1:
                logger.warning("Retrying task %s... Attempts left: %d", task.get_id(), retries_left - 1)
                return self._execute_task(task, retries_left - 1)
            raise

    def _initialize_tasks_in_memory(self):
        task_definitions = []
        for task in self.tasks:
            try:
                self.memory.get_task_status(task.get_id())
            except KeyError:
                task_definitions.append((task.get_id(), task.definition()))
        if task_definitions:
            self.memory.store_tasks(task_definitions)


def run_layer_tasks(tasks: List[LayerTask], max_workers: int = 4, memory: Optional[Memory] = None,
                    progress: bool = False, desc: str = "Layers"):
    """
    Run tasks on a throwaway in-memory store unless one is supplied.

    :return: (results in task order, {task_id: error string} for failed tasks)
    """
    executor = LocalThreadedExecutor(tasks, memory=memory or SQLiteMemory(":memory:"),
                                     max_concurrency=max_workers, progress=progress, desc=desc)
    executor.run()
    return executor.results(), executor.errors()
