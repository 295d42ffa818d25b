from abc import ABC, abstractmethod
from typing import Dict, List, Optional, Tuple


class Memory(ABC):
    """Persistent record of per-layer analysis tasks, their status and JSON results."""

    @abstractmethod
    def bind(self, fingerprint: str) -> bool:
        """
        Tie stored state to a configuration fingerprint. If the store holds
        state for a different fingerprint it is cleared first.

        :return: True when existing state was kept (a resumed run)
        """
        pass

    @abstractmethod
    def store_tasks(self, tasks: List[Tuple[str, dict]]):
        """Register tasks as (task_id, definition); existing tasks are left untouched."""
        pass

    @abstractmethod
    def update_task_statuses(self, statuses: List[Tuple[str, str, Optional[dict], Optional[str]]]):
        """
        Update the status of multiple tasks. Each update is a tuple of
        (task_id, status, result, error).
        """
        pass

    @abstractmethod
    def get_task_status(self, task_id: str) -> str:
        pass

    @abstractmethod
    def get_pending_tasks(self) -> List[str]:
        pass

    @abstractmethod
    def get_completed_tasks(self) -> List[str]:
        pass

    @abstractmethod
    def get_failed_tasks(self) -> List[Tuple[str, str]]:
        """Failed tasks with their error strings."""
        pass

    @abstractmethod
    def get_task_result(self, task_id: str) -> Optional[dict]:
        pass

    @abstractmethod
    def get_task_results(self, task_ids: List[str]) -> List[Optional[dict]]:
        """Results for many tasks at once, in the order given; None where a task has no result."""
        pass

    @abstractmethod
    def clear(self):
        pass

    @abstractmethod
    def clear_tasks(self, task_ids: List[str]):
        pass

    @abstractmethod
    def dump_all(self) -> Dict[str, Dict[str, dict]]:
        """
        Everything stored, as
        {"task_definitions": {...}, "task_statuses": {...},
         "task_results": {...}, "task_errors": {...}}
        """
        pass
