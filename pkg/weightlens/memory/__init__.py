# weightlens/memory/__init__.py

from .sqlite_memory import SQLiteMemory
from .memory_interface import Memory

__all__ = ['SQLiteMemory', 'Memory']
