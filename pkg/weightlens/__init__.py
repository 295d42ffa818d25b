# weightlens/__init__.py

__version__ = '0.1.0'

from .local_threaded_executor import LocalThreadedExecutor
from .memory import SQLiteMemory
from .tensor_io import LayerFilter, WeightMatrix, open_checkpoint
from .probe import sparsity_bf16, update_mask
from .pipeline import run_pipeline

__all__ = ['LocalThreadedExecutor', 'SQLiteMemory', 'LayerFilter', 'WeightMatrix', 'open_checkpoint',
           'sparsity_bf16', 'update_mask', 'run_pipeline']
