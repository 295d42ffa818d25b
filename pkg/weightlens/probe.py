"""
Update-sparsity probing: which stored weights did fine-tuning actually change?
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from weightlens.bf16 import ProbeConfig, absolute_unchanged, bf16_unchanged
from weightlens.errors import DtypeError, SchemaError, ShapeError
from weightlens.geometry_masks import manifest_row, mask_filename, write_manifest
from weightlens.local_threaded_executor import run_layer_tasks
from weightlens.masks import UpdateMask, write_mask
from weightlens.tasks import LayerTask
from weightlens.tensor_io import CheckpointHandle, LayerFilter, WeightMatrix, list_layers, load_matrix

logger = logging.getLogger(__name__)

SPARSITY_FORMULA = "sparsity = 1 - sum(changed) / sum(total), changed = NOT bf16_unchanged(w0, w1; eta)"
ABSOLUTE_ATOL = 1e-5


def update_mask(W0: WeightMatrix, W1: WeightMatrix, cfg: ProbeConfig = ProbeConfig(),
                f32_exact: bool = False) -> UpdateMask:
    """
    Mark every coordinate whose stored value differs between two versions of a layer.

    :param W0: Base weights
    :param W1: Fine-tuned weights
    :param cfg: Probe tolerance and zero policy
    :param f32_exact: Allow f32 pairs, compared with plain inequality
    :raises ShapeError: when the shapes differ
    :raises DtypeError: for mixed dtypes, f32 pairs without ``f32_exact`` or f16-origin data
    """
    if W0.shape != W1.shape:
        raise ShapeError(f"{W0.layer_name}: shape {W0.shape} does not match {W1.shape}")
    if W0.dtype != W1.dtype:
        raise DtypeError(f"{W0.layer_name}: cannot compare {W0.dtype} with {W1.dtype}")
    if "f16" in (W0.source_dtype, W1.source_dtype):
        raise DtypeError(f"{W0.layer_name}: f16 checkpoints carry different rounding; the bf16 probe refuses them")
    if W0.is_bf16:
        changed = ~bf16_unchanged(W0.data, W1.data, cfg)
    elif f32_exact:
        changed = W0.data != W1.data
    else:
        raise DtypeError(f"{W0.layer_name}: {W0.dtype} weights need the explicit f32 comparison mode")
    return UpdateMask.from_bits(W0.layer_name, np.asarray(changed, dtype=bool))


def absolute_change_count(W0: WeightMatrix, W1: WeightMatrix, atol: float = ABSOLUTE_ATOL) -> int:
    """Changed count under the fixed absolute-tolerance rule, for side-by-side comparison."""
    unchanged = absolute_unchanged(W0.to_float64(), W1.to_float64(), atol)
    return int(np.size(unchanged) - np.count_nonzero(unchanged))


@dataclass(frozen=True)
class LayerSparsity:
    name: str
    changed: int
    total: int
    rank: int = 2
    absolute_changed: Optional[int] = None

    @property
    def sparsity(self) -> float:
        return 1.0 - self.changed / self.total if self.total else 1.0

    def to_dict(self) -> dict:
        row = {"name": self.name, "changed": self.changed, "total": self.total, "rank": self.rank,
               "sparsity": self.sparsity}
        if self.absolute_changed is not None:
            row["absolute_changed"] = self.absolute_changed
            row["absolute_sparsity"] = 1.0 - self.absolute_changed / self.total if self.total else 1.0
        return row


@dataclass
class SparsityReport:
    layers: List[LayerSparsity]
    eta: float
    filter: LayerFilter
    failed: Dict[str, str] = field(default_factory=dict)

    def global_sparsity(self, min_rank: int = 1) -> float:
        rows = [layer for layer in self.layers if layer.rank >= min_rank]
        total = sum(layer.total for layer in rows)
        if total == 0:
            return 1.0
        return 1.0 - sum(layer.changed for layer in rows) / total

    @property
    def sparsity_bf16(self) -> float:
        return self.global_sparsity()

    def to_dict(self) -> dict:
        out = {
            "eta": self.eta,
            "filter": self.filter.describe(),
            "layers": [layer.to_dict() for layer in self.layers],
            "sparsity_bf16": self.sparsity_bf16,
            "failed": dict(sorted(self.failed.items())),
        }
        if self.filter.min_rank == 1:
            out["sparsity_bf16_rank2"] = self.global_sparsity(min_rank=2)
        if self.layers and all(layer.absolute_changed is not None for layer in self.layers):
            total = sum(layer.total for layer in self.layers)
            out["sparsity_absolute"] = 1.0 - sum(layer.absolute_changed for layer in self.layers) / total
        return out


def check_layer_sets(h0: CheckpointHandle, h1: CheckpointHandle, f: LayerFilter) -> List[str]:
    """
    :return: Layer names selected by ``f`` in ``h0`` archive order
    :raises SchemaError: when the selected layers or their shapes differ
    """
    names0, names1 = list_layers(h0, f), list_layers(h1, f)
    if set(names0) != set(names1):
        only0 = sorted(set(names0) - set(names1))
        only1 = sorted(set(names1) - set(names0))
        raise SchemaError(f"Layer sets differ: only in {h0.path}: {only0[:5]}, only in {h1.path}: {only1[:5]}")
    for name in names0:
        if h0.entry(name).shape != h1.entry(name).shape:
            raise SchemaError(f"Layer {name}: shape {h0.entry(name).shape} vs {h1.entry(name).shape}")
    return names0


def _layer_counts(h0: CheckpointHandle, h1: CheckpointHandle, name: str, cfg: ProbeConfig,
                  f32_exact: bool, compare_absolute: bool) -> dict:
    W0, W1 = load_matrix(h0, name), load_matrix(h1, name)
    mask = update_mask(W0, W1, cfg, f32_exact=f32_exact)
    result = {"changed": mask.changed, "total": mask.total, "rank": W0.data.ndim}
    if compare_absolute:
        result["absolute_changed"] = absolute_change_count(W0, W1)
    return result


def sparsity_bf16(h0: CheckpointHandle, h1: CheckpointHandle, f: Optional[LayerFilter] = None,
                  cfg: ProbeConfig = ProbeConfig(), max_workers: int = 4, compare_absolute: bool = False,
                  f32_exact: bool = False, progress: bool = False) -> SparsityReport:
    """
    Update sparsity over every layer selected by ``f``. Layers are processed
    independently; a layer that fails is recorded in ``failed`` and left out
    of the totals.
    """
    f = f or LayerFilter.linear_only()
    names = check_layer_sets(h0, h1, f)
    tasks = [
        LayerTask(f"sparsity/{name}", _layer_counts, (h0, h1, name, cfg, f32_exact, compare_absolute),
                  layer_name=name, kind="sparsity")
        for name in names
    ]
    results, errors = run_layer_tasks(tasks, max_workers=max_workers, progress=progress, desc="Probing")
    layers = [
        LayerSparsity(name, r["changed"], r["total"], r["rank"], r.get("absolute_changed"))
        for name, r in zip(names, results) if r is not None
    ]
    failed = {task_id.split("/", 1)[1]: error.splitlines()[0] for task_id, error in errors.items()}
    report = SparsityReport(layers=layers, eta=cfg.eta, filter=f, failed=failed)
    logger.info("sparsity_bf16 = %.6f over %d layers (%d failed)", report.sparsity_bf16, len(layers), len(failed))
    return report


def _write_layer_mask(h0: CheckpointHandle, h1: CheckpointHandle, name: str, cfg: ProbeConfig, out_dir: str,
                      filename: str, f32_exact: bool) -> dict:
    mask = update_mask(load_matrix(h0, name), load_matrix(h1, name), cfg, f32_exact=f32_exact)
    write_mask(os.path.join(out_dir, filename), mask)
    return manifest_row(mask, filename)


def export_update_masks(h0: CheckpointHandle, h1: CheckpointHandle, out_dir: Union[str, os.PathLike],
                        f: Optional[LayerFilter] = None, cfg: ProbeConfig = ProbeConfig(), max_workers: int = 4,
                        f32_exact: bool = False, progress: bool = False) -> dict:
    """
    Write the update mask of every selected layer as a mask archive.

    :return: The archive manifest; layers that failed are listed under ``failed``
    """
    f = f or LayerFilter.linear_only()
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    names = check_layer_sets(h0, h1, f)
    tasks = [
        LayerTask(f"mask/{name}", _write_layer_mask, (h0, h1, name, cfg, out_dir, mask_filename(i, name), f32_exact),
                  layer_name=name, kind="mask")
        for i, name in enumerate(names)
    ]
    results, errors = run_layer_tasks(tasks, max_workers=max_workers, progress=progress, desc="Masks")
    failed = {task_id.split("/", 1)[1]: error.splitlines()[0] for task_id, error in errors.items()}
    recipe = {"kind": "update", "eta": cfg.eta, "zero_policy": cfg.zero_policy.value, "base": h0.path,
              "finetuned": h1.path}
    return write_manifest(out_dir, [r for r in results if r is not None], recipe, 0, failed)
