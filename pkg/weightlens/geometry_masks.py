"""
Selection masks derived from a base layer's geometry: principal weights
(largest entries of the rank-k reconstruction), low-magnitude weights, their
compositions, and density-matched random controls.

Top-alpha selection keeps ceil(alpha * m * n) coordinates. Ties at the
threshold go to the lexicographically smallest (row, col).
"""
import json
import logging
import math
import os
import re
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from weightlens.analytics import MaskOp, combine_masks
from weightlens.errors import ConfigError, ParseError
from weightlens.local_threaded_executor import run_layer_tasks
from weightlens.masks import AnyMask, MaskSet, UpdateMask, as_mask_set, read_mask, write_mask
from weightlens.spectral import DEFAULT_K, MatrixLike, as_float64, layer_name_of, svd_topk
from weightlens.tasks import LayerTask
from weightlens.tensor_io import CheckpointHandle, LayerFilter, WeightMatrix, list_layers, load_matrix

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "weightlens-mask-archive"
MANIFEST_VERSION = 1
MASK_FORMULA = ("principal = top-alpha |U_k S_k V_k^T|; low_magnitude = bottom-alpha_low |W|; "
                "safe = low_magnitude | ~principal; principal_not_low = principal & ~low_magnitude")


class MaskKind(str, Enum):
    PRINCIPAL = "principal"
    PRINCIPAL_COMPLEMENT = "principal_complement"
    LOW_MAGNITUDE = "low_magnitude"
    SAFE = "safe"
    RANDOM_MATCHED = "random_matched"
    PRINCIPAL_NOT_LOW = "principal_not_low"


_USES_RANK = {MaskKind.PRINCIPAL, MaskKind.PRINCIPAL_COMPLEMENT, MaskKind.SAFE, MaskKind.PRINCIPAL_NOT_LOW}


def _check_alpha(alpha: float, what: str = "alpha"):
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"{what} must lie in (0, 1], got {alpha}")


def selection_count(alpha: float, size: int) -> int:
    """ceil(alpha * size), rounded first so 0.3 * 10 counts as exactly 3."""
    _check_alpha(alpha)
    return min(size, math.ceil(round(alpha * size, 9)))


def _select(scores: np.ndarray, count: int, largest: bool) -> np.ndarray:
    flat = scores.ravel()
    bits = np.zeros(flat.size, dtype=bool)
    if count <= 0:
        return bits.reshape(scores.shape)
    if count >= flat.size:
        bits[:] = True
        return bits.reshape(scores.shape)
    if largest:
        threshold = np.partition(flat, flat.size - count)[flat.size - count]
        strict = flat > threshold
    else:
        threshold = np.partition(flat, count - 1)[count - 1]
        strict = flat < threshold
    bits[strict] = True
    ties = np.flatnonzero(flat == threshold)
    bits[ties[:count - int(strict.sum())]] = True
    return bits.reshape(scores.shape)


def rank_k_reconstruct(W: MatrixLike, k: int) -> WeightMatrix:
    """Best rank-k approximation U_k diag(sigma_1..sigma_k) V_k^T, in float64."""
    S = svd_topk(W, k)
    return WeightMatrix(layer_name_of(W), "f64", (S.U_k * S.sigma[:k]) @ S.V_k.T)


def principal_mask(W: MatrixLike, k: int, alpha: float) -> MaskSet:
    scores = np.abs(rank_k_reconstruct(W, k).data)
    return MaskSet(layer_name_of(W), _select(scores, selection_count(alpha, scores.size), largest=True))


def low_magnitude_mask(W: MatrixLike, alpha: float) -> MaskSet:
    A = as_float64(W)
    if A.ndim == 1:
        A = A.reshape(1, -1)
    return MaskSet(layer_name_of(W), _select(np.abs(A), selection_count(alpha, A.size), largest=False))


@dataclass(frozen=True)
class MaskRecipe:
    kind: MaskKind
    k: int = DEFAULT_K
    alpha: float = 0.5
    alpha_low: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", MaskKind(self.kind))
        except ValueError:
            raise ConfigError(f"Unknown mask kind {self.kind!r}; expected one of {[k.value for k in MaskKind]}")
        if self.alpha_low is None:
            object.__setattr__(self, "alpha_low", self.alpha)
        _check_alpha(self.alpha)
        _check_alpha(self.alpha_low, "alpha_low")
        if self.kind in _USES_RANK and self.k < 1:
            raise ConfigError(f"{self.kind.value} masks need k >= 1, got {self.k}")

    def fitted(self, shape: Tuple[int, ...]) -> "MaskRecipe":
        """The recipe with k lowered to fit a layer whose smaller side is <= k."""
        if self.kind in _USES_RANK and len(shape) == 2 and self.k >= min(shape):
            k = max(1, min(shape) - 1)
            logger.warning("k=%d does not fit a %dx%d layer; using k=%d", self.k, shape[0], shape[1], k)
            return replace(self, k=k)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


def layer_seed(seed: int, layer_name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(layer_name.encode("utf-8"))])


def random_matched_mask(reference: AnyMask, seed: int, layer_name: Optional[str] = None) -> MaskSet:
    ref = as_mask_set(reference)
    name = layer_name or ref.layer_name
    rng = layer_seed(seed, name)
    bits = np.zeros(ref.size, dtype=bool)
    bits[rng.choice(ref.size, size=ref.count, replace=False)] = True
    return MaskSet(name, bits.reshape(ref.shape))


def build_recipe_mask(W: MatrixLike, recipe: MaskRecipe, reference: Optional[AnyMask] = None) -> MaskSet:
    kind = recipe.kind
    if kind is MaskKind.PRINCIPAL:
        return principal_mask(W, recipe.k, recipe.alpha)
    if kind is MaskKind.PRINCIPAL_COMPLEMENT:
        return combine_masks(MaskOp.COMPLEMENT, principal_mask(W, recipe.k, recipe.alpha))
    if kind is MaskKind.LOW_MAGNITUDE:
        return low_magnitude_mask(W, recipe.alpha_low)
    if kind is MaskKind.SAFE:
        low = low_magnitude_mask(W, recipe.alpha_low)
        non_principal = combine_masks(MaskOp.COMPLEMENT, principal_mask(W, recipe.k, recipe.alpha))
        return combine_masks(MaskOp.UNION, low, non_principal)
    if kind is MaskKind.PRINCIPAL_NOT_LOW:
        return combine_masks(MaskOp.DIFFERENCE, principal_mask(W, recipe.k, recipe.alpha),
                             low_magnitude_mask(W, recipe.alpha_low))
    if reference is None:
        raise ConfigError(f"{layer_name_of(W)}: random_matched masks need a reference mask")
    return random_matched_mask(reference, recipe.seed, layer_name_of(W) or None)


def mask_filename(index: int, layer_name: str) -> str:
    return f"{index:05d}_{re.sub(r'[^A-Za-z0-9._-]', '_', layer_name)}.mask"


def manifest_row(mask: AnyMask, filename: str) -> dict:
    count = mask.changed if isinstance(mask, UpdateMask) else mask.count
    return {"name": mask.layer_name, "file": filename, "shape": list(mask.shape),
            "count": count, "density": mask.density}


def write_manifest(out_dir: str, rows: List[dict], recipe: Union[MaskRecipe, Mapping], seed: int,
                    failed: Optional[Mapping[str, str]] = None) -> dict:
    total = sum(r["shape"][0] * r["shape"][1] for r in rows)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "recipe": recipe.to_dict() if isinstance(recipe, MaskRecipe) else dict(recipe),
        "seed": seed,
        "layers": rows,
        "total_count": sum(r["count"] for r in rows),
        "total_density": sum(r["count"] for r in rows) / total if total else 0.0,
    }
    if failed:
        manifest["failed"] = dict(failed)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def export_masks(out_dir: Union[str, os.PathLike], masks: Mapping[str, AnyMask], recipe: Union[MaskRecipe, Mapping],
                 seed: int) -> dict:
    """
    Write one ``.mask`` file per layer plus ``manifest.json``. ``recipe`` is
    either a geometric recipe or a plain mapping describing how the masks
    were produced, such as the probe settings behind update masks.

    :return: The manifest as written
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, (name, mask) in enumerate(masks.items()):
        mask = as_mask_set(mask)
        filename = mask_filename(i, name)
        write_mask(os.path.join(out_dir, filename), MaskSet(name, mask.bits))
        rows.append(manifest_row(MaskSet(name, mask.bits), filename))
    manifest = write_manifest(out_dir, rows, recipe, seed)
    logger.info("Exported %d masks to %s (density %.4f)", len(rows), out_dir, manifest["total_density"])
    return manifest


def load_mask_archive(out_dir: Union[str, os.PathLike]) -> Tuple[dict, "OrderedDict[str, UpdateMask]"]:
    out_dir = os.fspath(out_dir)
    with open(os.path.join(out_dir, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("version") != MANIFEST_VERSION:
        raise ParseError(f"{out_dir}: not a version-{MANIFEST_VERSION} mask archive")
    masks: "OrderedDict[str, UpdateMask]" = OrderedDict()
    for row in manifest["layers"]:
        mask = read_mask(os.path.join(out_dir, row["file"]))
        if mask.layer_name != row["name"] or list(mask.shape) != row["shape"] or mask.changed != row["count"]:
            raise ParseError(f"{out_dir}: {row['file']} disagrees with its manifest entry")
        masks[row["name"]] = mask
    return manifest, masks


def _export_layer(h: CheckpointHandle, name: str, index: int, out_dir: str, recipe: MaskRecipe,
                  reference: Optional[AnyMask]) -> dict:
    W = load_matrix(h, name)
    mask = build_recipe_mask(W, recipe.fitted(W.shape), reference)
    filename = mask_filename(index, name)
    write_mask(os.path.join(out_dir, filename), mask)
    return manifest_row(mask, filename)


def export_checkpoint_masks(h: CheckpointHandle, out_dir: Union[str, os.PathLike], recipe: MaskRecipe,
                            f: Optional[LayerFilter] = None, references: Optional[Mapping[str, AnyMask]] = None,
                            max_workers: int = 4, progress: bool = False) -> dict:
    """
    Build the recipe's mask for every selected layer of a checkpoint and
    export the archive. Layers that fail are logged and left out of the manifest.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    names = list_layers(h, f or LayerFilter.linear_only())
    references = references or {}
    if recipe.kind is MaskKind.RANDOM_MATCHED:
        missing = [n for n in names if n not in references]
        if missing:
            raise ConfigError(f"random_matched masks need references for {len(missing)} layers",
                              [f"no reference mask for {n}" for n in missing])
    tasks = [
        LayerTask(f"export/{name}", _export_layer, (h, name, i, out_dir, recipe, references.get(name)),
                  layer_name=name, kind="export")
        for i, name in enumerate(names)
    ]
    results, errors = run_layer_tasks(tasks, max_workers=max_workers, progress=progress, desc="Masks")
    for task_id, error in errors.items():
        logger.error("Mask export failed for %s: %s", task_id.split("/", 1)[1], error.splitlines()[0])
    failed: Dict[str, str] = {t.split("/", 1)[1]: e.splitlines()[0] for t, e in errors.items()}
    return write_manifest(out_dir, [r for r in results if r is not None], recipe, recipe.seed, failed)
