"""
Synthetic checkpoints with planted updates, for tests, demos and throughput runs.
"""
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from weightlens.bf16 import decode_bf16, encode_bf16, ulp_bf16
from weightlens.tensor_io import WeightMatrix, write_archive

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

STRIPE_LAYER = "model.layers.0.self_attn.q_proj.weight"
NOISY_LAYER = "model.layers.0.mlp.up_proj.weight"
STRIPE_ROWS = (2, 3, 9, 10)


def random_bf16(rng: np.random.Generator, shape: Tuple[int, ...], scale: float = 0.02) -> np.ndarray:
    """bf16 codes of Gaussian weights, with exact zeros replaced so every entry is normalized."""
    values = rng.standard_normal(shape) * scale
    values[values == 0] = scale
    return encode_bf16(values)


def bump_codes(codes: np.ndarray, where: np.ndarray) -> np.ndarray:
    """Add one ULP to the selected entries; every bumped entry lands on a different code."""
    values = decode_bf16(codes).astype(np.float64)
    bumped = values + np.where(where, ulp_bf16(codes), 0.0)
    return np.where(where, encode_bf16(bumped), codes).astype(np.uint16)


def planted_pair(base_path: PathLike, tuned_path: PathLike, shape: Tuple[int, int] = (10, 10), changed: int = 25,
                 layer_name: str = "model.layers.0.mlp.down_proj.weight", seed: int = 0) -> np.ndarray:
    """
    One-layer checkpoint pair in which exactly ``changed`` entries differ.

    :return: The planted boolean mask
    """
    rng = np.random.default_rng(seed)
    base = random_bf16(rng, shape)
    where = np.zeros(base.size, dtype=bool)
    where[rng.choice(base.size, size=changed, replace=False)] = True
    where = where.reshape(shape)
    write_archive(base_path, {layer_name: WeightMatrix(layer_name, "bf16", base)})
    write_archive(tuned_path, {layer_name: WeightMatrix(layer_name, "bf16", bump_codes(base, where))})
    return where


@dataclass
class StripeSuite:
    base: str
    runs: List[str]
    stripe_rows: Tuple[int, ...]
    planted: Dict[str, List[np.ndarray]]


def stripe_suite(out_dir: PathLike, runs: int = 5, stripe_rows: Sequence[int] = STRIPE_ROWS,
                 noise: float = 0.05, seed: int = 0) -> StripeSuite:
    """
    A base checkpoint and ``runs`` fine-tuned copies sharing update stripes.

    ``STRIPE_LAYER`` (16x16) changes exactly its stripe rows in every run,
    a 25% update. ``NOISY_LAYER`` (32x16) changes the same rows plus
    independent per-run noise of density ``noise``. An embedding table and a
    norm vector are changed too, so filters matter.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    shapes = OrderedDict([
        ("model.embed_tokens.weight", (32, 16)),
        (STRIPE_LAYER, (16, 16)),
        (NOISY_LAYER, (32, 16)),
        ("model.norm.weight", (16,)),
    ])
    base = OrderedDict((name, random_bf16(rng, shape)) for name, shape in shapes.items())
    base_path = os.path.join(out_dir, "base.safetensors")
    write_archive(base_path, {n: WeightMatrix(n, "bf16", c) for n, c in base.items()})

    stripes = list(stripe_rows)
    planted: Dict[str, List[np.ndarray]] = {STRIPE_LAYER: [], NOISY_LAYER: []}
    run_paths = []
    for r in range(runs):
        tuned = OrderedDict()
        for name, codes in base.items():
            where = np.zeros(codes.shape, dtype=bool)
            if name in (STRIPE_LAYER, NOISY_LAYER):
                where[stripes, :] = True
            if name == NOISY_LAYER:
                where |= rng.random(codes.shape) < noise
            if name not in planted:
                where |= rng.random(codes.shape) < 0.5
            else:
                planted[name].append(where)
            tuned[name] = bump_codes(codes, where)
        path = os.path.join(out_dir, f"run{r}.safetensors")
        write_archive(path, {n: WeightMatrix(n, "bf16", c) for n, c in tuned.items()})
        run_paths.append(path)
    logger.info("Wrote stripe suite with %d runs to %s", runs, out_dir)
    return StripeSuite(base_path, run_paths, tuple(stripes), planted)


def synthetic_checkpoint_pair(base_path: PathLike, tuned_path: PathLike, layers: int = 12,
                              params: int = 100_000_000, update_density: float = 0.3, seed: int = 0) -> List[str]:
    """
    A pair of bf16 checkpoints with ``layers`` square linear layers totalling
    about ``params`` parameters; the tuned copy changes a random
    ``update_density`` fraction of each layer.
    """
    side = int(math.sqrt(params / layers))
    rng = np.random.default_rng(seed)
    names = [f"model.layers.{i}.mlp.up_proj.weight" for i in range(layers)]
    base, tuned = OrderedDict(), OrderedDict()
    for name in names:
        codes = random_bf16(rng, (side, side))
        base[name] = WeightMatrix(name, "bf16", codes)
        tuned[name] = WeightMatrix(name, "bf16", bump_codes(codes, rng.random(codes.shape) < update_density))
    write_archive(base_path, base)
    write_archive(tuned_path, tuned)
    logger.info("Wrote %d layers of %dx%d to %s and %s", layers, side, side, base_path, tuned_path)
    return names
