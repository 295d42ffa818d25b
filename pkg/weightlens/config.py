"""
Pipeline configuration: a YAML file, overridden by command-line flags.

Example::

    base: ckpt/base.safetensors
    finetuned: [ckpt/run0.safetensors, ckpt/run1.safetensors]
    output_dir: out/
    eta: 0.001
    k: [64]
    recipes:
      - {kind: safe, alpha: 0.5, alpha_low: 0.5}
    seed: 0
"""
import hashlib
import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional

import numpy as np
import yaml

from weightlens.bf16 import ETA_CEILING, ProbeConfig, ZeroPolicy
from weightlens.errors import ConfigError
from weightlens.geometry_masks import MaskRecipe
from weightlens.spectral import DEFAULT_K
from weightlens.tensor_io import LayerFilter

logger = logging.getLogger(__name__)

WORKERS_ENV = "WEIGHTLENS_WORKERS"
DEFAULT_WORKERS = 4


@dataclass
class PipelineConfig:
    base: str = ""
    finetuned: List[str] = field(default_factory=list)
    output_dir: str = "weightlens-out"
    eta: float = 1e-3
    zero_policy: str = ZeroPolicy.BITWISE.value
    include: List[str] = field(default_factory=lambda: ["*"])
    exclude: List[str] = field(default_factory=lambda: list(LayerFilter.linear_only().exclude))
    all_layers: bool = False
    k: List[int] = field(default_factory=lambda: [DEFAULT_K])
    kyfan_k: List[int] = field(default_factory=list)
    window: int = 3
    recipes: List[Dict[str, Any]] = field(default_factory=list)
    compare_absolute: bool = False
    f32_exact: bool = False
    spectral: bool = True
    seed: int = 0
    workers: Optional[int] = None

    def layer_filter(self) -> LayerFilter:
        if self.all_layers:
            return LayerFilter(include=tuple(self.include), exclude=(), min_rank=1)
        return LayerFilter(include=tuple(self.include), exclude=tuple(self.exclude), min_rank=2)

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(eta=self.eta, zero_policy=ZeroPolicy(self.zero_policy))

    def mask_recipes(self) -> List[MaskRecipe]:
        """Recipes without an explicit seed get one derived from the root seed."""
        return [MaskRecipe(**{"seed": derive_seed(self.seed, f"recipe/{i}"), **r}) for i, r in enumerate(self.recipes)]

    def validate(self):
        """
        Check the whole configuration. Values of the wrong type are reported
        as problems before any range check looks at them.

        :raises ConfigError: listing every problem found
        """
        problems = []
        if not isinstance(self.base, str):
            problems.append(f"base must be a path string; got {self.base!r}")
        elif not self.base:
            problems.append("base checkpoint path is missing")
        elif not os.path.isfile(self.base):
            problems.append(f"base checkpoint {self.base} does not exist")
        if not _is_list_of(self.finetuned, str):
            problems.append(f"finetuned must be a list of path strings; got {self.finetuned!r}")
        elif not self.finetuned:
            problems.append("no fine-tuned checkpoints listed")
        else:
            for path in self.finetuned:
                if not os.path.isfile(path):
                    problems.append(f"fine-tuned checkpoint {path} does not exist")
        if not isinstance(self.output_dir, (str, os.PathLike)):
            problems.append(f"output_dir must be a path string; got {self.output_dir!r}")
        if not _is_real(self.eta):
            problems.append(f"eta must be a number; got {self.eta!r}")
        elif not 0.0 < self.eta < ETA_CEILING:
            problems.append(f"eta must lie in (0, 2^-9); got {self.eta}")
        try:
            ZeroPolicy(self.zero_policy)
        except (TypeError, ValueError):
            problems.append(f"unknown zero_policy {self.zero_policy!r}")
        for key in ("include", "exclude"):
            if not _is_list_of(getattr(self, key), str):
                problems.append(f"{key} must be a list of glob strings; got {getattr(self, key)!r}")
        for key in ("all_layers", "compare_absolute", "spectral", "f32_exact"):
            if not isinstance(getattr(self, key), bool):
                problems.append(f"{key} must be true or false; got {getattr(self, key)!r}")
        if not _is_list_of(self.k, int) or not self.k or any(k < 1 for k in self.k):
            problems.append(f"k must be a non-empty list of positive integers; got {self.k!r}")
        if not _is_list_of(self.kyfan_k, int) or any(k < 1 for k in self.kyfan_k):
            problems.append(f"kyfan_k entries must be positive integers; got {self.kyfan_k!r}")
        if not _is_int(self.window) or self.window < 1 or self.window % 2 == 0:
            problems.append(f"window must be an odd count >= 1; got {self.window!r}")
        if not _is_int(self.seed):
            problems.append(f"seed must be an integer; got {self.seed!r}")
        if not _is_list_of(self.recipes, dict):
            problems.append(f"recipes must be a list of mappings; got {self.recipes!r}")
        else:
            for i, recipe in enumerate(self.recipes):
                try:
                    MaskRecipe(**{"seed": self.seed, **recipe})
                except (ConfigError, TypeError, ValueError) as e:
                    problems.append(f"recipe {i}: {e}")
        if self.workers is not None and (not _is_int(self.workers) or self.workers < 1):
            problems.append(f"workers must be a positive integer; got {self.workers!r}")
        if problems:
            raise ConfigError(f"{len(problems)} configuration problem(s)", problems)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        """
        Stable hash of every setting that affects results, plus the size and
        modification time of each checkpoint, so replacing a checkpoint in
        place invalidates stored layer results.
        """
        echo = self.to_dict()
        echo.pop("workers")
        echo["checkpoints"] = [checkpoint_identity(p) for p in [self.base, *self.finetuned]]
        return hashlib.sha256(json.dumps(echo, sort_keys=True).encode("utf-8")).hexdigest()


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_list_of(value: Any, kind: type) -> bool:
    if not isinstance(value, list):
        return False
    if kind is int:
        return all(_is_int(v) for v in value)
    return all(isinstance(v, kind) for v in value)


def checkpoint_identity(path: str) -> Optional[List[int]]:
    """[size, mtime in ns] of a checkpoint file, or None when it cannot be stat'ed."""
    try:
        st = os.stat(path)
    except (OSError, TypeError, ValueError):
        return None
    return [st.st_size, st.st_mtime_ns]


def load_config(path: str) -> PipelineConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_mapping(raw, source=path)


def config_from_mapping(raw: Mapping[str, Any], source: str = "config") -> PipelineConfig:
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}", [f"unknown key {k!r}" for k in unknown])
    values = dict(raw)
    if isinstance(values.get("finetuned"), str):
        values["finetuned"] = [values["finetuned"]]
    if isinstance(values.get("k"), int):
        values["k"] = [values["k"]]
    return PipelineConfig(**values)


def apply_overrides(cfg: PipelineConfig, overrides: Mapping[str, Any]) -> PipelineConfig:
    """Flags win over file values; None means the flag was not given."""
    known = {f.name for f in fields(PipelineConfig)}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown override {key!r}")
        setattr(cfg, key, value)
    return cfg


def resolve_workers(flag: Optional[int] = None) -> int:
    if flag is not None:
        return flag
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return DEFAULT_WORKERS
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}={raw!r} is not an integer")
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be positive, got {workers}")
    return workers


def derive_seed(root: int, label: str) -> int:
    """Independent child seed for one purpose, stable across runs and platforms."""
    sequence = np.random.SeedSequence([root, zlib.crc32(label.encode("utf-8"))])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
