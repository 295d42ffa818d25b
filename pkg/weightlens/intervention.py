"""
Function-preserving edits of attention blocks: per-head orthogonal rotation
of the value/output path and KV-head permutation with grouped query heads.

Weights are held in the column-head orientation: ``W_q`` is
d_model x (H_q*D) and the block computes ``Q = X W_q``, and the output is
``Ctx W_o^T`` with ``W_o`` of shape d_model x (H_q*D). Query, key and value
projections in a checkpoint are stored transposed; output projections are
stored as-is.
"""
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import softmax

from weightlens.errors import ConfigError, NumericsError, ShapeError
from weightlens.tensor_io import CheckpointHandle, WeightMatrix, load_matrix, read_raw, write_archive

logger = logging.getLogger(__name__)

PROJECTIONS = ("q_proj", "k_proj", "v_proj", "o_proj")


@dataclass(frozen=True)
class HeadLayout:
    D: int
    H_q: int
    H_kv: int

    def __post_init__(self):
        if min(self.D, self.H_q, self.H_kv) < 1:
            raise ConfigError(f"head layout sizes must be positive, got D={self.D}, H_q={self.H_q}, H_kv={self.H_kv}")
        if self.H_q % self.H_kv:
            raise ConfigError(f"H_q={self.H_q} is not a multiple of H_kv={self.H_kv}")

    @property
    def n_rep(self) -> int:
        return self.H_q // self.H_kv

    @property
    def q_width(self) -> int:
        return self.H_q * self.D

    @property
    def kv_width(self) -> int:
        return self.H_kv * self.D

    def kv_head(self, h: int) -> int:
        """KV head serving query head ``h``."""
        return h // self.n_rep

    def to_dict(self) -> dict:
        return {"D": self.D, "H_q": self.H_q, "H_kv": self.H_kv, "n_rep": self.n_rep}


@dataclass(frozen=True)
class AttentionWeights:
    W_q: np.ndarray = field(repr=False)
    W_k: np.ndarray = field(repr=False)
    W_v: np.ndarray = field(repr=False)
    W_o: np.ndarray = field(repr=False)
    b_q: Optional[np.ndarray] = field(default=None, repr=False)
    b_k: Optional[np.ndarray] = field(default=None, repr=False)
    b_v: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def d_model(self) -> int:
        return self.W_q.shape[0]

    @property
    def dtype(self):
        return self.W_q.dtype

    def check(self, layout: HeadLayout):
        expected = {
            "W_q": layout.q_width, "W_k": layout.kv_width, "W_v": layout.kv_width, "W_o": layout.q_width,
        }
        for name, width in expected.items():
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape != (self.d_model, width):
                raise ShapeError(f"{name} has shape {arr.shape}, expected ({self.d_model}, {width}) for {layout}")
        for name, width in (("b_q", layout.q_width), ("b_k", layout.kv_width), ("b_v", layout.kv_width)):
            bias = getattr(self, name)
            if bias is not None and bias.shape != (width,):
                raise ShapeError(f"{name} has shape {bias.shape}, expected ({width},)")

    def astype(self, dtype) -> "AttentionWeights":
        return AttentionWeights(**{
            name: None if getattr(self, name) is None else getattr(self, name).astype(dtype)
            for name in ("W_q", "W_k", "W_v", "W_o", "b_q", "b_k", "b_v")
        })

    @classmethod
    def random(cls, layout: HeadLayout, d_model: int, rng: np.random.Generator, biases: bool = False,
               dtype=np.float64) -> "AttentionWeights":
        """Gaussian weights scaled by 1/sqrt(fan-in), for toy blocks."""
        def w(rows, cols):
            return rng.standard_normal((rows, cols)) / math.sqrt(rows)

        def b(width):
            return 0.1 * rng.standard_normal(width) if biases else None

        weights = cls(w(d_model, layout.q_width), w(d_model, layout.kv_width), w(d_model, layout.kv_width),
                      rng.standard_normal((d_model, layout.q_width)) / math.sqrt(layout.q_width),
                      b(layout.q_width), b(layout.kv_width), b(layout.kv_width))
        return weights.astype(dtype)


def haar_orthogonal(D: int, seed: Union[int, np.random.Generator, None] = None) -> np.ndarray:
    """Haar-distributed D x D orthogonal matrix: QR of a Gaussian with the diagonal sign fix."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Q, R = linalg.qr(rng.standard_normal((D, D)))
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def _per_head(R: Union[np.ndarray, Sequence[np.ndarray]], layout: HeadLayout) -> List[np.ndarray]:
    if isinstance(R, np.ndarray) and R.ndim == 2:
        rotations = [R] * layout.H_kv
    else:
        rotations = [np.asarray(r) for r in R]
    if len(rotations) != layout.H_kv:
        raise ConfigError(f"expected 1 or {layout.H_kv} rotations, got {len(rotations)}")
    for r in rotations:
        if r.shape != (layout.D, layout.D):
            raise ShapeError(f"rotation has shape {r.shape}, expected ({layout.D}, {layout.D})")
    return rotations


def build_block_rotations(R: Union[np.ndarray, Sequence[np.ndarray]], layout: HeadLayout):
    """
    Block-diagonal rotations along the head axis.

    :param R: One D x D orthogonal matrix shared by every KV head, or one per KV head
    :return: (R_kv of size H_kv*D, R_q of size H_q*D); each query head uses its KV group's block
    """
    rotations = _per_head(R, layout)
    R_kv = linalg.block_diag(*rotations)
    R_q = linalg.block_diag(*[rotations[layout.kv_head(h)] for h in range(layout.H_q)])
    return R_kv, R_q


def misgrouped_rotations(R: Union[np.ndarray, Sequence[np.ndarray]], layout: HeadLayout):
    """
    Negative control: R_q pairs query head h with KV rotation h mod H_kv
    instead of its own group. When both mappings agree the query blocks use
    the transposed rotation instead.
    """
    rotations = _per_head(R, layout)
    R_kv = linalg.block_diag(*rotations)
    wrong = [h % layout.H_kv for h in range(layout.H_q)]
    if all(wrong[h] == layout.kv_head(h) for h in range(layout.H_q)):
        blocks = [rotations[layout.kv_head(h)].T for h in range(layout.H_q)]
    else:
        blocks = [rotations[g] for g in wrong]
    return R_kv, linalg.block_diag(*blocks)


def apply_vo_rotation(w: AttentionWeights, layout: HeadLayout, R, R_q: Optional[np.ndarray] = None) -> AttentionWeights:
    """
    W_v' = W_v R_kv, W_o' = W_o R_q, b_v' = b_v R_kv. Query and key
    projections are never rotated, so rotary position encodings stay valid.

    :param R: D x D rotation, a list of per-KV-head rotations, or a prebuilt R_kv when ``R_q`` is given
    :param R_q: Explicit query-side block rotation (used by the negative control)
    """
    w.check(layout)
    if R_q is None:
        R_kv, R_q = build_block_rotations(R, layout)
    else:
        R_kv = np.asarray(R)
    if R_kv.shape != (layout.kv_width,) * 2 or R_q.shape != (layout.q_width,) * 2:
        raise ShapeError(f"block rotations {R_kv.shape}, {R_q.shape} do not match {layout}")
    dtype = w.dtype
    return replace(
        w,
        W_v=(w.W_v @ R_kv.astype(dtype)),
        W_o=(w.W_o @ R_q.astype(dtype)),
        b_v=None if w.b_v is None else w.b_v @ R_kv.astype(dtype),
    )


def _check_permutation(perm: Sequence[int], n: int) -> np.ndarray:
    p = np.asarray(perm)
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise ConfigError(f"{list(perm)} is not a permutation of 0..{n - 1}")
    return p.astype(np.int64)


def inverse_permutation(perm: Sequence[int]) -> np.ndarray:
    p = _check_permutation(perm, len(perm))
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size)
    return inv


def _column_index(heads: np.ndarray, D: int) -> np.ndarray:
    return (heads[:, None] * D + np.arange(D)).ravel()


def apply_head_permutation(w: AttentionWeights, layout: HeadLayout, perm: Sequence[int]) -> AttentionWeights:
    """
    New KV head j carries old KV head perm[j]; its query group moves with
    it. Query and output projections share one column gather, so every
    query head keeps its output columns.
    """
    w.check(layout)
    p = _check_permutation(perm, layout.H_kv)
    kv_cols = _column_index(p, layout.D)
    q_heads = (p[:, None] * layout.n_rep + np.arange(layout.n_rep)).ravel()
    q_cols = _column_index(q_heads, layout.D)

    def gather(arr, cols, axis=1):
        return None if arr is None else np.take(arr, cols, axis=axis)

    return AttentionWeights(
        W_q=gather(w.W_q, q_cols), W_k=gather(w.W_k, kv_cols), W_v=gather(w.W_v, kv_cols),
        W_o=gather(w.W_o, q_cols),
        b_q=gather(w.b_q, q_cols, 0), b_k=gather(w.b_k, kv_cols, 0), b_v=gather(w.b_v, kv_cols, 0),
    )


def _project(X: np.ndarray, W: np.ndarray, b: Optional[np.ndarray], head: int, D: int) -> np.ndarray:
    cols = slice(head * D, (head + 1) * D)
    out = X @ np.ascontiguousarray(W[:, cols])
    return out if b is None else out + b[cols]


def toy_attention_forward(w: AttentionWeights, layout: HeadLayout, X: np.ndarray) -> np.ndarray:
    """
    Causal scaled dot-product attention with grouped KV heads.

    Every head is computed from its own column block and head contributions
    are summed in value order, so relabelling heads reproduces the output
    bit for bit.
    """
    w.check(layout)
    X = np.asarray(X, dtype=w.dtype)
    if X.ndim != 2 or X.shape[1] != w.d_model:
        raise ShapeError(f"inputs must be T x {w.d_model}, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericsError("non-finite attention inputs")
    T, D = X.shape[0], layout.D
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    keys = [_project(X, w.W_k, w.b_k, g, D) for g in range(layout.H_kv)]
    values = [_project(X, w.W_v, w.b_v, g, D) for g in range(layout.H_kv)]
    contributions = np.empty((layout.H_q, T, w.d_model), dtype=w.dtype)
    for h in range(layout.H_q):
        g = layout.kv_head(h)
        scores = (_project(X, w.W_q, w.b_q, h, D) @ keys[g].T) / np.sqrt(D).astype(w.dtype)
        scores = np.where(causal, -np.inf, scores)
        ctx = softmax(scores, axis=-1).astype(w.dtype) @ values[g]
        contributions[h] = ctx @ np.ascontiguousarray(w.W_o[:, h * D:(h + 1) * D]).T
    out = np.sort(contributions, axis=0).sum(axis=0)
    if not np.all(np.isfinite(out)):
        raise NumericsError("attention produced non-finite outputs")
    return out


@dataclass
class InvarianceReport:
    trials: int
    tol: float
    max_deviation: float
    relative_deviation: float
    weight_deviation: Dict[str, float]
    trivial_edit: bool

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tol

    def to_dict(self) -> dict:
        return {"trials": self.trials, "tol": self.tol, "max_deviation": self.max_deviation,
                "relative_deviation": self.relative_deviation,
                "weight_deviation": dict(sorted(self.weight_deviation.items())),
                "trivial_edit": self.trivial_edit, "passed": self.passed}


def _relative_change(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> float:
    if a is None or b is None:
        return 0.0
    base = float(np.linalg.norm(a.astype(np.float64)))
    diff = float(np.linalg.norm(a.astype(np.float64) - b.astype(np.float64)))
    return diff / base if base else diff


def verify_invariance(original: AttentionWeights, edited: AttentionWeights, layout: HeadLayout,
                      trials: int = 8, tol: float = 1e-10, seq_len: int = 6, seed: int = 0) -> InvarianceReport:
    """
    Compare toy-attention outputs of two weight sets on random inputs and
    report how far the weights themselves moved.
    """
    if trials < 1:
        raise ConfigError(f"trials must be positive, got {trials}")
    rng = np.random.default_rng(seed)
    max_dev, max_out = 0.0, 0.0
    for _ in range(trials):
        X = rng.standard_normal((seq_len, original.d_model))
        a = toy_attention_forward(original, layout, X)
        b = toy_attention_forward(edited, layout, X)
        max_dev = max(max_dev, float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))))
        max_out = max(max_out, float(np.max(np.abs(a))))
    deviation = {name: _relative_change(getattr(original, name), getattr(edited, name))
                 for name in ("W_q", "W_k", "W_v", "W_o", "b_q", "b_k", "b_v")}
    trivial = all(v == 0.0 for v in deviation.values())
    if trivial:
        logger.warning("Edited weights equal the originals; invariance holds trivially")
    return InvarianceReport(trials, tol, max_dev, max_dev / max_out if max_out else max_dev, deviation, trivial)


F64_TOLERANCE = 1e-10
F32_TOLERANCE = 1e-5
CONTROL_FLOOR = 1e-3
NONTRIVIAL_FLOOR = 0.1


def random_layout(rng: np.random.Generator) -> HeadLayout:
    D = int(rng.choice([4, 8]))
    H_kv = int(rng.choice([1, 2, 4]))
    return HeadLayout(D, H_kv * int(rng.choice([1, 2, 4])), H_kv)


def _nontrivial_permutation(rng: np.random.Generator, n: int) -> np.ndarray:
    perm = rng.permutation(n)
    if n > 1 and np.array_equal(perm, np.arange(n)):
        perm = np.roll(perm, 1)
    return perm


def invariance_suite(configs: int = 50, seed: int = 0, trials: int = 4, d_model: int = 16) -> dict:
    """
    Rotation and permutation edits on random toy GQA blocks.

    Each configuration checks rotation in f64 and f32, permutation for exact
    equality, and the mis-grouped rotation as a negative control that must
    change the outputs.
    """
    if configs < 1:
        raise ConfigError(f"configs must be positive, got {configs}")
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(configs):
        layout = random_layout(rng)
        w = AttentionWeights.random(layout, d_model, rng, biases=bool(i % 2))
        rotations = [haar_orthogonal(layout.D, rng) for _ in range(layout.H_kv)]
        input_seed = int(rng.integers(2 ** 31))

        rot64 = verify_invariance(w, apply_vo_rotation(w, layout, rotations), layout, trials,
                                  F64_TOLERANCE, seed=input_seed)
        w32 = w.astype(np.float32)
        rot32 = verify_invariance(w32, apply_vo_rotation(w32, layout, rotations), layout, trials,
                                  F32_TOLERANCE, seed=input_seed)
        perm = _nontrivial_permutation(rng, layout.H_kv)
        permuted = verify_invariance(w, apply_head_permutation(w, layout, perm), layout, trials, 0.0,
                                     seed=input_seed)
        R_kv, R_q = misgrouped_rotations(rotations, layout)
        control = verify_invariance(w, apply_vo_rotation(w, layout, R_kv, R_q), layout, trials,
                                    CONTROL_FLOOR, seed=input_seed)
        row = {
            "layout": layout.to_dict(),
            "biases": bool(i % 2),
            "rotation_f64": rot64.max_deviation,
            "rotation_f32": rot32.max_deviation,
            "value_change": rot64.weight_deviation["W_v"],
            "permutation": [int(p) for p in perm],
            "permutation_deviation": permuted.max_deviation,
            "control_deviation": control.max_deviation,
        }
        row["passed"] = bool(rot64.passed and rot32.passed and permuted.passed
                             and row["value_change"] > NONTRIVIAL_FLOOR
                             and row["control_deviation"] > CONTROL_FLOOR)
        rows.append(row)
    summary = {
        "configs": configs,
        "seed": seed,
        "tolerances": {"f64": F64_TOLERANCE, "f32": F32_TOLERANCE, "control_floor": CONTROL_FLOOR,
                       "nontrivial_floor": NONTRIVIAL_FLOOR},
        "max_rotation_f64": max(r["rotation_f64"] for r in rows),
        "max_rotation_f32": max(r["rotation_f32"] for r in rows),
        "max_permutation_deviation": max(r["permutation_deviation"] for r in rows),
        "min_value_change": min(r["value_change"] for r in rows),
        "min_control_deviation": min(r["control_deviation"] for r in rows),
        "failed_configs": [i for i, r in enumerate(rows) if not r["passed"]],
        "rows": rows,
    }
    summary["passed"] = not summary["failed_configs"]
    logger.info("Invariance suite: %d configs, %d failed", configs, len(summary["failed_configs"]))
    return summary


def _to_head_orientation(m: WeightMatrix, projection: str, width: int) -> Tuple[np.ndarray, bool]:
    """
    :return: (matrix in column-head orientation, whether it was transposed)
    """
    A = m.to_float64()
    stored_transposed = projection != "o_proj"
    if A.shape[0] == A.shape[1]:
        logger.warning("%s is square; assuming checkpoint storage orientation", m.layer_name)
        return (A.T, True) if stored_transposed else (A, False)
    if A.shape[1] == width and A.shape[0] != width:
        return A, False
    if A.shape[0] == width:
        return A.T, True
    raise ShapeError(f"{m.layer_name}: shape {A.shape} has no side of width {width}")


def load_attention_block(h: CheckpointHandle, prefix: str, layout: HeadLayout):
    """
    Read ``{prefix}.{q,k,v,o}_proj.weight`` and any q/k/v biases.

    :return: (AttentionWeights in float64, {projection: transposed flag}, {projection: WeightMatrix})
    """
    widths = {"q_proj": layout.q_width, "k_proj": layout.kv_width, "v_proj": layout.kv_width,
              "o_proj": layout.q_width}
    arrays, transposed, sources = {}, {}, {}
    for proj in PROJECTIONS:
        m = load_matrix(h, f"{prefix}.{proj}.weight")
        arrays[proj], transposed[proj] = _to_head_orientation(m, proj, widths[proj])
        sources[proj] = m
    biases = {}
    for proj, key in (("q_proj", "b_q"), ("k_proj", "b_k"), ("v_proj", "b_v")):
        name = f"{prefix}.{proj}.bias"
        if name in h:
            biases[key] = load_matrix(h, name).to_float64().ravel()
            sources[f"{proj}.bias"] = load_matrix(h, name)
    w = AttentionWeights(arrays["q_proj"], arrays["k_proj"], arrays["v_proj"], arrays["o_proj"], **biases)
    w.check(layout)
    return w, transposed, sources


def intervene_checkpoint(h: CheckpointHandle, out_path: Union[str, os.PathLike], blocks: Sequence[str],
                         layout: HeadLayout, kinds: Sequence[str], seed: int) -> dict:
    """
    Write a copy of the checkpoint with rotation and/or permutation applied
    to each listed attention block. Tensors outside those blocks are copied
    byte for byte; edited tensors keep their on-disk dtype.

    :param blocks: Attention module prefixes, e.g. ``model.layers.20.self_attn``
    :param kinds: Any of ``rotate`` and ``permute``, applied in that order
    :return: Provenance record
    """
    unknown = [k for k in kinds if k not in ("rotate", "permute")]
    if unknown or not kinds:
        raise ConfigError(f"intervention kinds must be drawn from rotate/permute, got {list(kinds)}")
    rng = np.random.default_rng(seed)
    replacements: Dict[str, WeightMatrix] = {}
    records = []
    for prefix in blocks:
        w, transposed, sources = load_attention_block(h, prefix, layout)
        record = {"block": prefix, "kinds": list(kinds),
                  "orientation": {p: ("transposed" if t else "as-stored") for p, t in transposed.items()}}
        edited = w
        if "rotate" in kinds:
            rotations = [haar_orthogonal(layout.D, rng) for _ in range(layout.H_kv)]
            edited = apply_vo_rotation(edited, layout, rotations)
        if "permute" in kinds:
            perm = rng.permutation(layout.H_kv)
            record["permutation"] = [int(i) for i in perm]
            edited = apply_head_permutation(edited, layout, perm)
        for proj, attr in zip(PROJECTIONS, ("W_q", "W_k", "W_v", "W_o")):
            new, old = getattr(edited, attr), getattr(w, attr)
            if new is old:
                continue
            src = sources[proj]
            data = new.T if transposed[proj] else new
            replacements[src.layer_name] = WeightMatrix.from_float(src.layer_name, data, src.dtype)
        for proj, attr in (("q_proj", "b_q"), ("k_proj", "b_k"), ("v_proj", "b_v")):
            new, old = getattr(edited, attr), getattr(w, attr)
            if new is None or new is old:
                continue
            src = sources[f"{proj}.bias"]
            replacements[src.layer_name] = WeightMatrix.from_float(src.layer_name, new.reshape(src.shape), src.dtype)
        records.append(record)

    tensors: "OrderedDict[str, object]" = OrderedDict()
    for name in h.all_names():
        if name in replacements:
            tensors[name] = replacements[name]
        else:
            entry = h.raw_entry(name)
            tensors[name] = (entry.dtype, read_raw(h, name), entry.shape)
    write_archive(out_path, tensors, metadata=h.metadata)
    logger.info("Intervened %d blocks (%s); %d tensors rewritten", len(blocks), "+".join(kinds), len(replacements))
    return {
        "source": h.path,
        "output": os.fspath(out_path),
        "seed": seed,
        "kinds": list(kinds),
        "layout": layout.to_dict(),
        "blocks": records,
        "tensors_modified": sorted(replacements),
    }
