"""
Statistics over update masks: overlap between runs, consensus across runs,
row/column update profiles and set algebra on selection masks.
"""
import csv
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from weightlens.errors import ArityError, ConfigError, DomainError, SchemaError, ShapeError
from weightlens.masks import AnyMask, MaskSet, as_mask_set

logger = logging.getLogger(__name__)

JACCARD_FORMULA = "J(A,B) = |A & B| / |A | B|, J = 1 when both are empty"
BASELINE_FORMULA = "E[J] = p*q / (p + q - p*q)"
CONSENSUS_FORMULA = "C[i,j] = (1/R) * sum_r M_r[i,j]"
PROFILE_FORMULA = "rho_i = mean_j M[i,j], kappa_j = mean_i M[i,j]"
OVERLAP_FORMULA = "overlap = |S & U| / |U|, baseline = density(S)"


def _bits(mask: AnyMask) -> np.ndarray:
    return as_mask_set(mask).bits


def _same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: mask shapes {a.shape} and {b.shape} differ")


def jaccard(A: AnyMask, B: AnyMask) -> float:
    a, b = _bits(A), _bits(B)
    _same_shape(a, b, "jaccard")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def jaccard_matrix(masks: Sequence[AnyMask]) -> np.ndarray:
    """Pairwise Jaccard matrix; symmetric with unit diagonal."""
    bits = [_bits(m) for m in masks]
    R = len(bits)
    J = np.eye(R)
    for i in range(R):
        for j in range(i + 1, R):
            _same_shape(bits[i], bits[j], "jaccard_matrix")
            union = np.count_nonzero(bits[i] | bits[j])
            J[i, j] = J[j, i] = np.count_nonzero(bits[i] & bits[j]) / union if union else 1.0
    return J


def mean_off_diagonal(J: np.ndarray) -> float:
    J = np.asarray(J, dtype=np.float64)
    R = J.shape[0]
    if R < 2:
        raise ArityError(f"mean off-diagonal needs at least 2 runs, got {R}")
    return float((J.sum() - np.trace(J)) / (R * (R - 1)))


def bernoulli_baseline(p: float, q: float) -> float:
    """Expected Jaccard of two independent Bernoulli masks with densities p and q."""
    for name, value in (("p", p), ("q", q)):
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"{name} must be a density in [0, 1], got {value}")
    if p == 0.0 and q == 0.0:
        raise DomainError("baseline is undefined when both densities are zero")
    return p * q / (p + q - p * q)


def pairwise_baseline(densities: Sequence[float]) -> Optional[float]:
    """Mean i.i.d. baseline over every pair of runs; pairs with both densities zero are left out."""
    values = []
    for i in range(len(densities)):
        for j in range(i + 1, len(densities)):
            if densities[i] == 0.0 and densities[j] == 0.0:
                continue
            values.append(bernoulli_baseline(densities[i], densities[j]))
    return float(np.mean(values)) if values else None


@dataclass(frozen=True)
class ConsensusMap:
    layer_name: str
    counts: np.ndarray = field(repr=False)
    runs: int

    @property
    def shape(self):
        return self.counts.shape

    @property
    def ratios(self) -> np.ndarray:
        return self.counts / self.runs

    def mean(self) -> float:
        return float(self.ratios.mean())

    def full_rows(self) -> List[int]:
        """Rows updated at every coordinate in every run."""
        return [int(i) for i in np.flatnonzero((self.counts == self.runs).all(axis=1))]


def consensus(masks: Sequence[AnyMask]) -> ConsensusMap:
    if len(masks) < 2:
        raise ArityError(f"consensus needs at least 2 runs, got {len(masks)}")
    sets = [as_mask_set(m) for m in masks]
    names = {s.layer_name for s in sets}
    if len(names) > 1:
        raise SchemaError(f"consensus over different layers: {sorted(names)}")
    counts = np.zeros(sets[0].shape, dtype=np.int64)
    for s in sets:
        _same_shape(counts, s.bits, f"consensus for {s.layer_name}")
        counts += s.bits
    counts.setflags(write=False)
    return ConsensusMap(sets[0].layer_name, counts, len(sets))


def smooth(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; windows are truncated at the edges."""
    values = np.asarray(values, dtype=np.float64)
    if window == 1 or values.size == 0:
        return values.copy()
    half = window // 2
    idx = np.arange(values.size)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, values.size)
    cumulative = np.concatenate([[0.0], np.cumsum(values)])
    return (cumulative[hi] - cumulative[lo]) / (hi - lo)


@dataclass(frozen=True)
class RatioProfiles:
    layer_name: str
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)
    window: int
    rows_smoothed: np.ndarray = field(repr=False)
    cols_smoothed: np.ndarray = field(repr=False)


def _check_window(window: int):
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"smoothing window must be an odd count >= 1, got {window}")


def ratio_profiles(mask: AnyMask, window: int = 3) -> RatioProfiles:
    _check_window(window)
    m = as_mask_set(mask)
    rows = m.bits.mean(axis=1)
    cols = m.bits.mean(axis=0)
    return RatioProfiles(m.layer_name, rows, cols, window, smooth(rows, window), smooth(cols, window))


def profile_series(masks_by_step: Sequence[AnyMask], window: int = 3) -> List[RatioProfiles]:
    """Profiles for masks of one run taken at successive checkpoints."""
    _check_window(window)
    return [ratio_profiles(m, window) for m in masks_by_step]


def _pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    if x.size < 2 or np.std(x) == 0 or np.std(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def profile_alignment(series: Sequence[RatioProfiles]) -> Dict[str, List[Optional[float]]]:
    """
    Pearson correlation between successive profiles of a series. Entries are
    None where a profile is constant.
    """
    return {
        "rows": [_pearson(a.rows, b.rows) for a, b in zip(series, series[1:])],
        "cols": [_pearson(a.cols, b.cols) for a, b in zip(series, series[1:])],
    }


class Overlap(NamedTuple):
    ratio: float
    baseline: float

    @property
    def classification(self) -> str:
        if math.isclose(self.ratio, self.baseline, rel_tol=0, abs_tol=1e-12):
            return "random"
        return "super-random" if self.ratio > self.baseline else "sub-random"


def overlap_ratio(selection: AnyMask, updates: AnyMask) -> Overlap:
    s, u = as_mask_set(selection), as_mask_set(updates)
    _same_shape(s.bits, u.bits, f"overlap for {u.layer_name}")
    if u.count == 0:
        raise DomainError(f"{u.layer_name}: overlap is undefined for an empty update mask")
    return Overlap(np.count_nonzero(s.bits & u.bits) / u.count, s.density)


class MaskOp(str, Enum):
    UNION = "union"
    INTERSECT = "intersect"
    COMPLEMENT = "complement"
    DIFFERENCE = "difference"


def combine_masks(op: Union[MaskOp, str], A: AnyMask, B: Optional[AnyMask] = None) -> MaskSet:
    op = MaskOp(op)
    a = as_mask_set(A)
    if op is MaskOp.COMPLEMENT:
        return MaskSet(a.layer_name, ~a.bits)
    if B is None:
        raise ArityError(f"{op.value} needs two masks")
    b = as_mask_set(B)
    _same_shape(a.bits, b.bits, op.value)
    if op is MaskOp.UNION:
        bits = a.bits | b.bits
    elif op is MaskOp.INTERSECT:
        bits = a.bits & b.bits
    else:
        bits = a.bits & ~b.bits
    return MaskSet(a.layer_name, bits)


def downsample_grid(values: np.ndarray, max_side: int = 256) -> np.ndarray:
    """Block-mean pooling so neither side exceeds ``max_side``; trailing blocks may be smaller."""
    values = np.asarray(values, dtype=np.float64)
    if max_side < 1:
        raise ConfigError(f"max_side must be positive, got {max_side}")
    factor = max(1, math.ceil(max(values.shape) / max_side))
    if factor == 1:
        return values.copy()
    row_starts = np.arange(0, values.shape[0], factor)
    col_starts = np.arange(0, values.shape[1], factor)
    sums = np.add.reduceat(np.add.reduceat(values, row_starts, axis=0), col_starts, axis=1)
    row_sizes = np.diff(np.append(row_starts, values.shape[0]))
    col_sizes = np.diff(np.append(col_starts, values.shape[1]))
    return sums / np.outer(row_sizes, col_sizes)


def write_consensus_csv(path: Union[str, os.PathLike], cmap: ConsensusMap):
    ratios = cmap.ratios
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "mean_consensus", "full_consensus_cols", "runs"])
        for i, row in enumerate(ratios):
            writer.writerow([i, repr(float(row.mean())), int((cmap.counts[i] == cmap.runs).sum()), cmap.runs])


def write_profiles_csv(path: Union[str, os.PathLike], profiles: RatioProfiles, step: Optional[int] = None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "axis", "index", "ratio", "smoothed"])
        for axis, raw, smoothed in (("row", profiles.rows, profiles.rows_smoothed),
                                    ("col", profiles.cols, profiles.cols_smoothed)):
            for i, (r, s) in enumerate(zip(raw, smoothed)):
                writer.writerow(["" if step is None else step, axis, i, repr(float(r)), repr(float(s))])


def write_grid_csv(path: Union[str, os.PathLike], grid: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(grid, dtype=np.float64):
            writer.writerow([repr(float(v)) for v in row])
