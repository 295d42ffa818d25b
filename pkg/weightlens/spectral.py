"""
Top-k SVD diagnostics for pairs of layers and a checker for the classical
perturbation inequalities (Wedin, Weyl, Mirsky/Hoffman-Wielandt, Ky Fan).

All arithmetic is float64. bf16 layers are decoded before factorization.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import linalg
from tqdm import tqdm

from weightlens.errors import ConfigError, DomainError, GapError, NumericsError, ShapeError
from weightlens.tensor_io import WeightMatrix

logger = logging.getLogger(__name__)

DEFAULT_K = 64
# Beyond this side length the full factorization is done block-wise.
DENSE_SVD_LIMIT = 8192
RESIDUAL_TOLERANCE = 1e-5
RELATIVE_SLACK = 1e-6

NSS_FORMULA = "NSS = ||sigma(W1) - sigma(W0)||_2 / ||sigma(W0)||_2"
KYFAN_FORMULA = "kyfan_k = |sum_{i<=k} sigma_i(W1) - sum_{i<=k} sigma_i(W0)|"
ANGLE_FORMULA = "cos(theta_i) = sigma_i(U0_k^T U1_k)"

MatrixLike = Union[WeightMatrix, np.ndarray]


def as_float64(W: MatrixLike) -> np.ndarray:
    if isinstance(W, WeightMatrix):
        return W.to_float64()
    return np.asarray(W, dtype=np.float64)


def layer_name_of(W: MatrixLike, default: str = "") -> str:
    return W.layer_name if isinstance(W, WeightMatrix) else default


def _fix_signs(U: np.ndarray, Vt: np.ndarray):
    """Make the first non-negligible entry of every left vector positive."""
    tol = 1e-12 * max(1.0, np.abs(U).max(initial=0.0))
    pivots = np.argmax(np.abs(U) > tol, axis=0)
    signs = np.sign(U[pivots, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, Vt * signs[:, None]


def _dense_svd(A: np.ndarray):
    try:
        return linalg.svd(A, full_matrices=False, lapack_driver="gesdd")
    except linalg.LinAlgError:
        logger.warning("gesdd did not converge on a %dx%d matrix; retrying with gesvd", *A.shape)
        return linalg.svd(A, full_matrices=False, lapack_driver="gesvd")


def _blocked_svd(A: np.ndarray, block_rows: int = DENSE_SVD_LIMIT):
    """
    Tall-skinny QR over row blocks followed by an SVD of the small triangular
    factor. Left vectors are recovered as A V / sigma and the factorization is
    certified by its reconstruction residual.
    """
    transposed = A.shape[0] < A.shape[1]
    if transposed:
        A = A.T
    factors = [linalg.qr(A[i:i + block_rows], mode="r")[0] for i in range(0, A.shape[0], block_rows)]
    R = linalg.qr(np.vstack(factors), mode="r")[0]
    _, s, Vt = _dense_svd(R)
    cutoff = (s[0] if s.size else 0.0) * np.finfo(np.float64).eps * max(A.shape)
    nonzero = s > cutoff
    U = np.zeros((A.shape[0], s.size))
    for i in range(0, A.shape[0], block_rows):
        U[i:i + block_rows, nonzero] = (A[i:i + block_rows] @ Vt[nonzero].T) / s[nonzero]

    residual_sq = 0.0
    for i in range(0, A.shape[0], block_rows):
        block = A[i:i + block_rows]
        residual_sq += float(np.sum((block - (U[i:i + block_rows] * s) @ Vt) ** 2))
    norm = np.linalg.norm(s)
    if norm > 0 and np.sqrt(residual_sq) / norm > RESIDUAL_TOLERANCE:
        raise NumericsError(f"blocked SVD residual {np.sqrt(residual_sq) / norm:.3e} exceeds {RESIDUAL_TOLERANCE}")
    if transposed:
        return Vt.T, s, U.T
    return U, s, Vt


@dataclass(frozen=True)
class SpectralSummary:
    layer_name: str
    k: int
    sigma: np.ndarray = field(repr=False)
    U_k: np.ndarray = field(repr=False)
    V_k: np.ndarray = field(repr=False)

    @property
    def gap(self) -> float:
        """gamma_k = sigma_k - sigma_{k+1}"""
        return float(self.sigma[self.k - 1] - self.sigma[self.k])

    @property
    def shape(self):
        return (self.U_k.shape[0], self.V_k.shape[0])


def full_svd(W: MatrixLike):
    """
    Thin SVD (U, sigma, Vt) with the sign convention applied.

    :raises NumericsError: on non-finite entries or a failed residual certificate
    """
    return _svd_array(as_float64(W), layer_name_of(W, "matrix"))


def _svd_array(A: np.ndarray, name: str):
    if A.ndim != 2:
        raise ShapeError(f"{name}: SVD needs a 2-D matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericsError(f"{name}: non-finite entries")
    if max(A.shape) > DENSE_SVD_LIMIT:
        logger.info("%s: %dx%d exceeds %d, using blocked SVD", name, *A.shape, DENSE_SVD_LIMIT)
        U, s, Vt = _blocked_svd(A)
    else:
        U, s, Vt = _dense_svd(A)
    U, Vt = _fix_signs(U, Vt)
    return U, s, Vt


def svd_topk(W: MatrixLike, k: int) -> SpectralSummary:
    A = as_float64(W)
    limit = min(A.shape) if A.ndim == 2 else 0
    if not 1 <= k < limit:
        raise ConfigError(f"{layer_name_of(W, 'matrix')}: k must satisfy 1 <= k < {limit}, got {k}")
    U, s, Vt = _svd_array(A, layer_name_of(W, "matrix"))
    U_k, V_k = U[:, :k].copy(), Vt[:k].T.copy()
    for arr in (s, U_k, V_k):
        arr.setflags(write=False)
    return SpectralSummary(layer_name_of(W), k, s, U_k, V_k)


class PrincipalAngles(NamedTuple):
    left: np.ndarray
    right: np.ndarray

    @property
    def max_left(self) -> float:
        return float(self.left[-1])

    @property
    def max_right(self) -> float:
        return float(self.right[-1])


def subspace_angles_between(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Principal angles between the column spans of A and B, non-decreasing."""
    if A.shape[0] != B.shape[0]:
        raise ShapeError(f"ambient dimensions differ: {A.shape[0]} vs {B.shape[0]}")
    return np.sort(linalg.subspace_angles(A, B))


def principal_angles(S0: SpectralSummary, S1: SpectralSummary) -> PrincipalAngles:
    if S0.k != S1.k:
        raise ConfigError(f"subspace ranks differ: k={S0.k} vs k={S1.k}")
    return PrincipalAngles(subspace_angles_between(S0.U_k, S1.U_k), subspace_angles_between(S0.V_k, S1.V_k))


def nss(sigma0: Sequence[float], sigma1: Sequence[float]) -> float:
    s0, s1 = np.asarray(sigma0, dtype=np.float64), np.asarray(sigma1, dtype=np.float64)
    if s0.shape != s1.shape:
        raise ShapeError(f"spectra have different lengths: {s0.size} vs {s1.size}")
    base = np.linalg.norm(s0)
    if base == 0:
        raise DomainError("NSS is undefined for a zero base spectrum")
    return float(np.linalg.norm(s1 - s0) / base)


def kyfan_drift(sigma0: Sequence[float], sigma1: Sequence[float], k: int) -> float:
    s0, s1 = np.asarray(sigma0, dtype=np.float64), np.asarray(sigma1, dtype=np.float64)
    if not 1 <= k <= min(s0.size, s1.size):
        raise ConfigError(f"Ky Fan k must lie in [1, {min(s0.size, s1.size)}], got {k}")
    return float(abs(s1[:k].sum() - s0[:k].sum()))


@dataclass
class DriftReport:
    layer_name: str
    k: int
    angles_left: List[float]
    angles_right: List[float]
    nss_full: float
    nss_topk: float
    kyfan: Dict[int, float]
    weyl_max: float
    hoffman_wielandt: float
    gap0: float
    gap1: float

    @property
    def max_angle_left(self) -> float:
        return self.angles_left[-1]

    @property
    def max_angle_right(self) -> float:
        return self.angles_right[-1]

    def to_dict(self) -> dict:
        return {
            "name": self.layer_name,
            "k": self.k,
            "max_angle_left_deg": float(np.degrees(self.max_angle_left)),
            "max_angle_right_deg": float(np.degrees(self.max_angle_right)),
            "nss_full": self.nss_full,
            "nss_topk": self.nss_topk,
            "kyfan": {str(k): v for k, v in sorted(self.kyfan.items())},
            "weyl_max": self.weyl_max,
            "hoffman_wielandt": self.hoffman_wielandt,
            "gap0": self.gap0,
            "gap1": self.gap1,
        }


def drift_report(W0: MatrixLike, W1: MatrixLike, k: int = DEFAULT_K,
                 kyfan_ks: Optional[Sequence[int]] = None) -> DriftReport:
    """
    Spectral drift of one layer. NSS is given over the full spectrum and over
    the top-k values only.
    """
    A0, A1 = as_float64(W0), as_float64(W1)
    if A0.shape != A1.shape:
        raise ShapeError(f"{layer_name_of(W0)}: shape {A0.shape} does not match {A1.shape}")
    S0, S1 = svd_topk(W0, k), svd_topk(W1, k)
    angles = principal_angles(S0, S1)
    dsigma = S1.sigma - S0.sigma
    ks = sorted(set(kyfan_ks or [k]))
    return DriftReport(
        layer_name=layer_name_of(W0),
        k=k,
        angles_left=[float(a) for a in angles.left],
        angles_right=[float(a) for a in angles.right],
        nss_full=nss(S0.sigma, S1.sigma),
        nss_topk=nss(S0.sigma[:k], S1.sigma[:k]),
        kyfan={kk: kyfan_drift(S0.sigma, S1.sigma, kk) for kk in ks},
        weyl_max=float(np.abs(dsigma).max()),
        hoffman_wielandt=float(np.sum(dsigma ** 2)),
        gap0=S0.gap,
        gap1=S1.gap,
    )


@dataclass(frozen=True)
class BoundCheck:
    name: str
    lhs: float
    rhs: float
    holds: bool
    skipped: bool = False
    note: str = ""

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    def to_dict(self) -> dict:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "holds": self.holds,
                "skipped": self.skipped, "note": self.note}


@dataclass
class BoundReport:
    layer_name: str
    k: int
    checks: List[BoundCheck]

    @property
    def violations(self) -> List[BoundCheck]:
        return [c for c in self.checks if not c.skipped and not c.holds]

    @property
    def passed(self) -> bool:
        return not self.violations

    def check(self, name: str) -> BoundCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(f"No check named {name}")

    def to_dict(self) -> dict:
        return {"name": self.layer_name, "k": self.k, "passed": self.passed,
                "checks": [c.to_dict() for c in self.checks]}


def _leq(name: str, lhs: float, rhs: float, atol: float, note: str = "") -> BoundCheck:
    return BoundCheck(name, float(lhs), float(rhs), bool(lhs <= rhs * (1 + RELATIVE_SLACK) + atol), note=note)


def wedin_gap(sigma0: np.ndarray, sigma1: np.ndarray, k: int) -> float:
    """delta = max(sigma_k(W1) - sigma_{k+1}(W0), sigma_k(W0) - sigma_{k+1}(W1))"""
    return float(max(sigma1[k - 1] - sigma0[k], sigma0[k - 1] - sigma1[k]))


def verify_perturbation_bounds(W0: MatrixLike, Delta: MatrixLike, k: int) -> BoundReport:
    """
    Evaluate both sides of each perturbation inequality for W1 = W0 + Delta.

    Wedin is checked in its classical form sin(theta) <= ||Delta||_2 / delta.
    The simpler ||Delta||_2 / gamma_k(W0) value is carried in the check's
    note. When gamma_k(W0) = 0 or delta <= 0 the Wedin checks are skipped.
    """
    A0, D = as_float64(W0), as_float64(Delta)
    if A0.shape != D.shape:
        raise ShapeError(f"{layer_name_of(W0)}: W0 {A0.shape} and Delta {D.shape} differ")
    A1 = A0 + D
    S0, S1 = svd_topk(A0, k), svd_topk(A1, k)
    s0, s1 = S0.sigma, S1.sigma
    op = float(linalg.svdvals(D)[0]) if D.size else 0.0
    frob = float(np.linalg.norm(D))
    scale = float(s0[0] + s1[0])
    eps = np.finfo(np.float64).eps
    atol_sigma = 64 * eps * max(scale, 1.0)
    dsigma = s1 - s0

    checks: List[BoundCheck] = []
    angles = principal_angles(S0, S1)
    sin_left, sin_right = float(np.sin(angles.max_left)), float(np.sin(angles.max_right))
    try:
        if S0.gap <= 0:
            raise GapError(f"{layer_name_of(W0)}: gamma_{k}(W0) = 0")
        delta = wedin_gap(s0, s1, k)
        if delta <= 0:
            raise GapError(f"{layer_name_of(W0)}: Wedin gap delta = {delta:.3e} is not positive")
        rhs = op / delta
        note = f"gamma_k form ||Delta||_2/gamma_k(W0) = {op / S0.gap!r}"
        checks.append(_leq("wedin_left", sin_left, rhs, 1e-10, note))
        checks.append(_leq("wedin_right", sin_right, rhs, 1e-10, note))
    except GapError as e:
        logger.warning("Skipping Wedin check: %s", e)
        for name, lhs in (("wedin_left", sin_left), ("wedin_right", sin_right)):
            checks.append(BoundCheck(name, lhs, float("inf"), True, skipped=True, note=str(e)))

    checks.append(_leq("weyl", float(np.abs(dsigma).max()), op, atol_sigma))
    checks.append(_leq("hoffman_wielandt", float(np.sum(dsigma ** 2)), frob ** 2, atol_sigma * scale))
    checks.append(_leq("kyfan", kyfan_drift(s0, s1, k), k * op, k * atol_sigma))
    checks.append(_leq("op_le_frob", op, frob, atol_sigma))

    projector_gap = float(linalg.svdvals(S0.U_k @ S0.U_k.T - S1.U_k @ S1.U_k.T)[0])
    checks.append(BoundCheck("projection_stability", projector_gap, sin_left,
                             bool(abs(projector_gap - sin_left) <= 1e-8), note="identity ||P0 - P1||_2 = ||sin theta||_2"))
    return BoundReport(layer_name_of(W0), k, checks)


def run_bound_trials(trials: int, size: int, k: int, seed: int, progress: bool = False) -> dict:
    """
    Verify the perturbation inequalities on random square (W0, Delta) pairs.
    Perturbation scales are drawn log-uniformly so both small and large
    rotations are exercised.
    """
    if trials < 1:
        raise ConfigError(f"trials must be positive, got {trials}")
    rng = np.random.default_rng(seed)
    violations: Dict[str, int] = {}
    skipped: Dict[str, int] = {}
    worst_ratio: Dict[str, float] = {}
    for _ in tqdm(range(trials), desc=f"Bounds {size}x{size}", disable=not progress):
        W0 = rng.standard_normal((size, size))
        Delta = 10.0 ** rng.uniform(-4, 0) * rng.standard_normal((size, size))
        report = verify_perturbation_bounds(W0, Delta, k)
        for c in report.checks:
            violations.setdefault(c.name, 0)
            skipped.setdefault(c.name, 0)
            if c.skipped:
                skipped[c.name] += 1
                continue
            if not c.holds:
                violations[c.name] += 1
            if c.name != "projection_stability" and c.rhs > 0:
                worst_ratio[c.name] = max(worst_ratio.get(c.name, 0.0), c.lhs / c.rhs)
    total = sum(violations.values())
    logger.info("%d bound trials at %dx%d, k=%d: %d violations", trials, size, size, k, total)
    return {
        "trials": trials,
        "size": size,
        "k": k,
        "seed": seed,
        "violations": violations,
        "skipped": skipped,
        "worst_lhs_over_rhs": worst_ratio,
        "total_violations": total,
    }
