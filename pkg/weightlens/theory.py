"""
Numerical checks of KL geometry on categorical softmax policies: Fisher
information, the quadratic expansion of KL, the KL bound implied by ratio
clipping, exponential tilting, and Fisher-based weight bounds.

Only categorical policies are covered; there the Fisher matrix and KL are
exact, so every check is a direct comparison rather than an estimate.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import log_softmax, logsumexp, rel_entr, softmax
from tqdm import tqdm

from weightlens.errors import ClipViolation, ConfigError, DomainError, NumericsError

logger = logging.getLogger(__name__)

DEFAULT_SCALES = tuple(np.geomspace(1e-1, 1e-4, 13))
SLOPE_RANGE = (0.8, 1.5)
SCOPE_NOTE = "categorical softmax policies with logit parameters only"

# Directions kept by random_kl_trial.
MIN_SKEW = 0.25
MAX_KURT_PER_SKEW = 5.0
MAX_SPREAD = 4.0
DIRECTION_SELECTION = (f"directions with |skewness| >= {MIN_SKEW}, "
                       f"|excess kurtosis| <= {MAX_KURT_PER_SKEW:g} |skewness| "
                       f"and no direction entry more than {MAX_SPREAD:g} standard deviations from its policy mean")


@dataclass(frozen=True)
class CategoricalPolicy:
    logits: np.ndarray = field(repr=False)

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64).ravel()
        if logits.size < 1 or not np.all(np.isfinite(logits)):
            raise NumericsError("policy logits must be a non-empty finite vector")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        if np.any(self.probs <= 0):
            raise DomainError("logit spread too large: some probabilities underflow to zero")

    @classmethod
    def from_probs(cls, probs: Sequence[float]) -> "CategoricalPolicy":
        p = np.asarray(probs, dtype=np.float64)
        if np.any(p <= 0) or not math.isclose(float(p.sum()), 1.0, abs_tol=1e-12):
            raise DomainError("probabilities must be positive and sum to 1")
        return cls(np.log(p))

    @property
    def n(self) -> int:
        return self.logits.size

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)

    def shifted(self, delta: np.ndarray) -> "CategoricalPolicy":
        return CategoricalPolicy(self.logits + np.asarray(delta, dtype=np.float64))


def categorical_fisher(p: CategoricalPolicy) -> np.ndarray:
    """F = diag(p) - p p^T, the Fisher information in logit coordinates."""
    probs = p.probs
    return np.diag(probs) - np.outer(probs, probs)


def fisher_finite_difference(p: CategoricalPolicy, h: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian of logsumexp at the policy's logits."""
    n = p.n
    H = np.empty((n, n))
    E = np.eye(n) * h
    for i in range(n):
        for j in range(n):
            H[i, j] = (logsumexp(p.logits + E[i] + E[j]) - logsumexp(p.logits + E[i] - E[j])
                       - logsumexp(p.logits - E[i] + E[j]) + logsumexp(p.logits - E[i] - E[j])) / (4 * h * h)
    return H


def kl_categorical(p: CategoricalPolicy, q: CategoricalPolicy) -> float:
    """sum_i p_i log(p_i / q_i)"""
    if p.n != q.n:
        raise DomainError(f"policies have different support sizes: {p.n} vs {q.n}")
    return float(np.sum(rel_entr(p.probs, q.probs)))


def _kl_shift(p: CategoricalPolicy, delta: np.ndarray) -> float:
    """KL(pi_{theta+delta} || pi_theta) computed from log-probabilities."""
    log_p1 = log_softmax(p.logits + delta)
    return float(np.sum(np.exp(log_p1) * (log_p1 - p.log_probs)))


@dataclass
class QuadraticKLCurve:
    scales: List[float]
    ratios: List[float]
    quadratic_form: float
    slope: float

    @property
    def converges(self) -> bool:
        return SLOPE_RANGE[0] <= self.slope <= SLOPE_RANGE[1]

    def to_dict(self) -> dict:
        return {"scales": self.scales, "ratios": self.ratios, "quadratic_form": self.quadratic_form,
                "slope": self.slope}


def quadratic_kl_check(p: CategoricalPolicy, direction: Sequence[float],
                       scales: Sequence[float] = DEFAULT_SCALES) -> QuadraticKLCurve:
    """
    ratio(s) = KL(theta + s*d || theta) / (0.5 * s^2 * d^T F d) for each scale,
    with the log-log slope of |ratio - 1| against s.

    :raises DomainError: when ``direction`` lies in the null space of F
    """
    d = np.asarray(direction, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)
    if d.shape != (p.n,):
        raise DomainError(f"direction must have {p.n} entries, got shape {d.shape}")
    if s.size < 2 or np.any(s <= 0) or np.any(np.diff(s) >= 0):
        raise ConfigError("scales must be positive and strictly decreasing")
    quad = float(d @ categorical_fisher(p) @ d)
    if quad <= 1e-14 * float(d @ d):
        raise DomainError("direction lies in the Fisher null space (constant shift of the logits)")
    ratios = np.array([_kl_shift(p, si * d) / (0.5 * si * si * quad) for si in s])
    excess = np.abs(ratios - 1.0)
    usable = excess > 0
    slope = float(np.polyfit(np.log(s[usable]), np.log(excess[usable]), 1)[0]) if usable.sum() >= 2 else float("nan")
    return QuadraticKLCurve([float(x) for x in s], [float(r) for r in ratios], quad, slope)


def direction_cumulants(p: CategoricalPolicy, direction: Sequence[float]):
    """Variance, skewness and excess kurtosis of the direction under p."""
    d = np.asarray(direction, dtype=np.float64)
    probs = p.probs
    centered = d - probs @ d
    k2 = float(probs @ centered ** 2)
    if k2 <= 0:
        return 0.0, 0.0, 0.0
    return k2, float(probs @ centered ** 3) / k2 ** 1.5, float(probs @ centered ** 4) / k2 ** 2 - 3.0


def random_kl_trial(rng: np.random.Generator, n: int, max_draws: int = 1000):
    """
    A random (policy, unit-variance direction) pair whose leading KL
    remainder is first order: the skewness of the direction is at least
    0.25 and large against the excess kurtosis. Without skew the remainder
    starts at second order.
    """
    for _ in range(max_draws):
        policy = CategoricalPolicy(rng.standard_normal(n))
        d = rng.standard_normal(n)
        k2, skew, kurt = direction_cumulants(policy, d)
        if k2 <= 1e-8:
            continue
        spread = np.abs(d - policy.probs @ d).max() / math.sqrt(k2)
        if abs(skew) >= MIN_SKEW and abs(kurt) <= MAX_KURT_PER_SKEW * abs(skew) and spread <= MAX_SPREAD:
            return policy, d / math.sqrt(k2)
    raise NumericsError(f"no usable direction found in {max_draws} draws for n={n}")


class ClipLeash(NamedTuple):
    empirical: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.empirical <= self.bound


def clip_leash_bound(ratios: Sequence[float], epsilon: float, T: Optional[int] = None) -> ClipLeash:
    """
    Per-sequence KL leash implied by clipping importance ratios to [1-eps, 1+eps]:
    sum_t |log r_t| <= T * max(-log(1-eps), log(1+eps)).
    """
    if not 0.0 < epsilon < 1.0:
        raise ConfigError(f"epsilon must lie in (0, 1), got {epsilon}")
    r = np.asarray(ratios, dtype=np.float64)
    T = r.size if T is None else T
    if r.size > T:
        raise ConfigError(f"{r.size} ratios exceed the token count T={T}")
    outside = (r < 1.0 - epsilon) | (r > 1.0 + epsilon)
    if np.any(outside):
        bad = float(r[outside][0])
        raise ClipViolation(f"ratio {bad!r} lies outside the clip interval [{1 - epsilon}, {1 + epsilon}]")
    bound = T * max(-math.log(1.0 - epsilon), math.log(1.0 + epsilon))
    return ClipLeash(float(np.sum(np.abs(np.log(r)))), bound)


def clip_epsilon_trend(epsilons: Sequence[float], T: int = 256, batches: int = 200, seed: int = 0) -> dict:
    """
    Mean per-token KL estimate (r - 1 - log r) for ratios drawn uniformly in
    the clip interval, with its log-log slope against epsilon. Reported only.
    """
    rng = np.random.default_rng(seed)
    eps = np.asarray(sorted(epsilons), dtype=np.float64)
    estimates = []
    for e in eps:
        r = rng.uniform(1.0 - e, 1.0 + e, size=(batches, T))
        estimates.append(float(np.mean(r - 1.0 - np.log(r))))
    slope = float(np.polyfit(np.log(eps), np.log(estimates), 1)[0]) if eps.size >= 2 else float("nan")
    logger.info("clip KL trend: slope %.3f over epsilon in [%g, %g]", slope, eps[0], eps[-1])
    return {"epsilons": [float(e) for e in eps], "kl_per_token": estimates, "slope": slope}


def tilt(q: Sequence[float], rewards: Sequence[float], beta: float) -> np.ndarray:
    """q * exp(R / beta), renormalized."""
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise DomainError("reference distribution must have full support")
    return softmax(np.log(q) + np.asarray(rewards, dtype=np.float64) / beta)


def regularized_objective(pi: np.ndarray, q: np.ndarray, rewards: np.ndarray, beta: float) -> np.ndarray:
    """E_pi[R] - beta * KL(pi || q), row-wise for a stack of distributions."""
    return pi @ rewards - beta * np.sum(rel_entr(pi, q), axis=-1)


def simplex_grid(n: int, steps: int) -> np.ndarray:
    """All points of the probability simplex with coordinates in multiples of 1/steps."""
    points = []
    for bars in itertools.combinations(range(steps + n - 1), n - 1):
        edges = (-1,) + bars + (steps + n - 1,)
        points.append([edges[i + 1] - edges[i] - 1 for i in range(n)])
    return np.asarray(points, dtype=np.float64) / steps


class TiltCheck(NamedTuple):
    tilt_value: float
    best_grid_value: float
    grid_points: int

    @property
    def holds(self) -> bool:
        return self.tilt_value >= self.best_grid_value - 1e-12


def verify_tilting_argmax(q: Sequence[float], rewards: Sequence[float], beta: float,
                          steps: Optional[int] = None) -> TiltCheck:
    """The tilted distribution must beat every simplex grid point on the regularized objective."""
    q = np.asarray(q, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    n = q.size
    if not 1 <= n <= 8:
        raise ConfigError(f"brute-force tilting check supports 1 <= N <= 8, got {n}")
    steps = steps or {1: 1, 2: 400, 3: 120, 4: 48}.get(n, 14)
    grid = simplex_grid(n, steps)
    best = float(regularized_objective(grid, q, rewards, beta).max())
    value = float(regularized_objective(tilt(q, rewards, beta), q, rewards, beta))
    return TiltCheck(value, best, grid.shape[0])


class WeightBound(NamedTuple):
    norm: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.norm <= self.bound * (1 + 1e-9)


def fisher_weight_bound_check(F: np.ndarray, delta: Sequence[float]) -> WeightBound:
    """
    With K = 0.5 * d^T F d and mu the smallest eigenvalue of F,
    ||d||_2 <= sqrt(2K / mu).
    """
    F = np.asarray(F, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    mu = float(linalg.eigvalsh(F)[0])
    if mu <= 0:
        raise DomainError(f"F must be positive definite, smallest eigenvalue is {mu!r}")
    K = 0.5 * float(d @ F @ d)
    return WeightBound(float(np.linalg.norm(d)), math.sqrt(2 * K / mu))


def schur_layer_bound_check(F: np.ndarray, delta: Sequence[float], layer: Sequence[int]) -> WeightBound:
    """
    Layer-conditioned bound: with S the Schur complement of F on the layer's
    coordinates, ||d_layer||_2 <= sqrt(2K / lambda_min(S)) where K = 0.5 d^T F d.
    """
    F = np.asarray(F, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    idx = np.asarray(layer, dtype=np.int64)
    rest = np.setdiff1d(np.arange(F.shape[0]), idx)
    A = F[np.ix_(idx, idx)]
    if rest.size:
        B = F[np.ix_(idx, rest)]
        C = F[np.ix_(rest, rest)]
        S = A - B @ linalg.solve(C, B.T, assume_a="pos")
    else:
        S = A
    mu = float(linalg.eigvalsh(S)[0])
    if mu <= 0:
        raise DomainError(f"Schur complement is not positive definite (lambda_min = {mu!r})")
    K = 0.5 * float(d @ F @ d)
    return WeightBound(float(np.linalg.norm(d[idx])), math.sqrt(2 * K / mu))


def random_pd(rng: np.random.Generator, n: int, floor: float = 0.1) -> np.ndarray:
    A = rng.standard_normal((n, n))
    return A @ A.T / n + floor * np.eye(n)


def theory_scorecard(seed: int = 0, kl_trials: int = 100, clip_batches: int = 10_000,
                     bound_trials: int = 100, progress: bool = False) -> dict:
    """Run every check and collect pass/fail, fitted slopes and worst slacks."""
    rng = np.random.default_rng(seed)
    card: Dict[str, dict] = {"scope": {"note": SCOPE_NOTE}}

    fisher_errors, min_eigs, null_norms = [], [], []
    for n in (2, 3, 5, 8):
        p = CategoricalPolicy(rng.standard_normal(n))
        F = categorical_fisher(p)
        fisher_errors.append(float(np.abs(F - fisher_finite_difference(p)).max()))
        min_eigs.append(float(linalg.eigvalsh(F)[0]))
        null_norms.append(float(np.abs(F @ np.ones(n)).max()))
    card["fisher"] = {
        "formula": "F = diag(p) - p p^T",
        "max_finite_difference_error": max(fisher_errors),
        "min_eigenvalue": min(min_eigs),
        "max_null_residual": max(null_norms),
        "passed": max(fisher_errors) < 1e-6 and min(min_eigs) >= -1e-12 and max(null_norms) < 1e-12,
    }

    slopes, worst_final = [], 0.0
    for _ in tqdm(range(kl_trials), desc="KL expansion", disable=not progress):
        policy, direction = random_kl_trial(rng, int(rng.integers(2, 33)))
        curve = quadratic_kl_check(policy, direction)
        slopes.append(curve.slope)
        worst_final = max(worst_final, abs(curve.ratios[-1] - 1.0))
    card["quadratic_kl"] = {
        "formula": "KL(theta + s d || theta) / (0.5 s^2 d^T F d) -> 1, |ratio - 1| = O(s)",
        "direction_selection": DIRECTION_SELECTION,
        "trials": kl_trials,
        "min_slope": min(slopes),
        "max_slope": max(slopes),
        "worst_ratio_error_at_smallest_scale": worst_final,
        "passed": all(SLOPE_RANGE[0] <= s <= SLOPE_RANGE[1] for s in slopes),
    }

    violations, worst_slack = 0, math.inf
    for _ in range(clip_batches):
        eps = float(rng.uniform(0.05, 0.3))
        T = int(rng.integers(1, 1001))
        leash = clip_leash_bound(rng.uniform(1 - eps, 1 + eps, size=T), eps, T)
        violations += not leash.holds
        worst_slack = min(worst_slack, leash.bound - leash.empirical)
    card["clip_leash"] = {
        "formula": "sum_t |log r_t| <= T * max(-log(1 - eps), log(1 + eps))",
        "batches": clip_batches,
        "violations": violations,
        "worst_slack": worst_slack,
        "passed": violations == 0,
    }
    card["clip_trend"] = clip_epsilon_trend([0.01, 0.02, 0.05, 0.1, 0.2], seed=int(rng.integers(2 ** 31)))

    tilt_ok, worst_gap = True, math.inf
    for n in range(1, 9):
        q = rng.dirichlet(np.ones(n))
        check = verify_tilting_argmax(q, rng.standard_normal(n), float(rng.uniform(0.2, 2.0)))
        tilt_ok &= check.holds
        worst_gap = min(worst_gap, check.tilt_value - check.best_grid_value)
    card["tilting"] = {
        "formula": "argmax_pi E_pi[R] - beta KL(pi || q) = q exp(R / beta) / Z",
        "max_n": 8,
        "worst_margin": worst_gap,
        "passed": bool(tilt_ok),
    }

    fisher_ok = schur_ok = True
    for _ in range(bound_trials):
        n = int(rng.integers(2, 17))
        F = random_pd(rng, n)
        d = rng.standard_normal(n)
        fisher_ok &= fisher_weight_bound_check(F, d).holds
        layer = np.sort(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False))
        schur_ok &= schur_layer_bound_check(F, d, layer).holds
    card["fisher_weight_bound"] = {"formula": "||d|| <= sqrt(2K / mu)", "trials": bound_trials,
                                   "passed": bool(fisher_ok)}
    card["schur_layer_bound"] = {"formula": "||d_layer|| <= sqrt(2K / lambda_min(F / F_rest))",
                                 "trials": bound_trials, "passed": bool(schur_ok)}

    card["passed"] = all(v.get("passed", True) for k, v in card.items() if isinstance(v, dict))
    return card
