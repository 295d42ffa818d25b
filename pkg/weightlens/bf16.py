"""
Bit-exact bfloat16 numerics.

Anatomy of bfloat16:

    SEEE EEEE EMMM MMMM

Stored weights are handled as raw uint16 codes. Decoding places the code in
the upper half of a float32 word; encoding from float64 rounds to odd into
float32 first (which keeps a sticky bit) and then rounds to nearest-even into
the 7-bit mantissa, so the result is correctly rounded without double
rounding.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np

from weightlens.errors import ConfigError, DomainError

logger = logging.getLogger(__name__)

MANTISSA_BITS = 7
EXPONENT_BIAS = 127
# Relative tolerances at or above this can merge two adjacent codes.
ETA_CEILING = 2.0 ** -9
SUBNORMAL_SPACING = 2.0 ** (1 - EXPONENT_BIAS - MANTISSA_BITS)

_SIGN_MASK = 0x8000
_MAGNITUDE_MASK = 0x7FFF
_EXP_FIELD_MAX = 0xFF

CodeLike = Union["Bf16Word", int, np.integer, np.ndarray]


class ZeroPolicy(str, Enum):
    # +0 and -0 are unchanged; zero against any nonzero code is changed.
    BITWISE = "bitwise"
    # Subnormals compare as signed zero, so (0, tiny) is unchanged.
    FLUSH_SUBNORMALS = "flush_subnormals"


@dataclass(frozen=True)
class ProbeConfig:
    eta: float = 1e-3
    zero_policy: ZeroPolicy = ZeroPolicy.BITWISE

    def __post_init__(self):
        if not (0.0 < self.eta < ETA_CEILING):
            raise ConfigError(
                f"eta must lie in (0, 2^-9 = {ETA_CEILING:.6g}); got {self.eta!r}"
            )
        object.__setattr__(self, "zero_policy", ZeroPolicy(self.zero_policy))


@dataclass(frozen=True)
class Bf16Word:
    bits: int

    def __post_init__(self):
        if not 0 <= int(self.bits) <= 0xFFFF:
            raise DomainError(f"bf16 code out of range: {self.bits!r}")
        object.__setattr__(self, "bits", int(self.bits))

    @classmethod
    def from_float(cls, x: float) -> "Bf16Word":
        return cls(int(encode_bf16(x)))

    @property
    def sign(self) -> int:
        return self.bits >> 15

    @property
    def exponent(self) -> int:
        return (self.bits >> MANTISSA_BITS) & _EXP_FIELD_MAX

    @property
    def mantissa(self) -> int:
        return self.bits & 0x7F

    @property
    def value(self) -> float:
        return float(decode_bf16(self.bits))

    def is_nan(self) -> bool:
        return self.exponent == _EXP_FIELD_MAX and self.mantissa != 0

    def is_finite(self) -> bool:
        return self.exponent != _EXP_FIELD_MAX

    def is_zero(self) -> bool:
        return self.bits & _MAGNITUDE_MASK == 0

    def is_normal(self) -> bool:
        return 0 < self.exponent < _EXP_FIELD_MAX

    def __float__(self) -> float:
        return self.value


def _codes(x: CodeLike) -> np.ndarray:
    if isinstance(x, Bf16Word):
        return np.asarray(x.bits, dtype=np.uint16)
    arr = np.asarray(x)
    if arr.dtype != np.uint16:
        if arr.dtype.kind not in "ui":
            raise DomainError(f"expected bf16 codes (uint16), got dtype {arr.dtype}")
        arr = arr.astype(np.uint16)
    return arr


def _is_scalar(x) -> bool:
    return isinstance(x, (Bf16Word, int, np.integer)) or np.ndim(x) == 0


def _exponent_field(codes: np.ndarray) -> np.ndarray:
    return (codes >> MANTISSA_BITS) & _EXP_FIELD_MAX


def encode_bf16(values) -> np.ndarray:
    """
    Round float values to bfloat16 codes (round-to-nearest-even).

    :param values: Scalar or array of floats (any float dtype)
    :return: uint16 array of bf16 codes with the input's shape
    """
    x = np.asarray(values, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        f = x.astype(np.float32)
        back = f.astype(np.float64)
        inexact = np.isfinite(x) & (back != x)
        overshoot = inexact & (np.abs(back) > np.abs(x))
    f = np.where(overshoot, np.nextafter(f, np.float32(0)), f).astype(np.float32)
    bits = np.ascontiguousarray(f).view(np.uint32).astype(np.uint64)
    # Round to odd: the forced low bit acts as the sticky bit for the next step.
    bits = np.where(inexact, bits | 1, bits)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    quiet_nan = (bits >> 16) | 0x0040
    return np.where(np.isnan(x), quiet_nan, rounded).astype(np.uint16)


def decode_bf16(codes: CodeLike) -> np.ndarray:
    c = _codes(codes)
    return np.ascontiguousarray(c.astype(np.uint32) << 16).view(np.float32)


def ulp_bf16(x: CodeLike):
    """
    Spacing between adjacent bf16 values at the magnitude of ``x``.

    Returns 2^(e-7) for |x| in [2^e, 2^(e+1)). Zero and subnormal codes share
    the fixed subnormal spacing 2^-133.
    """
    codes = _codes(x)
    exp = _exponent_field(codes).astype(np.int64)
    if np.any(exp == _EXP_FIELD_MAX):
        raise DomainError("ULP is undefined for NaN or infinite bf16 codes")
    spacing = np.where(
        exp == 0,
        SUBNORMAL_SPACING,
        np.ldexp(1.0, exp - EXPONENT_BIAS - MANTISSA_BITS),
    )
    return float(spacing) if _is_scalar(x) else spacing


def realization_threshold(x: CodeLike):
    """Smallest additive step that can flip the stored code of ``x``."""
    return 0.5 * ulp_bf16(x)


def relative_ulp(x: CodeLike):
    codes = _codes(x)
    if np.any(codes & _MAGNITUDE_MASK == 0):
        raise DomainError("relative ULP is undefined at zero")
    rel = ulp_bf16(codes) / np.abs(decode_bf16(codes).astype(np.float64))
    return float(rel) if _is_scalar(x) else rel


def _flush_subnormals(codes: np.ndarray) -> np.ndarray:
    return np.where(_exponent_field(codes) == 0, codes & _SIGN_MASK, codes).astype(np.uint16)


def bf16_unchanged(w: CodeLike, w_hat: CodeLike, cfg: ProbeConfig = ProbeConfig()):
    """
    Scale-aware unchanged-weight predicate.

    Normalized pairs use |w_hat - w| <= eta * max(|w|, |w_hat|); for
    eta < 2^-9 this is exactly bitwise equality. Zero, subnormal and infinite
    codes fall back to bit semantics (+0 equals -0). NaN is always changed.
    """
    a, b = _codes(w), _codes(w_hat)
    if cfg.zero_policy is ZeroPolicy.FLUSH_SUBNORMALS:
        a, b = _flush_subnormals(a), _flush_subnormals(b)
    va = decode_bf16(a).astype(np.float64)
    vb = decode_bf16(b).astype(np.float64)
    ea, eb = _exponent_field(a), _exponent_field(b)
    normal = (ea > 0) & (ea < _EXP_FIELD_MAX) & (eb > 0) & (eb < _EXP_FIELD_MAX)
    with np.errstate(invalid="ignore"):
        relative = np.abs(vb - va) <= cfg.eta * np.maximum(np.abs(va), np.abs(vb))
    both_zero = ((a & _MAGNITUDE_MASK) == 0) & ((b & _MAGNITUDE_MASK) == 0)
    bitwise = (a == b) | both_zero
    nan = np.isnan(va) | np.isnan(vb)
    result = np.where(normal, relative, bitwise) & ~nan
    return bool(result) if _is_scalar(w) and _is_scalar(w_hat) else result


def absolute_unchanged(w, w_hat, atol: float = 1e-5):
    """The fixed absolute-tolerance rule |w_hat - w| <= atol, on float values."""
    a = np.asarray(w, dtype=np.float64)
    b = np.asarray(w_hat, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        result = np.abs(b - a) <= atol
    return bool(result) if result.ndim == 0 else result


def normalized_codes(positive_only: bool = False) -> np.ndarray:
    """All normalized (finite, nonzero, non-subnormal) bf16 codes in code order."""
    codes = np.arange(0x10000, dtype=np.uint32).astype(np.uint16)
    exp = _exponent_field(codes)
    keep = (exp > 0) & (exp < _EXP_FIELD_MAX)
    if positive_only:
        keep &= (codes & _SIGN_MASK) == 0
    return codes[keep]


def soundness_sweep(cfg: ProbeConfig = ProbeConfig()) -> Tuple[int, int]:
    """
    Compare the relative probe with bit equality over every normalized code
    paired with itself and with its successor code.

    :return: (pairs checked, disagreements)
    """
    codes = normalized_codes()
    successors = (codes.astype(np.uint32) + 1).astype(np.uint16)
    exp = _exponent_field(successors)
    same_sign = (successors & _SIGN_MASK) == (codes & _SIGN_MASK)
    ok = (exp > 0) & (exp < _EXP_FIELD_MAX) & same_sign
    left = np.concatenate([codes, codes[ok]])
    right = np.concatenate([codes, successors[ok]])
    predicted = bf16_unchanged(left, right, cfg)
    disagreements = int(np.count_nonzero(predicted != (left == right)))
    logger.debug("soundness sweep: %d pairs, %d disagreements", left.size, disagreements)
    return int(left.size), disagreements


def binade_gap_sweep() -> float:
    """
    Smallest relative gap |x - y| / max(|x|, |y|) between successive positive
    normalized codes, taken over every binade and across binade boundaries.
    """
    values = decode_bf16(normalized_codes(positive_only=True)).astype(np.float64)
    gaps = np.diff(values) / values[1:]
    return float(gaps.min())
