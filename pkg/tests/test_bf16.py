import numpy as np
import pytest

from weightlens.bf16 import (
    ETA_CEILING,
    Bf16Word,
    ProbeConfig,
    ZeroPolicy,
    absolute_unchanged,
    bf16_unchanged,
    binade_gap_sweep,
    decode_bf16,
    encode_bf16,
    normalized_codes,
    realization_threshold,
    relative_ulp,
    soundness_sweep,
    ulp_bf16,
)
from weightlens.errors import ConfigError, DomainError


# Encoding

def test_encode_exact_values():
    assert int(encode_bf16(1.0)) == 0x3F80
    assert int(encode_bf16(-2.0)) == 0xC000
    assert int(encode_bf16(0.0)) == 0x0000
    assert int(encode_bf16(-0.0)) == 0x8000


def test_encode_rounds_to_nearest_even():
    # 1 + 2^-8 sits halfway between 1 and 1 + 2^-7; the even neighbour is 1.
    assert int(encode_bf16(1.0 + 2.0 ** -8)) == 0x3F80
    # 1 + 3 * 2^-8 sits halfway between 1 + 2^-7 and 1 + 2^-6; the even neighbour is 1 + 2^-6.
    assert int(encode_bf16(1.0 + 3 * 2.0 ** -8)) == 0x3F82


def test_encode_avoids_double_rounding():
    # Just above the halfway point in float64 but exactly halfway after a float32 rounding.
    x = 1.0 + 2.0 ** -8 + 2.0 ** -40
    assert int(encode_bf16(x)) == 0x3F81


def test_encode_nan_stays_nan():
    assert np.isnan(decode_bf16(encode_bf16(float("nan"))))


def test_decode_round_trip_over_normalized_codes():
    codes = normalized_codes()
    np.testing.assert_array_equal(encode_bf16(decode_bf16(codes)), codes)


def test_bf16_word_fields():
    word = Bf16Word.from_float(-1.5)
    assert word.sign == 1
    assert word.exponent == 127
    assert word.mantissa == 0x40
    assert word.value == -1.5
    assert word.is_normal() and word.is_finite() and not word.is_zero()
    assert Bf16Word(0x8000).is_zero()
    assert Bf16Word(0x7FC0).is_nan()
    with pytest.raises(DomainError):
        Bf16Word(0x10000)


# ULP and thresholds

def test_ulp_examples():
    assert ulp_bf16(encode_bf16(1024.0)) == 8.0
    assert ulp_bf16(encode_bf16(2.0 ** -20)) == 2.0 ** -27
    assert ulp_bf16(encode_bf16(1.0)) == 2.0 ** -7
    assert realization_threshold(encode_bf16(1024.0)) == 4.0


def test_ulp_of_zero_is_subnormal_spacing():
    assert ulp_bf16(0x0000) == 2.0 ** -133


def test_ulp_undefined_for_non_finite():
    with pytest.raises(DomainError):
        ulp_bf16(encode_bf16(float("inf")))


def test_relative_ulp_band():
    rel = relative_ulp(normalized_codes())
    assert rel.min() > 2.0 ** -8
    assert rel.max() == 2.0 ** -7


def test_relative_ulp_undefined_at_zero():
    with pytest.raises(DomainError):
        relative_ulp(0x8000)


def test_realization_threshold_band_over_one_binade():
    codes = np.arange(0x3F80, 0x4000, dtype=np.uint16)
    x = decode_bf16(codes).astype(np.float64)
    assert x.min() == 1.0 and x.max() < 2.0
    rel = realization_threshold(codes) / x
    assert np.all(rel > 2.0 ** -9)
    assert np.all(rel <= 2.0 ** -8)
    assert rel[0] == 2.0 ** -8


def test_realization_threshold_band_over_every_normalized_code():
    codes = normalized_codes()
    rel = realization_threshold(codes) / np.abs(decode_bf16(codes).astype(np.float64))
    assert rel.min() > 0.00195
    assert rel.max() <= 0.00391


def test_binade_gap_is_above_eta_ceiling():
    gap = binade_gap_sweep()
    assert gap == pytest.approx(2.0 ** -8)
    assert gap > ETA_CEILING


# The unchanged-weight predicate

def test_large_weights_below_resolution_are_unchanged():
    a, b = encode_bf16(1024.001), encode_bf16(1024.002)
    assert bf16_unchanged(a, b)
    # The fixed absolute rule wrongly calls this a change.
    assert not absolute_unchanged(1024.001, 1024.002)


def test_small_weights_that_move_are_changed():
    a, b = encode_bf16(1e-6), encode_bf16(2e-6)
    assert not bf16_unchanged(a, b)
    # The fixed absolute rule wrongly calls this unchanged.
    assert absolute_unchanged(1e-6, 2e-6)


def test_signed_zeros_are_unchanged():
    assert bf16_unchanged(0x0000, 0x8000)


def test_zero_against_subnormal_depends_on_policy():
    subnormal = 0x0001
    assert not bf16_unchanged(0x0000, subnormal)
    assert bf16_unchanged(0x0000, subnormal, ProbeConfig(zero_policy=ZeroPolicy.FLUSH_SUBNORMALS))


def test_nan_is_always_changed():
    nan = int(encode_bf16(float("nan")))
    assert not bf16_unchanged(nan, nan)


def test_infinities_compare_bitwise():
    inf = int(encode_bf16(float("inf")))
    assert bf16_unchanged(inf, inf)
    assert not bf16_unchanged(inf, int(encode_bf16(-float("inf"))))


def test_predicate_is_symmetric_on_arrays():
    rng = np.random.default_rng(3)
    a = encode_bf16(rng.standard_normal(1000))
    b = np.where(rng.random(1000) < 0.5, a, encode_bf16(rng.standard_normal(1000)))
    np.testing.assert_array_equal(bf16_unchanged(a, b), bf16_unchanged(b, a))
    np.testing.assert_array_equal(bf16_unchanged(a, b), a == b)


def test_soundness_sweep_has_no_disagreements():
    pairs, disagreements = soundness_sweep()
    assert pairs > 2 * len(normalized_codes()) - 1000
    assert disagreements == 0


def test_soundness_sweep_holds_for_small_eta():
    assert soundness_sweep(ProbeConfig(eta=1e-6))[1] == 0


# Configuration

@pytest.mark.parametrize("eta", [0.0, -1e-3, ETA_CEILING, 0.01])
def test_eta_out_of_range(eta):
    with pytest.raises(ConfigError, match="eta must lie in"):
        ProbeConfig(eta=eta)


def test_zero_policy_from_string():
    assert ProbeConfig(zero_policy="flush_subnormals").zero_policy is ZeroPolicy.FLUSH_SUBNORMALS
