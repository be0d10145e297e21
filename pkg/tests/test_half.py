import numpy as np
from hypothesis import given, settings, strategies as st

from kernelpan.half import (HALF_MAX, float_to_half_bits, half_bits_to_float,
                            round_half, simulate_f16)


def test_exact_one():
    h = simulate_f16(1.0)
    assert h.value == 1.0 and not h.overflow and not h.underflow


def test_overflow_to_inf():
    h = simulate_f16(65520.0)
    assert h.is_inf() and h.value == np.inf and h.overflow


def test_max_finite_stays():
    h = simulate_f16(HALF_MAX)
    assert h.value == HALF_MAX and not h.overflow


def test_point_one():
    # 0.1 -> nearest binary16 is 1638 * 2^-14
    assert simulate_f16(0.1).value == 0.0999755859375
    assert 1638 * 2.0**-14 == 0.0999755859375


def test_underflow_flag():
    h = simulate_f16(1e-9)
    assert h.value == 0.0 and h.underflow


def test_nan_passes():
    assert np.isnan(simulate_f16(float("nan")).value)


def test_all_half_patterns_roundtrip():
    bits = np.arange(65536, dtype=np.uint16)
    vals = half_bits_to_float(bits)
    finite = ~np.isnan(vals)
    back = float_to_half_bits(vals[finite])
    np.testing.assert_array_equal(back, bits[finite])


def test_matches_hardware_half_on_random_floats():
    # numpy's float16 cast is an independent round-to-nearest-even implementation
    rng = np.random.default_rng(0)
    raw = rng.integers(0, 2**32, 200000, dtype=np.uint64).astype(np.uint32)
    x = raw.view(np.float32)
    x = x[~np.isnan(x)]
    with np.errstate(over="ignore"):
        ref = x.astype(np.float16).view(np.uint16)
    np.testing.assert_array_equal(float_to_half_bits(x), ref)


@settings(max_examples=200, deadline=None)
@given(st.floats(-70000, 70000, width=32))
def test_round_half_flags(x):
    v, over, under = round_half(np.float32(x))
    assert bool(over) == (np.isinf(v) and np.isfinite(x))
    assert bool(under) == (v == 0 and x != 0)
