"""Software IEEE-754 binary16 conversion.

Conversion works on the raw float32 bit patterns with round-to-nearest-even,
so it does not depend on hardware half support. Values whose rounded
magnitude exceeds 65504 become signed infinity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HALF_MAX = 65504.0


@dataclass(frozen=True)
class HalfValue:
    bits: int
    overflow: bool = False
    underflow: bool = False

    @property
    def value(self) -> float:
        return float(half_bits_to_float(np.uint16(self.bits)))

    def is_inf(self) -> bool:
        return (self.bits & 0x7FFF) == 0x7C00


def float_to_half_bits(x) -> np.ndarray:
    """Rounds float32 values to binary16 bit patterns (uint16)."""
    f = np.asarray(x, dtype=np.float32).view(np.uint32).astype(np.int64)
    sign = (f >> 16) & 0x8000
    exp = (f >> 23) & 0xFF
    mant = f & 0x7FFFFF
    half_exp = exp - 127 + 15

    out = np.zeros_like(f)

    # normal range; a mantissa carry rolls into the exponent, and 30 -> 31 is inf
    normal = (exp != 0xFF) & (half_exp >= 1) & (half_exp <= 30)
    hm = mant >> 13
    rem = mant & 0x1FFF
    up = (rem > 0x1000) | ((rem == 0x1000) & ((hm & 1) == 1))
    out = np.where(normal, (half_exp << 10) + hm + up, out)

    overflow_range = (exp != 0xFF) & (half_exp > 30)
    out = np.where(overflow_range, 0x7C00, out)

    # subnormal halves: shift the full significand, rounding on the lost bits
    sub = (exp != 0xFF) & (exp != 0) & (half_exp < 1)
    shift = np.clip(14 - half_exp, 0, 40)
    sig = mant | 0x800000
    in_range = sub & (shift <= 24)
    safe_shift = np.where(in_range, shift, 1)
    hm_sub = sig >> safe_shift
    rem_sub = sig & ((np.int64(1) << safe_shift) - 1)
    halfway = np.int64(1) << (safe_shift - 1)
    up_sub = (rem_sub > halfway) | ((rem_sub == halfway) & ((hm_sub & 1) == 1))
    out = np.where(in_range, hm_sub + up_sub, out)
    # shift > 24 leaves less than half a subnormal step: rounds to zero (out stays 0)

    special = exp == 0xFF
    nan = special & (mant != 0)
    out = np.where(special & ~nan, 0x7C00, out)
    out = np.where(nan, 0x7E00 | (mant >> 13), out)

    return (out | sign).astype(np.uint16)


def half_bits_to_float(bits) -> np.ndarray:
    """Expands binary16 bit patterns to float32 (exact)."""
    h = np.asarray(bits, dtype=np.uint16).astype(np.int64)
    sign = (h & 0x8000) << 16
    exp = (h >> 10) & 0x1F
    mant = h & 0x3FF

    normal = (exp != 0) & (exp != 0x1F)
    out = np.where(normal, sign | ((exp - 15 + 127) << 23) | (mant << 13), 0)
    special = exp == 0x1F
    out = np.where(special, sign | 0x7F800000 | (mant << 13), out)

    sub = (exp == 0) & (mant != 0)
    # value = mant * 2^-24, exactly representable in float32
    sub_vals = np.ldexp(mant.astype(np.float64), -24).astype(np.float32)
    out = np.where(sub, sub_vals.view(np.uint32).astype(np.int64) | sign, out)
    out = np.where((exp == 0) & (mant == 0), sign, out)
    return out.astype(np.uint32).view(np.float32)


def round_half(x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rounds float32 values through binary16.

    Returns:
        (values as float32, overflow mask, underflow mask). Overflow marks finite
        inputs that became infinite, underflow marks nonzero inputs that became
        zero. NaN passes through without flags.
    """
    x = np.asarray(x, dtype=np.float32)
    bits = float_to_half_bits(x)
    values = half_bits_to_float(bits)
    overflow = np.isfinite(x) & np.isinf(values)
    underflow = (x != 0) & (values == 0)
    return values, overflow, underflow


def simulate_f16(x: float) -> HalfValue:
    """Converts one 32-bit float to binary16 and reports range flags."""
    x32 = np.float32(x)
    bits = int(float_to_half_bits(x32))
    rounded = half_bits_to_float(np.uint16(bits))
    overflow = bool(np.isfinite(x32) and np.isinf(rounded))
    underflow = bool(x32 != 0 and rounded == 0)
    return HalfValue(bits=bits, overflow=overflow, underflow=underflow)
