"""Asymmetric uniform quantization primitives.

A tensor is clipped to ``[a, b]`` and mapped onto the unsigned codes
``0 .. 2**k - 1`` with step ``(b - a) / (2**k - 1)``. Rounding is
half-away-from-zero; since ``(x - a) / step`` is never negative after
clipping, that is ``floor(v + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FULL = 32
"""Bit-width sentinel meaning "leave at full precision"."""

BIT_CHOICES = (2, 3, 4, 5, 6, 8)


@dataclass(frozen=True)
class QuantParams:
    clip_lo: float
    clip_hi: float
    bits: int

    @property
    def is_full(self):
        return self.bits == FULL

    @property
    def levels(self):
        return (1 << self.bits) - 1

    @property
    def step(self):
        if self.is_full or self.clip_hi == self.clip_lo:
            return 0.0
        return (self.clip_hi - self.clip_lo) / self.levels


def make_quant_params(a, b, k):
    a, b = float(a), float(b)
    if k != FULL and int(k) < 2:
        raise ValueError(f"bit width must be >= 2, got {k}")
    if k != FULL and not a < b:
        raise ValueError(f"clip range needs a < b, got [{a}, {b}]")
    return QuantParams(a, b, int(k))


def params_for_range(a, b, k):
    """Like :func:`make_quant_params` but tolerates the degenerate ``a == b``.

    A degenerate range represents the whole tensor by the constant ``a``.
    """
    a, b = float(a), float(b)
    if a == b and k != FULL:
        if int(k) < 2:
            raise ValueError(f"bit width must be >= 2, got {k}")
        return QuantParams(a, b, int(k))
    return make_quant_params(a, b, k)


def quantize(x, p):
    """Unsigned integer codes for ``x``."""
    x = np.asarray(x)
    if p.is_full:
        raise ValueError("cannot produce integer codes for FULL precision")
    if p.step == 0.0:
        return np.zeros(x.shape, dtype=np.int64)
    v = (np.clip(x.astype(np.float64), p.clip_lo, p.clip_hi) - p.clip_lo) / p.step
    return np.clip(np.floor(v + 0.5), 0, p.levels).astype(np.int64)


def dequantize(codes, p, dtype=np.float32):
    codes = np.asarray(codes)
    out = p.clip_lo + codes.astype(np.float64) * p.step
    # the top code is b itself, not a + levels * step (which can miss by an ulp)
    out = np.where(codes == p.levels, p.clip_hi, out) if p.step else out
    return out.astype(dtype)


def fake_quantize(x, p):
    x = np.asarray(x)
    if p.is_full:
        return x
    return dequantize(quantize(x, p), p, dtype=x.dtype)


def fake_quantize_range(x, a, b, k):
    return fake_quantize(x, params_for_range(a, b, k))


def range_minmax(x):
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot take the range of an empty tensor")
    return float(x.min()), float(x.max())


def range_percentile(x, gamma):
    """Clip range at the ``gamma`` and ``1 - gamma`` quantiles (fractions).

    Quantiles interpolate linearly between sorted values at index
    ``q * (n - 1)``.
    """
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot take the range of an empty tensor")
    if not 0 <= gamma < 0.5:
        raise ValueError(f"gamma must lie in [0, 0.5), got {gamma}")
    if gamma == 0:
        return range_minmax(x)
    lo, hi = np.quantile(x.astype(np.float64).ravel(), [gamma, 1.0 - gamma], method="linear")
    return float(lo), float(hi)


def clip_range(x, method="minmax", gamma=0.001):
    if method == "minmax":
        return range_minmax(x)
    if method == "percentile":
        return range_percentile(x, gamma)
    raise ValueError(f"unknown clip method {method!r}")
