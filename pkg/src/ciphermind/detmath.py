"""Pinned elementwise transcendentals for the bit-reproducible forward pass.

Platform libm routines (and numpy's vectorized wrappers around them) may
round exp/tanh/log differently between builds, and even between SIMD and
scalar tails of the same array. Everything here is built from IEEE-754
binary32 add/mul/div/sqrt and integer bit manipulation only, so results
are a pure function of the input bits.

float64 arrays take the numpy fallback path: the double-precision route
exists only for finite-difference gradient probes, where accuracy matters
and bit-pinning does not.
"""

from __future__ import annotations

import numpy as np

F32 = np.float32

_INV_LN2 = F32(1.4426950408889634)
_LN2_HI = F32(6.9313812256e-01)
_LN2_LO = F32(9.0580006145e-06)

# exp(x) overflows float32 above this, underflows to zero below the second.
_EXP_HI = F32(88.722839)
_EXP_LO = F32(-87.336544)

# |tanh(x)| rounds to 1.0f beyond this.
_TANH_SAT = F32(9.010913)

_GELU_C0 = F32(0.7978845608)
_GELU_C1 = F32(0.044715)

_SQRT2 = F32(1.4142135623730951)
_FLT_MIN = F32(1.1754943508222875e-38)


def _check_dtype(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"expected float32/float64 array, got {x.dtype}")
    return x


def exp(x: np.ndarray) -> np.ndarray:
    """Pinned exp for float32; numpy exp for float64."""
    x = _check_dtype(x)
    if x.dtype == np.float64:
        return np.exp(x)

    # clamp first so the polynomial never sees huge arguments (e.g. mask fill)
    xc = np.clip(x, _EXP_LO, F32(88.72283))
    k = np.rint(xc * _INV_LN2)
    np.clip(k, -126.0, 127.0, out=k)
    r = (xc - k * _LN2_HI) - k * _LN2_LO
    # degree-7 Taylor polynomial of exp on |r| <= ~0.35, Horner order pinned
    p = F32(1.0) / F32(5040.0)
    p = p * r + F32(1.0) / F32(720.0)
    p = p * r + F32(1.0) / F32(120.0)
    p = p * r + F32(1.0) / F32(24.0)
    p = p * r + F32(1.0) / F32(6.0)
    p = p * r + F32(0.5)
    p = p * r + F32(1.0)
    p = p * r + F32(1.0)
    # scale by 2**k through the exponent field
    scale = ((k.astype(np.int32) + 127) << 23).view(np.float32)
    out = p * scale
    out = np.where(x <= _EXP_LO, F32(0.0), out)
    out = np.where(x >= _EXP_HI, np.float32(np.inf), out)
    return out


def tanh(x: np.ndarray) -> np.ndarray:
    """Pinned tanh for float32 via exp; numpy tanh for float64."""
    x = _check_dtype(x)
    if x.dtype == np.float64:
        return np.tanh(x)

    a = -np.abs(x)
    e = exp(a + a)
    mag = (F32(1.0) - e) / (F32(1.0) + e)
    mag = np.where(a <= -_TANH_SAT, F32(1.0), mag)
    return np.where(x < 0, -mag, mag)


def log(x: np.ndarray) -> np.ndarray:
    """Pinned natural log for positive normal float32; numpy log for float64.

    Inputs below FLT_MIN are clamped up to FLT_MIN (callers feed softmax
    probabilities, where that clamp is the pinned behaviour).
    """
    x = _check_dtype(x)
    if x.dtype == np.float64:
        return np.log(np.maximum(x, np.finfo(np.float64).tiny))
    if np.any(~np.isfinite(x)) or np.any(x < 0):
        raise ValueError("log requires finite non-negative input")

    x = np.maximum(x, _FLT_MIN)
    bits = x.view(np.int32)
    e = ((bits >> 23) & 0xFF).astype(np.int32) - 127
    m = ((bits & 0x007FFFFF) | 0x3F800000).view(np.float32)
    big = m > _SQRT2
    m = np.where(big, m * F32(0.5), m)
    e = np.where(big, e + 1, e).astype(np.float32)
    s = (m - F32(1.0)) / (m + F32(1.0))
    s2 = s * s
    # 2*atanh(s) on |s| <= sqrt(2)-1, Horner order pinned
    p = F32(2.0) / F32(9.0)
    p = p * s2 + F32(2.0) / F32(7.0)
    p = p * s2 + F32(2.0) / F32(5.0)
    p = p * s2 + F32(2.0) / F32(3.0)
    p = p * s2 + F32(2.0)
    return e * _LN2_HI + (s * p + e * _LN2_LO)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-form GELU, inner polynomial 0.7978845608*(x + 0.044715*x^3)."""
    x = _check_dtype(x)
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    inner = x.dtype.type(_GELU_C0) * (x + x.dtype.type(_GELU_C1) * (x * x * x))
    return half * x * (one + tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of gelu(x), written against the same pinned tanh."""
    x = _check_dtype(x)
    c0 = x.dtype.type(_GELU_C0)
    c1 = x.dtype.type(_GELU_C1)
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    three = x.dtype.type(3.0)
    inner = c0 * (x + c1 * (x * x * x))
    t = tanh(inner)
    dinner = c0 * (one + three * c1 * (x * x))
    return half * (one + t) + half * x * (one - t * t) * dinner


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log softmax over the last axis (fixed-length reduction)."""
    logits = _check_dtype(logits)
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    lse = log(np.sum(exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = _check_dtype(logits)
    e = exp(logits - np.max(logits, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)
