"""Bit-exact IEEE 754 binary16 arithmetic on raw 16-bit words.

Every weight, activation, shadow entry and attack flip in this package is a
plain unsigned 16-bit pattern (1 sign, 5 exponent, 10 mantissa bits).  All
arithmetic here is round-to-nearest-even with full subnormal support, so the
hardening compiler, the functional reference and the datapath simulator agree
to the bit.  Scalar entry points operate on Python ints; the ``*_array``
variants operate on uint16 ndarrays and are the hot path.

Results that are NaN are canonicalized to the single quiet pattern 0x7E00.
Host FPUs differ in which operand NaN payload they propagate, so without this
the simulator output would not be portable.
"""

from __future__ import annotations

import math

import numpy as np

SIGN_MASK = 0x8000
EXP_MASK = 0x7C00
MAN_MASK = 0x03FF
POS_INF = 0x7C00
NEG_INF = 0xFC00
QNAN = 0x7E00
MAX_FINITE = 0x7BFF  # 65504.0
BIT_WIDTH = 16


def is_nan(w: int) -> bool:
    return (w & EXP_MASK) == EXP_MASK and (w & MAN_MASK) != 0


def is_inf(w: int) -> bool:
    return (w & ~SIGN_MASK) == POS_INF


def is_subnormal(w: int) -> bool:
    return (w & EXP_MASK) == 0 and (w & MAN_MASK) != 0


def decode(w: int) -> float:
    """Exact real value of a binary16 pattern (NaN decodes to float nan)."""
    return float(np.uint16(w).view(np.float16))


def from_real(x: float) -> int:
    """Round a real number to binary16, round-to-nearest-even.

    Overflow goes to the like-signed infinity, values below the smallest
    subnormal round to a like-signed zero.  NaN input yields the canonical
    quiet NaN.
    """
    with np.errstate(all="ignore"):
        w = int(np.float16(x).view(np.uint16))
    return QNAN if is_nan(w) else w


def decode_array(bits: np.ndarray) -> np.ndarray:
    """uint16 patterns -> exact float64 values."""
    return np.ascontiguousarray(bits, dtype=np.uint16).view(np.float16).astype(np.float64)


def encode_array(values: np.ndarray) -> np.ndarray:
    """float array -> uint16 binary16 patterns, RNE, NaN canonicalized."""
    with np.errstate(all="ignore"):
        h = np.asarray(values).astype(np.float16)
    out = h.view(np.uint16).copy()
    out[np.isnan(h)] = QNAN
    return out


def _ftz_array(bits: np.ndarray) -> np.ndarray:
    sub = ((bits & EXP_MASK) == 0) & ((bits & MAN_MASK) != 0)
    if sub.any():
        bits = np.where(sub, bits & SIGN_MASK, bits)
    return bits


def _binop_array(a_bits: np.ndarray, b_bits: np.ndarray, op, ftz: bool) -> np.ndarray:
    a = np.ascontiguousarray(a_bits, dtype=np.uint16).view(np.float16)
    b = np.ascontiguousarray(b_bits, dtype=np.uint16).view(np.float16)
    with np.errstate(all="ignore"):
        r = op(a, b)
    out = r.view(np.uint16)
    nan = np.isnan(r)
    if nan.any():
        out = np.where(nan, np.uint16(QNAN), out)
    if ftz:
        out = _ftz_array(out)
    return np.ascontiguousarray(out, dtype=np.uint16)


def mul_array(a_bits: np.ndarray, b_bits: np.ndarray, ftz: bool = False) -> np.ndarray:
    """Elementwise binary16 product of two uint16 pattern arrays."""
    return _binop_array(a_bits, b_bits, np.multiply, ftz)


def add_array(a_bits: np.ndarray, b_bits: np.ndarray, ftz: bool = False) -> np.ndarray:
    """Elementwise binary16 sum of two uint16 pattern arrays."""
    return _binop_array(a_bits, b_bits, np.add, ftz)


def mul(a: int, b: int, ftz: bool = False) -> int:
    return int(mul_array(np.array([a], np.uint16), np.array([b], np.uint16), ftz)[0])


def add(a: int, b: int, ftz: bool = False) -> int:
    return int(add_array(np.array([a], np.uint16), np.array([b], np.uint16), ftz)[0])


def flip_bit(w: int, pos: int) -> int:
    """Invert exactly bit ``pos`` (0 = mantissa LSB, 15 = sign) of ``w``."""
    if not 0 <= pos < BIT_WIDTH:
        raise ValueError(f"bit position {pos} outside 0..{BIT_WIDTH - 1}")
    return w ^ (1 << pos)


def value_delta(w: int, pos: int) -> float:
    """Real value change caused by flipping one bit of ``w``.

    Returns nan as the invalid marker when either the original word or the
    flipped word is a NaN pattern; infinite deltas (exponent-field flips into
    the infinity binade) are legal.
    """
    flipped = flip_bit(w, pos)
    if is_nan(w) or is_nan(flipped):
        return math.nan
    return decode(flipped) - decode(w)


def value_delta_matrix(w_bits: np.ndarray) -> np.ndarray:
    """Per-bit value deltas for an array of words: shape ``w.shape + (16,)``.

    Entries are float64; flips into or out of NaN patterns are nan.
    """
    w = np.ascontiguousarray(w_bits, dtype=np.uint16)
    masks = (np.uint16(1) << np.arange(BIT_WIDTH, dtype=np.uint16)).astype(np.uint16)
    flipped = w[..., None] ^ masks
    base = decode_array(w)
    flipped_vals = decode_array(flipped)
    with np.errstate(invalid="ignore"):
        delta = flipped_vals - base[..., None]
    bad = np.isnan(flipped_vals) | np.isnan(base)[..., None]
    delta[bad] = np.nan
    return delta


def tree_sum(bits: np.ndarray, axis: int = -1, ftz: bool = False) -> np.ndarray:
    """Balanced adjacent-pair binary16 reduction along ``axis``.

    The lane count must be a power of two; level l adds lanes 2i and 2i+1 of
    the previous level, which is the fixed reduction order of the datapath's
    pipelined adder tree.
    """
    x = np.ascontiguousarray(np.moveaxis(np.asarray(bits, np.uint16), axis, -1))
    n = x.shape[-1]
    if n & (n - 1):
        raise ValueError(f"lane count {n} is not a power of two")
    while x.shape[-1] > 1:
        x = add_array(x[..., 0::2], x[..., 1::2], ftz)
    return x[..., 0]


def linear_fp16(x_bits: np.ndarray, w_bits: np.ndarray, bias_bits: np.ndarray | None = None,
                lanes: int = 32) -> np.ndarray:
    """Plain binary16 linear map ``y = x @ W^T (+ bias)`` with tree reduction.

    ``x_bits`` is (..., fan_in), ``w_bits`` is (fan_out, fan_in).  The fan-in
    is zero-padded up to a multiple of ``lanes``; each block is reduced by the
    adjacent-pair tree and blocks are accumulated in ascending order with
    binary16 adds, then the bias is added once.  This is the no-rewiring
    behaviour of the tiled datapath, kept here so the model stack can run the
    deployment arithmetic without knowing about hardening.
    """
    x = np.asarray(x_bits, np.uint16)
    w = np.asarray(w_bits, np.uint16)
    fan_out, fan_in = w.shape
    padded = -(-fan_in // lanes) * lanes
    if padded != fan_in:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (padded - fan_in,), np.uint16)], axis=-1)
        w = np.concatenate([w, np.zeros((fan_out, padded - fan_in), np.uint16)], axis=-1)
    acc = None
    for k0 in range(0, padded, lanes):
        prod = mul_array(x[..., None, k0:k0 + lanes], w[:, k0:k0 + lanes])
        part = tree_sum(prod, axis=-1)
        acc = part if acc is None else add_array(acc, part)
    if bias_bits is not None:
        acc = add_array(acc, np.asarray(bias_bits, np.uint16))
    return acc
