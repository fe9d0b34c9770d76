"""Reduced-precision floating point emulation.

Values of a :class:`FloatFormat` keep the 8-bit IEEE single exponent and a
shortened mantissa.  Every emulated operation is evaluated in double
precision and then rounded to the format (round-to-nearest-even, subnormals
flushed to zero, overflow to infinity).  Since every representable value is
also an IEEE single, emulated arrays are stored as ``float32``.

Two arithmetic providers share one interface so the numerical kernels can be
written once:

* :class:`NativeArithmetic` -- plain numpy in float32 or float64 (BLAS backed).
* :class:`EmulatedArithmetic` -- every multiply, add, divide, log and exp is
  rounded to the target format, including each step of a dot product.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numba
import numpy as np

__all__ = [
    "FloatFormat",
    "NAMED_FORMATS",
    "FORMAT_NAMES",
    "get_format",
    "round_to_format",
    "add",
    "sub",
    "mul",
    "div",
    "log",
    "exp",
    "NativeArithmetic",
    "EmulatedArithmetic",
    "get_arithmetic",
]


@dataclass(frozen=True)
class FloatFormat:
    """IEEE-single-like format with ``mantissa_bits`` explicit fraction bits."""

    mantissa_bits: int
    exponent_bits: int = 8
    name: str = ""

    def __post_init__(self):
        if self.exponent_bits != 8:
            raise ValueError("only the 8-bit IEEE single exponent is supported")
        if not 5 <= self.mantissa_bits <= 23:
            raise ValueError(f"mantissa_bits must be in [5, 23], got {self.mantissa_bits}")
        if not self.name:
            object.__setattr__(self, "name", f"bf{1 + self.exponent_bits + self.mantissa_bits}")

    @property
    def total_bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def max_finite(self) -> float:
        return math.ldexp(2.0 - 2.0 ** -self.mantissa_bits, 127)

    @property
    def min_normal(self) -> float:
        return 2.0 ** -126

    @property
    def ulp_one(self) -> float:
        """Spacing of representable values in [1, 2)."""
        return 2.0 ** -self.mantissa_bits


NAMED_FORMATS = {
    f"bf{1 + 8 + m}": FloatFormat(m) for m in (5, 6, 7, 11, 15, 19)
}
FORMAT_NAMES = tuple(NAMED_FORMATS) + ("f32", "f64")


def get_format(name: str) -> FloatFormat:
    try:
        return NAMED_FORMATS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown float format {name!r}; known: {', '.join(FORMAT_NAMES)}") from None


# --------------------------------------------------------------------------
# bit-level rounding (shared by the vectorised helpers and the jit kernels)
# --------------------------------------------------------------------------

_U1 = np.uint64(1)
_EXP_MASK = np.uint64(0x7FF)
_SIGN_BIT = np.uint64(0x8000000000000000)
_INF_BITS = np.uint64(0x7FF0000000000000)
_MANT_SHIFT = np.uint64(52)
# biased f64 exponents bounding the normal range of an 8-bit exponent format
_EXP_OVERFLOW = np.uint64(1023 + 128)
_EXP_UNDERFLOW = np.uint64(1023 - 126)


@numba.njit(inline="always", nogil=True)
def _round_bits(u, shift):
    """Round the f64 bit pattern ``u`` to ``52 - shift`` fraction bits."""
    e = (u >> _MANT_SHIFT) & _EXP_MASK
    if e == _EXP_MASK:
        return u
    u = u + ((_U1 << shift) >> _U1) - _U1 + ((u >> shift) & _U1)
    u = u & ~((_U1 << shift) - _U1)
    e = (u >> _MANT_SHIFT) & _EXP_MASK
    if e >= _EXP_OVERFLOW:
        return (u & _SIGN_BIT) | _INF_BITS
    if e < _EXP_UNDERFLOW:
        return u & _SIGN_BIT
    return u


@numba.njit(nogil=True, cache=True)
def _round_inplace(bits, shift):
    for k in range(bits.size):
        bits[k] = _round_bits(bits[k], shift)


def _shift(fmt: FloatFormat) -> np.uint64:
    return np.uint64(52 - fmt.mantissa_bits)


def _round_f64(x, fmt: FloatFormat, out_dtype=np.float64):
    work = np.array(x, dtype=np.float64, order="C", copy=True)
    _round_inplace(work.reshape(-1).view(np.uint64), _shift(fmt))
    return work if out_dtype == np.float64 else work.astype(out_dtype)


def round_to_format(x, fmt: FloatFormat):
    """Round ``x`` (scalar or array) to the nearest value of ``fmt``.

    Ties go to even.  Results below the smallest normal flush to a signed
    zero and results beyond the largest finite value become infinite.  NaN
    passes through.  Scalars come back as ``float``, arrays as float64.
    """
    if np.ndim(x) == 0:
        return float(_round_f64(np.array([x], dtype=np.float64), fmt)[0])
    return _round_f64(x, fmt)


def _binary(op, x, y, fmt):
    with np.errstate(all="ignore"):
        r = op(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return round_to_format(r, fmt)


def add(x, y, fmt: FloatFormat):
    return _binary(np.add, x, y, fmt)


def sub(x, y, fmt: FloatFormat):
    return _binary(np.subtract, x, y, fmt)


def mul(x, y, fmt: FloatFormat):
    return _binary(np.multiply, x, y, fmt)


def div(x, y, fmt: FloatFormat):
    return _binary(np.divide, x, y, fmt)


def log(x, fmt: FloatFormat):
    with np.errstate(all="ignore"):
        r = np.log(np.asarray(x, dtype=np.float64))
    return round_to_format(r, fmt)


def exp(x, fmt: FloatFormat):
    with np.errstate(all="ignore"):
        r = np.exp(np.asarray(x, dtype=np.float64))
    return round_to_format(r, fmt)


# --------------------------------------------------------------------------
# jit kernels with per-operation rounding
# --------------------------------------------------------------------------


@numba.njit(nogil=True, cache=True)
def _emu_matmul_bias(a, w, bias, shift):
    # out[b, j] = (((0 + a[b,0] w[0,j]) + a[b,1] w[1,j]) + ...) + bias[j]
    # Zero products leave the accumulator unchanged, so they are skipped.
    n_batch, n_pre = a.shape
    n_post = w.shape[1]
    out = np.empty((n_batch, n_post), np.float32)
    acc = np.zeros(n_post, np.float64)
    acc_bits = acc.view(np.uint64)
    tmp = np.empty(n_post, np.float64)
    tmp_bits = tmp.view(np.uint64)
    for b in range(n_batch):
        acc[:] = 0.0
        for k in range(n_pre):
            x = np.float64(a[b, k])
            if x == 0.0:
                continue
            for j in range(n_post):
                tmp[j] = x * w[k, j]
            for j in range(n_post):
                tmp_bits[j] = _round_bits(tmp_bits[j], shift)
            for j in range(n_post):
                acc[j] = acc[j] + tmp[j]
            for j in range(n_post):
                acc_bits[j] = _round_bits(acc_bits[j], shift)
        for j in range(n_post):
            acc[j] = acc[j] + bias[j]
        for j in range(n_post):
            acc_bits[j] = _round_bits(acc_bits[j], shift)
        for j in range(n_post):
            out[b, j] = acc[j]
    return out


@numba.njit(nogil=True, cache=True)
def _emu_batch_stats(a, c, shift):
    # One pass over the batch accumulates sum(a), sum(c) and sum(a outer c).
    n_batch, n_pre = a.shape
    n_post = c.shape[1]
    sum_a = np.zeros(n_pre, np.float64)
    sum_c = np.zeros(n_post, np.float64)
    sum_ac = np.zeros((n_pre, n_post), np.float32)
    sa_bits = sum_a.view(np.uint64)
    sc_bits = sum_c.view(np.uint64)
    row = np.empty(n_post, np.float64)
    row_bits = row.view(np.uint64)
    prod = np.empty(n_post, np.float64)
    prod_bits = prod.view(np.uint64)
    for b in range(n_batch):
        for j in range(n_post):
            sum_c[j] = sum_c[j] + c[b, j]
            sc_bits[j] = _round_bits(sc_bits[j], shift)
        for i in range(n_pre):
            x = np.float64(a[b, i])
            sum_a[i] = sum_a[i] + x
            sa_bits[i] = _round_bits(sa_bits[i], shift)
            if x == 0.0:
                continue
            for j in range(n_post):
                prod[j] = x * c[b, j]
            for j in range(n_post):
                prod_bits[j] = _round_bits(prod_bits[j], shift)
            for j in range(n_post):
                row[j] = sum_ac[i, j] + prod[j]
            for j in range(n_post):
                row_bits[j] = _round_bits(row_bits[j], shift)
            for j in range(n_post):
                sum_ac[i, j] = row[j]
    return sum_a.astype(np.float32), sum_c.astype(np.float32), sum_ac


@numba.njit(nogil=True, cache=True)
def _emu_group_sum(x, group, shift):
    n_rows, n_cols = x.shape
    n_groups = n_cols // group
    out = np.empty((n_rows, n_groups), np.float32)
    buf = np.empty(1, np.float64)
    bits = buf.view(np.uint64)
    for r in range(n_rows):
        for g in range(n_groups):
            buf[0] = 0.0
            for k in range(g * group, (g + 1) * group):
                buf[0] = buf[0] + x[r, k]
                bits[0] = _round_bits(bits[0], shift)
            out[r, g] = buf[0]
    return out


# --------------------------------------------------------------------------
# arithmetic providers
# --------------------------------------------------------------------------


class _MacCounter:
    """Thread-safe multiply-accumulate counter shared by worker threads."""

    def _init_counter(self):
        self.macs = 0
        self._mac_lock = threading.Lock()

    def count_macs(self, n: int):
        with self._mac_lock:
            self.macs += int(n)


class NativeArithmetic(_MacCounter):
    """Numpy arithmetic in float32 or float64; dot products go through BLAS."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported native dtype {self.dtype}")
        self.name = "f32" if self.dtype == np.float32 else "f64"
        self._init_counter()

    def __repr__(self):
        return f"NativeArithmetic({self.name})"

    def asarray(self, x):
        return np.asarray(x, dtype=self.dtype)

    def add(self, x, y):
        return np.add(x, y, dtype=self.dtype)

    def sub(self, x, y):
        return np.subtract(x, y, dtype=self.dtype)

    def mul(self, x, y):
        return np.multiply(x, y, dtype=self.dtype)

    def div(self, x, y):
        return np.divide(x, y, dtype=self.dtype)

    def log(self, x):
        return np.log(x, dtype=self.dtype)

    def exp(self, x):
        return np.exp(x, dtype=self.dtype)

    def matmul_bias(self, a, w, bias):
        self.count_macs(a.shape[0] * w.shape[0] * w.shape[1])
        out = np.matmul(a, w)
        out += bias
        return out

    def batch_stats(self, a, c):
        self.count_macs(a.shape[0] * a.shape[1] * c.shape[1])
        return a.sum(axis=0), c.sum(axis=0), a.T @ c

    def group_sum(self, x, group):
        return x.reshape(x.shape[0], -1, group).sum(axis=2)


class EmulatedArithmetic(_MacCounter):
    """Arithmetic rounded to ``fmt`` after every scalar operation.

    Arrays are float32 holding exactly representable values.  Dot products and
    batch sums accumulate strictly left to right, one rounding per multiply
    and per add.
    """

    dtype = np.dtype(np.float32)

    def __init__(self, fmt: FloatFormat):
        self.fmt = fmt
        self.name = fmt.name
        self._shift = _shift(fmt)
        self._init_counter()

    def __repr__(self):
        return f"EmulatedArithmetic({self.fmt.name}, m={self.fmt.mantissa_bits})"

    def _round(self, x):
        return _round_f64(x, self.fmt, np.float32)

    def asarray(self, x):
        return self._round(x)

    def _binary(self, op, x, y):
        with np.errstate(all="ignore"):
            return self._round(op(np.asarray(x, np.float64), np.asarray(y, np.float64)))

    def add(self, x, y):
        return self._binary(np.add, x, y)

    def sub(self, x, y):
        return self._binary(np.subtract, x, y)

    def mul(self, x, y):
        return self._binary(np.multiply, x, y)

    def div(self, x, y):
        return self._binary(np.divide, x, y)

    def log(self, x):
        with np.errstate(all="ignore"):
            return self._round(np.log(np.asarray(x, np.float64)))

    def exp(self, x):
        with np.errstate(all="ignore"):
            return self._round(np.exp(np.asarray(x, np.float64)))

    def matmul_bias(self, a, w, bias):
        self.count_macs(a.shape[0] * w.shape[0] * w.shape[1])
        return _emu_matmul_bias(
            np.ascontiguousarray(a, np.float32),
            np.ascontiguousarray(w, np.float32),
            np.ascontiguousarray(bias, np.float32),
            self._shift,
        )

    def batch_stats(self, a, c):
        self.count_macs(a.shape[0] * a.shape[1] * c.shape[1])
        return _emu_batch_stats(
            np.ascontiguousarray(a, np.float32), np.ascontiguousarray(c, np.float32), self._shift
        )

    def group_sum(self, x, group):
        return _emu_group_sum(np.ascontiguousarray(x, np.float32), group, self._shift)


def get_arithmetic(kind):
    """Build an arithmetic provider from a name, dtype or :class:`FloatFormat`.

    Accepted names: ``f32``/``native-f32``, ``f64``/``native-f64`` and the
    emulated ``bf14`` ... ``bf28``.
    """
    if isinstance(kind, (NativeArithmetic, EmulatedArithmetic)):
        return kind
    if isinstance(kind, FloatFormat):
        return EmulatedArithmetic(kind)
    if isinstance(kind, str):
        key = kind.lower().removeprefix("native-")
        if key in ("f32", "float32"):
            return NativeArithmetic(np.float32)
        if key in ("f64", "float64"):
            return NativeArithmetic(np.float64)
        return EmulatedArithmetic(get_format(key))
    return NativeArithmetic(kind)
