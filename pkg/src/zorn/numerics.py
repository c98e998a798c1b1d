"""Dense numerics shared by every other module.

Everything here is deterministic: matrix products accumulate in float64 with
a fixed ascending-k order and reductions are strictly left to right, so two
processes running the same code on the same machine agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

_GAMMA = np.uint64(GOLDEN_GAMMA)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)


class ShapeError(ValueError):
    """Operand shapes or lengths do not line up."""


# ---------------------------------------------------------------------------
# SplitMix64 counter generator
# ---------------------------------------------------------------------------

def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x`` (increment, then finalize)."""
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def rng_at(seed: int, counter: int) -> int:
    """Value of the stream keyed by ``seed`` at position ``counter``.

    Equal to the ``counter``-th output of a sequential SplitMix64 generator
    started from state ``seed``.
    """
    return splitmix64((seed + counter * GOLDEN_GAMMA) & MASK64)


@numba.njit(inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@numba.njit(inline="always")
def rng_at_nb(seed, counter):
    # seed, counter: uint64; wraps mod 2**64
    return _mix(seed + counter * _GAMMA + _GAMMA)


@numba.njit(cache=True)
def _rng_block(seed, start, out):
    for i in range(out.shape[0]):
        out[i] = rng_at_nb(seed, start + np.uint64(i))
    return out


def rng_block(seed: int, start: int, n: int) -> np.ndarray:
    """Stream values at positions ``start .. start+n-1`` as uint64."""
    out = np.empty(n, dtype=np.uint64)
    return _rng_block(np.uint64(seed & MASK64), np.uint64(start), out)


@dataclass(frozen=True)
class RngStream:
    """Keyed counter-based stream; a pure function of ``(seed, counter)``."""

    seed: int
    counter: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= MASK64 and 0 <= self.counter <= MASK64):
            raise ValueError("seed and counter must fit in 64 unsigned bits")


def rng_next_u64(s: RngStream) -> tuple[int, RngStream]:
    """Draw the value at the stream's position and return the advanced stream."""
    value = rng_at(s.seed, s.counter)
    return value, RngStream(s.seed, (s.counter + 1) & MASK64)


def uniform01(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to float64 in [0, 1) using the top 53 bits."""
    return (words >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# Matrices
# ---------------------------------------------------------------------------

@dataclass
class Matrix:
    """Row-major float32 matrix. ``data`` is a flat array of ``rows * cols``."""

    rows: int
    cols: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if self.data.size != self.rows * self.cols:
            raise ShapeError(
                f"data length {self.data.size} != {self.rows}x{self.cols}")

    @classmethod
    def from_array(cls, a) -> "Matrix":
        a = np.asarray(a, dtype=np.float32)
        if a.ndim != 2:
            raise ShapeError(f"expected a 2-D array, got shape {a.shape}")
        return cls(a.shape[0], a.shape[1], a.reshape(-1))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(rows, cols, np.zeros(rows * cols, dtype=np.float32))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls.from_array(np.eye(n, dtype=np.float32))

    def as_array(self) -> np.ndarray:
        """2-D view sharing memory with ``data``."""
        return self.data.reshape(self.rows, self.cols)

    def __eq__(self, other):
        if not isinstance(other, Matrix):
            return NotImplemented
        return (self.rows == other.rows and self.cols == other.cols
                and np.array_equal(self.data, other.data))


@numba.njit(cache=True)
def _matmul_kernel(a, b, out):
    n, kk = a.shape
    m = b.shape[1]
    acc = np.empty(m, dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc[j] = 0.0
        for k in range(kk):
            aik = np.float64(a[i, k])
            for j in range(m):
                acc[j] += aik * np.float64(b[k, j])
        for j in range(m):
            out[i, j] = acc[j]
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Product ``a @ b`` with float64 accumulation in ascending k order."""
    if a.cols != b.rows:
        raise ShapeError(f"cannot multiply {a.rows}x{a.cols} by {b.rows}x{b.cols}")
    out = np.empty((a.rows, b.cols), dtype=np.float32)
    _matmul_kernel(a.as_array(), b.as_array(), out)
    return Matrix.from_array(out)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _seq_sum(xs):
    acc = 0.0
    for i in range(xs.shape[0]):
        acc += np.float64(xs[i])
    return acc


def reduce_sum_f64(xs) -> float:
    """Left-to-right sum of float32 values in a float64 accumulator."""
    arr = np.ascontiguousarray(xs, dtype=np.float32).reshape(-1)
    if arr.size == 0:
        return 0.0
    return float(_seq_sum(arr))


@numba.njit(cache=True)
def _seq_dot(x, y):
    acc = 0.0
    for i in range(x.shape[0]):
        acc += np.float64(x[i]) * np.float64(y[i])
    return acc


def dot_f64(x, y) -> float:
    """Sequential dot product with float64 accumulation."""
    x = np.ascontiguousarray(x).reshape(-1)
    y = np.ascontiguousarray(y).reshape(-1)
    if x.size != y.size:
        raise ShapeError(f"length mismatch {x.size} vs {y.size}")
    return float(_seq_dot(x, y))
