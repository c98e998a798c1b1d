"""Seeded probe streams and chunked in-place perturbation.

A probe is never stored. Entry ``i`` of the probe keyed by ``seed`` is a pure
function of ``(seed, i)``, so any process can regenerate any slice of it and
perturb a parameter vector chunk by chunk.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba
import numpy as np

from .numerics import MASK64, rng_at_nb

DEFAULT_CHUNK_SIZE = 1 << 20

_INV53 = 1.0 / 9007199254740992.0
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO = np.uint64(2)


class Distribution(enum.IntEnum):
    RADEMACHER = 0
    NORMAL = 1
    UNIFORM = 2

    @classmethod
    def parse(cls, value) -> "Distribution":
        if isinstance(value, Distribution):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).strip().upper()
        aliases = {"RAD": "RADEMACHER", "GAUSSIAN": "NORMAL", "UNI": "UNIFORM"}
        try:
            return cls[aliases.get(key, key)]
        except KeyError:
            raise ValueError(f"unknown probe distribution {value!r}") from None


@dataclass(frozen=True)
class ProbeSpec:
    seed: int
    distribution: Distribution = Distribution.RADEMACHER
    epsilon: float = 1e-3

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("probe seed must fit in 64 unsigned bits")
        object.__setattr__(self, "distribution", Distribution.parse(self.distribution))


@dataclass
class ChunkCursor:
    """Walks the flat parameter space in ``chunk_size`` steps."""

    chunk_size: int = DEFAULT_CHUNK_SIZE
    position: int = 0

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be positive")

    def ranges(self, total: int):
        while self.position < total:
            stop = min(self.position + self.chunk_size, total)
            yield self.position, stop
            self.position = stop


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@numba.njit(inline="always")
def _entry(seed, dist, i):
    if dist == 0:
        r = rng_at_nb(seed, np.uint64(i))
        return np.float64(np.int64(r & _ONE) * 2 - 1)
    elif dist == 1:
        j = np.uint64(i) * _TWO
        r1 = rng_at_nb(seed, j)
        r2 = rng_at_nb(seed, j + _ONE)
        u1 = (np.float64(r1 >> _S11) + 1.0) * _INV53
        u2 = np.float64(r2 >> _S11) * _INV53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
    else:
        r = rng_at_nb(seed, np.uint64(i))
        return np.float64(r >> _S11) * _INV53 * 2.0 - 1.0


@numba.njit(cache=True)
def _fill(seed, dist, start, out):
    for k in range(out.shape[0]):
        out[k] = _entry(seed, dist, start + k)
    return out


@numba.njit(inline="always")
def _add_probe(t, start, alpha, seed, dist):
    """t[i] += alpha * probe[start + i] for the slice ``t``."""
    s = np.uint64(start)
    if dist == 0:
        neg = -alpha
        for i in range(t.shape[0]):
            r = rng_at_nb(seed, s + np.uint64(i))
            t[i] = t[i] + (alpha if (r & _ONE) else neg)
    else:
        for i in range(t.shape[0]):
            t[i] = t[i] + alpha * _entry(seed, dist, start + i)


@numba.njit(cache=True)
def _apply_range(theta, alpha, seed, dist, start, stop):
    _add_probe(theta[start:stop], start, alpha, seed, dist)


@numba.njit(cache=True)
def _apply_many(theta, alphas, seeds, dist, chunk, scratch):
    # chunk-outer / probe-inner: every entry sees the same sequence of
    # roundings as len(seeds) full passes in ascending probe order
    n = theta.shape[0]
    sq = 0.0
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        t = theta[start:stop]
        for i in range(stop - start):
            scratch[i] = t[i]
        for m in range(seeds.shape[0]):
            _add_probe(t, start, alphas[m], seeds[m], dist)
        for i in range(stop - start):
            d = np.float64(t[i]) - np.float64(scratch[i])
            sq += d * d
    return math.sqrt(sq)


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def _check_theta(theta):
    if not isinstance(theta, np.ndarray) or theta.ndim != 1 or not theta.flags.c_contiguous:
        raise ValueError("theta must be a contiguous 1-D numpy array")
    if theta.dtype not in (np.float32, np.float64):
        raise ValueError(f"theta dtype must be float32 or float64, not {theta.dtype}")


def probe_entry(spec: ProbeSpec, i: int) -> float:
    """Value of probe ``spec`` at flat index ``i``."""
    if i < 0:
        raise IndexError(i)
    out = np.empty(1, dtype=np.float64)
    _fill(np.uint64(spec.seed), int(spec.distribution), i, out)
    return float(out[0])


def probe_slice(spec: ProbeSpec, start: int, n: int, dtype=np.float64) -> np.ndarray:
    """Materialize entries ``start .. start+n-1`` of a probe."""
    out = np.empty(n, dtype=np.float64)
    _fill(np.uint64(spec.seed), int(spec.distribution), start, out)
    return out.astype(dtype, copy=False)


def apply_probe(theta: np.ndarray, alpha: float, spec: ProbeSpec,
                chunk_size: int = DEFAULT_CHUNK_SIZE) -> np.ndarray:
    """In place: ``theta[i] += alpha * probe[i]`` for every ``i``.

    Each entry is rounded once to theta's dtype. Processed one chunk at a
    time; no scratch is allocated.
    """
    _check_theta(theta)
    alpha = float(alpha)
    if not math.isfinite(alpha):
        raise ValueError(f"non-finite alpha {alpha}")
    if alpha == 0.0:
        return theta
    seed = np.uint64(spec.seed)
    dist = int(spec.distribution)
    for start, stop in ChunkCursor(chunk_size).ranges(theta.shape[0]):
        _apply_range(theta, alpha, seed, dist, start, stop)
    return theta


def apply_probes(theta: np.ndarray, alphas, seeds, distribution=Distribution.RADEMACHER,
                 chunk_size: int = DEFAULT_CHUNK_SIZE) -> float:
    """Apply several probes in ascending order; returns the norm of the total change.

    Bit-identical to calling :func:`apply_probe` once per probe in order. Uses
    one ``chunk_size`` scratch buffer to measure the change.
    """
    _check_theta(theta)
    alphas = np.ascontiguousarray(alphas, dtype=np.float64)
    seeds = np.ascontiguousarray(seeds, dtype=np.uint64)
    if alphas.shape != seeds.shape:
        raise ValueError("alphas and seeds must have equal length")
    if not np.all(np.isfinite(alphas)):
        raise ValueError("non-finite alpha")
    chunk = max(1, min(int(chunk_size), theta.shape[0]))
    scratch = np.empty(chunk, dtype=theta.dtype)
    return float(_apply_many(theta, alphas, seeds, int(Distribution.parse(distribution)),
                             chunk, scratch))


def probe_norm_property(spec: ProbeSpec, d: int) -> float:
    """Exact Euclidean norm of a ``d``-dimensional Rademacher probe: sqrt(d)."""
    if spec.distribution is not Distribution.RADEMACHER:
        raise ValueError("constant probe norm only holds for Rademacher probes")
    return math.sqrt(d)


def pack_rademacher(spec: ProbeSpec, d: int) -> np.ndarray:
    """Bit-vector form of a Rademacher probe (1 bit per entry, +1 -> 1)."""
    if spec.distribution is not Distribution.RADEMACHER:
        raise ValueError("only Rademacher probes pack to bits")
    return np.packbits(probe_slice(spec, 0, d) > 0)


def unpack_rademacher(bits: np.ndarray, d: int, dtype=np.float32) -> np.ndarray:
    signs = np.unpackbits(np.asarray(bits, dtype=np.uint8), count=d)
    return (signs.astype(dtype) * 2 - 1).astype(dtype)
