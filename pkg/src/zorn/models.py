"""Character-level LSTM with an inference-only forward pass.

All weights live in one flat float array (a :class:`ParamVector`); named
tensors are views into it. The forward pass carries only the hidden state
from one time step to the next, so activation memory does not grow with
sequence length.

Dense weights are stored input-major, ``(fan_in, fan_out)``, so that the
kernel's ascending-k accumulation streams contiguous rows.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .numerics import ShapeError, rng_block, uniform01

CHECKPOINT_MAGIC = b"ZORN1"


@dataclass(frozen=True)
class LstmConfig:
    vocab_size: int
    hidden_dim: int
    embed_dim: int = 32
    num_layers: int = 1

    def __post_init__(self):
        for name in ("vocab_size", "hidden_dim", "embed_dim", "num_layers"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        V, E, H = self.vocab_size, self.embed_dim, self.hidden_dim
        shapes = [("embedding", (V, E))]
        for l in range(self.num_layers):
            fan_in = E if l == 0 else H
            shapes += [
                (f"layer{l}.w_in", (fan_in, 4 * H)),
                (f"layer{l}.w_rec", (H, 4 * H)),
                (f"layer{l}.bias", (4 * H,)),
            ]
        shapes += [("out.weight", (H, V)), ("out.bias", (V,))]
        return shapes

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for _, s in self.tensor_shapes())


@dataclass(frozen=True)
class TensorSlot:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


def make_layout(config: LstmConfig) -> tuple[TensorSlot, ...]:
    slots, off = [], 0
    for name, shape in config.tensor_shapes():
        n = math.prod(shape)
        slots.append(TensorSlot(name, off, n, shape))
        off += n
    return tuple(slots)


@dataclass
class ParamVector:
    """Flat parameter array plus the map from tensor names to index ranges."""

    values: np.ndarray
    layout: tuple[TensorSlot, ...]

    def __post_init__(self):
        total = sum(s.length for s in self.layout)
        if self.values.ndim != 1 or self.values.size != total:
            raise ShapeError(f"vector length {self.values.size} != layout total {total}")

    def __len__(self):
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


@dataclass
class LstmParams:
    config: LstmConfig
    vector: ParamVector
    tensors: dict[str, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        v = self.vector.values
        self.tensors = {s.name: v[s.offset:s.offset + s.length].reshape(s.shape)
                        for s in self.vector.layout}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def theta(self) -> np.ndarray:
        return self.vector.values

    @property
    def dtype(self):
        return self.vector.values.dtype

    def astype(self, dtype) -> "LstmParams":
        return LstmParams(self.config, ParamVector(self.theta.astype(dtype), self.vector.layout))


@dataclass
class HiddenState:
    h: np.ndarray  # (num_layers, hidden_dim)
    c: np.ndarray

    @classmethod
    def zeros(cls, config: LstmConfig, dtype=np.float32) -> "HiddenState":
        shape = (config.num_layers, config.hidden_dim)
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


def flatten(params: LstmParams) -> ParamVector:
    return params.vector.copy()


def unflatten(vec, layout, config: LstmConfig | None = None) -> LstmParams:
    values = vec.values if isinstance(vec, ParamVector) else np.asarray(vec)
    total = sum(s.length for s in layout)
    if values.ndim != 1 or values.size != total:
        raise ShapeError(f"vector length {values.size} != layout total {total}")
    if config is None:
        config = config_from_layout(layout)
    return LstmParams(config, ParamVector(values.copy(), tuple(layout)))


def config_from_layout(layout) -> LstmConfig:
    by = {s.name: s.shape for s in layout}
    V, E = by["embedding"]
    H = by["out.weight"][0]
    nl = sum(1 for s in layout if s.name.endswith(".w_rec"))
    return LstmConfig(vocab_size=V, hidden_dim=H, embed_dim=E, num_layers=nl)


def init_params(config: LstmConfig, seed: int, dtype=np.float32) -> LstmParams:
    """Uniform(-k, k) with k = 1/sqrt(hidden_dim); forget-gate biases set to 1."""
    layout = make_layout(config)
    k = 1.0 / math.sqrt(config.hidden_dim)
    words = rng_block(seed, 0, config.num_params)
    values = ((uniform01(words) * 2.0 - 1.0) * k).astype(dtype)
    params = LstmParams(config, ParamVector(values, layout))
    H = config.hidden_dim
    for l in range(config.num_layers):
        params[f"layer{l}.bias"][H:2 * H] = 1.0
    return params


# ---------------------------------------------------------------------------
# forward kernels
# ---------------------------------------------------------------------------

_LOG2E = 1.4426950408889634
_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10


@numba.njit(inline="always")
def _vexp(z, out, ibuf, n):
    """out[:n] = exp(z[:n]); vectorizable, within 1 ulp of libm on [-700, 700]."""
    for i in range(n):
        v = z[i]
        if v < -700.0:
            v = -700.0
        elif v > 700.0:
            v = 700.0
        k = math.floor(v * _LOG2E + 0.5)
        r = v - k * _LN2_HI - k * _LN2_LO
        p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6 + r * (1.0 / 24 + r * (
            1.0 / 120 + r * (1.0 / 720 + r * (1.0 / 5040 + r * (1.0 / 40320 + r * (
                1.0 / 362880 + r * (1.0 / 3628800 + r * (1.0 / 39916800 + r * (
                    1.0 / 479001600))))))))))))
        out[i] = p
        ibuf[i] = (np.int64(k) + 1023) << 52
    scale = ibuf.view(np.float64)
    for i in range(n):
        out[i] = out[i] * scale[i] + (z[i] - z[i])  # keeps NaN visible


@numba.njit(inline="always")
def _accum_rows(W, x, K, acc, G):
    """acc[j] += sum_k W[k, j] * x[k] for a row-major (K, G) block ``W``.

    Each acc[j] is updated in ascending k with float64 roundings; unrolling
    by four leaves that sequence unchanged.
    """
    k = 0
    while k + 4 <= K:
        x0 = np.float64(x[k])
        x1 = np.float64(x[k + 1])
        x2 = np.float64(x[k + 2])
        x3 = np.float64(x[k + 3])
        w0 = W[k * G:(k + 1) * G]
        w1 = W[(k + 1) * G:(k + 2) * G]
        w2 = W[(k + 2) * G:(k + 3) * G]
        w3 = W[(k + 3) * G:(k + 4) * G]
        for j in range(G):
            a = acc[j] + np.float64(w0[j]) * x0
            a = a + np.float64(w1[j]) * x1
            a = a + np.float64(w2[j]) * x2
            acc[j] = a + np.float64(w3[j]) * x3
        k += 4
    while k < K:
        x0 = np.float64(x[k])
        w0 = W[k * G:(k + 1) * G]
        for j in range(G):
            acc[j] += np.float64(w0[j]) * x0
        k += 1


@numba.njit(inline="always")
def _cell(theta, offs, E, H, NL, token, h, c, x, acc, e, ibuf):
    """Advance one sequence by one token; ``h``/``c`` are (NL, H)."""
    G = 4 * H
    base = offs[0] + token * E
    for k in range(E):
        x[k] = theta[base + k]
    fan_in = E
    for l in range(NL):
        w_in = offs[1 + 3 * l]
        w_rec = offs[2 + 3 * l]
        bias = offs[3 + 3 * l]
        for j in range(G):
            acc[j] = theta[bias + j]
        _accum_rows(theta[w_in:w_in + fan_in * G], x, fan_in, acc, G)
        _accum_rows(theta[w_rec:w_rec + H * G], h[l], H, acc, G)
        # gate order i, f, g, o; sigmoid(a) = 1/(1+exp(-a)), tanh(a) = 2/(1+exp(-2a)) - 1
        for j in range(G):
            acc[j] = -acc[j]
        for j in range(2 * H, 3 * H):
            acc[j] = 2.0 * acc[j]
        _vexp(acc, e, ibuf, G)
        for j in range(H):
            ig = 1.0 / (1.0 + e[j])
            fg = 1.0 / (1.0 + e[H + j])
            gg = 2.0 / (1.0 + e[2 * H + j]) - 1.0
            c[l, j] = fg * np.float64(c[l, j]) + ig * gg
            acc[j] = -2.0 * np.float64(c[l, j])
        _vexp(acc, e, ibuf, H)
        for j in range(H):
            og = 1.0 / (1.0 + e[3 * H + j])
            h[l, j] = og * (2.0 / (1.0 + e[j]) - 1.0)
            x[j] = h[l, j]
        fan_in = H


@numba.njit(inline="always")
def _logits(theta, offs, V, H, NL, h, logits):
    ow = offs[1 + 3 * NL]
    ob = offs[2 + 3 * NL]
    top = NL - 1
    for v in range(V):
        logits[v] = theta[ob + v]
    _accum_rows(theta[ow:ow + H * V], h[top], H, logits, V)


@numba.njit(inline="always")
def _nll(logits, V, target):
    m = logits[0]
    for v in range(1, V):
        if logits[v] > m:
            m = logits[v]
    s = 0.0
    for v in range(V):
        s += math.exp(logits[v] - m)
    return m + math.log(s) - logits[target]


@numba.njit(cache=True)
def _step_kernel(theta, offs, V, E, H, NL, token, h, c, x, acc, e, ibuf, logits):
    _cell(theta, offs, E, H, NL, token, h, c, x, acc, e, ibuf)
    _logits(theta, offs, V, H, NL, h, logits)


@numba.njit(cache=True)
def _forward_loss(theta, offs, V, E, H, NL, inputs, targets, mask, lengths,
                  h, c, x, acc, e, ibuf, logits):
    # one sequence at a time: state is O(a_max) and the loss sum runs in
    # (batch, time) order
    B, T = inputs.shape
    total = 0.0
    count = 0
    for b in range(B):
        for l in range(NL):
            for j in range(H):
                h[l, j] = 0.0
                c[l, j] = 0.0
        last = 0
        for t in range(T):
            if mask[b, t]:
                last = t + 1
        for t in range(last):
            _cell(theta, offs, E, H, NL, inputs[b, t], h, c, x, acc, e, ibuf)
            if mask[b, t]:
                _logits(theta, offs, V, H, NL, h, logits)
                total += _nll(logits, V, targets[b, t])
                count += 1
    return total / count


def _offsets(config: LstmConfig) -> np.ndarray:
    return np.array([s.offset for s in make_layout(config)], dtype=np.int64)


class ForwardWorkspace:
    """Scratch for the forward pass. Sized by the model only: it does not grow
    with batch size or sequence length."""

    def __init__(self, config: LstmConfig, dtype=np.float32):
        H, NL, G = config.hidden_dim, config.num_layers, 4 * config.hidden_dim
        self.key = (config, np.dtype(dtype))
        self.offs = _offsets(config)
        self.h = np.zeros((NL, H), dtype=dtype)
        self.c = np.zeros((NL, H), dtype=dtype)
        self.x = np.zeros(max(config.embed_dim, H), dtype=dtype)
        self.acc = np.zeros(G)
        self.e = np.zeros(G)
        self.ibuf = np.zeros(G, dtype=np.int64)
        self.logits = np.zeros(config.vocab_size)

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.h, self.c, self.x, self.acc, self.e,
                                      self.ibuf, self.logits))


def _theta_of(params) -> tuple[LstmConfig, np.ndarray]:
    if isinstance(params, LstmParams):
        return params.config, params.theta
    raise TypeError("expected LstmParams")


def forward_loss(params: LstmParams, batch, workspace: ForwardWorkspace | None = None,
                 theta: np.ndarray | None = None) -> float:
    """Mean masked cross-entropy (nats) under teacher forcing.

    ``theta`` overrides the parameter values (same layout) without building a
    new :class:`LstmParams`; the training loops use this.
    """
    config, values = _theta_of(params)
    if theta is not None:
        values = theta
    if values.size != config.num_params:
        raise ShapeError("theta length does not match the model")
    inputs, targets, mask = batch.inputs, batch.targets, batch.loss_mask
    B, T = inputs.shape
    if B == 0 or not mask.any():
        raise ValueError("loss mask selects no positions")
    if inputs.max(initial=0) >= config.vocab_size or targets[mask].max(initial=0) >= config.vocab_size:
        raise ValueError("token id out of range for the model vocabulary")
    ws = workspace
    if ws is None or ws.key != (config, values.dtype):
        ws = ForwardWorkspace(config, values.dtype)
    return float(_forward_loss(values, ws.offs, config.vocab_size, config.embed_dim,
                               config.hidden_dim, config.num_layers,
                               np.ascontiguousarray(inputs, dtype=np.int32),
                               np.ascontiguousarray(targets, dtype=np.int32),
                               np.ascontiguousarray(mask, dtype=np.uint8),
                               np.ascontiguousarray(batch.lengths, dtype=np.int32),
                               ws.h, ws.c, ws.x, ws.acc, ws.e, ws.ibuf, ws.logits))


class ModelLoss:
    """Black-box loss ``theta -> forward_loss`` on one fixed batch."""

    def __init__(self, params: LstmParams, batch):
        self.params = params
        self.batch = batch
        self.workspace = ForwardWorkspace(params.config, params.dtype)

    def __call__(self, theta: np.ndarray) -> float:
        return forward_loss(self.params, self.batch, self.workspace, theta=theta)


def lstm_step(params: LstmParams, state: HiddenState, token: int) -> tuple[np.ndarray, HiddenState]:
    """One token through the network; returns (logits, new state)."""
    config, theta = _theta_of(params)
    if not 0 <= token < config.vocab_size:
        raise ValueError(f"token {token} outside vocabulary of {config.vocab_size}")
    ws = ForwardWorkspace(config, theta.dtype)
    ws.h[:] = state.h
    ws.c[:] = state.c
    _step_kernel(theta, ws.offs, config.vocab_size, config.embed_dim, config.hidden_dim,
                 config.num_layers, token, ws.h, ws.c, ws.x, ws.acc, ws.e, ws.ibuf, ws.logits)
    return ws.logits.copy(), HiddenState(ws.h.copy(), ws.c.copy())


def activation_floats(config: LstmConfig, batch_size: int) -> tuple[int, int]:
    """(a_max, A): largest single-layer activation and total per-step activations,
    counted in values per sequence times ``batch_size``."""
    H, E, V = config.hidden_dim, config.embed_dim, config.vocab_size
    per_layer = 4 * H + 2 * H  # gates plus (c, h)
    a_max = max(per_layer, V, E)
    A = E + config.num_layers * (per_layer + H) + V
    return batch_size * a_max, batch_size * A


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: LstmParams) -> None:
    cfg = params.config
    header = CHECKPOINT_MAGIC + struct.pack("<4I", cfg.vocab_size, cfg.embed_dim,
                                            cfg.hidden_dim, cfg.num_layers)
    body = np.ascontiguousarray(params.theta, dtype="<f4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)


def load_checkpoint(path) -> LstmParams:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a ZORN1 checkpoint")
    V, E, H, NL = struct.unpack_from("<4I", raw, 5)
    config = LstmConfig(vocab_size=V, hidden_dim=H, embed_dim=E, num_layers=NL)
    values = np.frombuffer(raw, dtype="<f4", offset=5 + 16).astype(np.float32)
    if values.size != config.num_params:
        raise ShapeError(f"{path}: expected {config.num_params} floats, found {values.size}")
    return LstmParams(config, ParamVector(values, make_layout(config)))
