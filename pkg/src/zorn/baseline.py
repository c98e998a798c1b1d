"""Backpropagation through time for the LSTM, plus AdamW.

Used as the comparison optimizer and as an independent check on the forward
pass: the gradient here is derived by hand and computed in float64 with plain
numpy, while the forward-only path runs the compiled kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .models import LstmConfig, LstmParams, init_params, make_layout


@dataclass
class TapeStep:
    """Activations kept for one (layer, time) cell, each of shape (B, .)."""

    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.x, self.h_prev, self.c_prev, self.i, self.f,
                                      self.g, self.o, self.c, self.tanh_c))


@dataclass
class Tape:
    steps: list[list[TapeStep]]  # [t][layer]
    probs: list[np.ndarray]      # softmax per time step, (B, V)
    h_top: list[np.ndarray]

    @property
    def nbytes(self) -> int:
        return (sum(s.nbytes for row in self.steps for s in row)
                + sum(p.nbytes for p in self.probs) + sum(h.nbytes for h in self.h_top))


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def _tensors(config: LstmConfig, theta: np.ndarray) -> dict[str, np.ndarray]:
    return {s.name: theta[s.offset:s.offset + s.length].reshape(s.shape)
            for s in make_layout(config)}


def forward_tape(config: LstmConfig, theta: np.ndarray, batch) -> tuple[float, Tape]:
    """Float64 forward pass over the whole batch, recording the tape."""
    P = _tensors(config, np.asarray(theta, dtype=np.float64))
    H, NL = config.hidden_dim, config.num_layers
    inputs, targets = batch.inputs, batch.targets
    mask = batch.loss_mask.astype(np.float64)
    B, T = inputs.shape
    count = mask.sum()
    if count == 0:
        raise ValueError("loss mask selects no positions")
    h = [np.zeros((B, H)) for _ in range(NL)]
    c = [np.zeros((B, H)) for _ in range(NL)]
    tape = Tape([], [], [])
    total = 0.0
    rows = np.arange(B)
    for t in range(T):
        x = P["embedding"][inputs[:, t]]
        cells = []
        for l in range(NL):
            a = x @ P[f"layer{l}.w_in"] + h[l] @ P[f"layer{l}.w_rec"] + P[f"layer{l}.bias"]
            i = _sigmoid(a[:, :H])
            f = _sigmoid(a[:, H:2 * H])
            g = np.tanh(a[:, 2 * H:3 * H])
            o = _sigmoid(a[:, 3 * H:])
            c_new = f * c[l] + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            cells.append(TapeStep(x, h[l], c[l], i, f, g, o, c_new, tc))
            h[l], c[l] = h_new, c_new
            x = h_new
        logits = x @ P["out.weight"] + P["out.bias"]
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        nll = lse - z[rows, targets[:, t]]
        total += float(np.dot(nll, mask[:, t]))
        tape.steps.append(cells)
        tape.probs.append(np.exp(z - lse[:, None]))
        tape.h_top.append(x)
    return total / count, tape


def bptt_grad(params: LstmParams, batch, theta: np.ndarray | None = None):
    """Exact gradient of the mean masked cross-entropy. Returns ``(grad, loss, tape)``.

    The gradient is a float64 vector in the parameter layout.
    """
    config = params.config
    theta = params.theta if theta is None else theta
    loss, tape = forward_tape(config, theta, batch)
    P = _tensors(config, np.asarray(theta, dtype=np.float64))
    grad = np.zeros(config.num_params)
    G = _tensors(config, grad)
    H, NL = config.hidden_dim, config.num_layers
    mask = batch.loss_mask.astype(np.float64)
    B, T = batch.inputs.shape
    rows = np.arange(B)
    scale = 1.0 / mask.sum()
    dh = [np.zeros((B, H)) for _ in range(NL)]
    dc = [np.zeros((B, H)) for _ in range(NL)]
    for t in range(T - 1, -1, -1):
        dlogits = tape.probs[t].copy()
        dlogits[rows, batch.targets[:, t]] -= 1.0
        dlogits *= (mask[:, t] * scale)[:, None]
        G["out.weight"] += tape.h_top[t].T @ dlogits
        G["out.bias"] += dlogits.sum(axis=0)
        dx = dlogits @ P["out.weight"].T
        for l in range(NL - 1, -1, -1):
            s = tape.steps[t][l]
            dh_l = dh[l] + dx
            do = dh_l * s.tanh_c
            dc_l = dc[l] + dh_l * s.o * (1.0 - s.tanh_c ** 2)
            di = dc_l * s.g
            dg = dc_l * s.i
            df = dc_l * s.c_prev
            da = np.concatenate([di * s.i * (1 - s.i), df * s.f * (1 - s.f),
                                 dg * (1 - s.g ** 2), do * s.o * (1 - s.o)], axis=1)
            G[f"layer{l}.w_in"] += s.x.T @ da
            G[f"layer{l}.w_rec"] += s.h_prev.T @ da
            G[f"layer{l}.bias"] += da.sum(axis=0)
            dh[l] = da @ P[f"layer{l}.w_rec"].T
            dc[l] = dc_l * s.f
            dx = da @ P[f"layer{l}.w_in"].T
        np.add.at(G["embedding"], batch.inputs[:, t], dx)
    return grad, loss, tape


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> float:
    """Scale ``grad`` in place to global norm ``max_norm``; returns the norm before clipping."""
    norm = float(np.sqrt(np.dot(grad, grad)))
    if norm > max_norm:
        grad *= max_norm / norm
    return norm


@dataclass
class AdamWState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.99, 0.999)
    weight_decay: float = 0.1
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adamw_step(theta: np.ndarray, grad: np.ndarray, state: AdamWState) -> np.ndarray:
    """In-place AdamW update with decoupled weight decay."""
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    if state.m is None:
        state.m = np.zeros(theta.shape)
        state.v = np.zeros(theta.shape)
    if state.m.shape != theta.shape:
        raise ValueError("optimizer state does not match the parameters")
    b1, b2 = state.betas
    state.step += 1
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    work = theta.astype(np.float64)
    work -= state.lr * state.weight_decay * work
    work -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    theta[:] = work
    return theta


@dataclass
class TrainResult:
    params: LstmParams
    losses: list[float] = field(default_factory=list)
    val_losses: list[tuple[int, float]] = field(default_factory=list)
    steps_to_threshold: int | None = None
    diverged: bool = False


def bptt_train(config: LstmConfig, batch_fn: Callable[[int], object], steps: int, seed: int,
               opt: AdamWState | None = None, clip: float | None = 1.0,
               threshold: float | None = None, eval_fn=None, eval_every: int = 0,
               callback=None) -> TrainResult:
    """Deterministic BPTT training loop.

    ``batch_fn(step)`` supplies the batch of each step. ``losses[k]`` is the
    loss before update ``k``; with ``steps = 0`` only the initial loss is
    recorded. Stops early once the loss drops below ``threshold``.
    """
    opt = AdamWState() if opt is None else opt
    params = init_params(config, seed)
    theta = params.theta
    result = TrainResult(params)
    for k in range(steps + 1):
        batch = batch_fn(k)
        grad, loss, _ = bptt_grad(params, batch)
        result.losses.append(loss)
        if not math.isfinite(loss):
            result.diverged = True
            break
        if threshold is not None and loss < threshold:
            result.steps_to_threshold = k
            break
        if eval_fn is not None and eval_every and k % eval_every == 0:
            result.val_losses.append((k, eval_fn(params)))
        if callback is not None:
            callback(k, loss, params)
        if k == steps:
            break
        if clip is not None:
            clip_grad_norm(grad, clip)
        adamw_step(theta, grad, opt)
    return result
