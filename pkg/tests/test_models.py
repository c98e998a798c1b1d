import math
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zorn.models import (ForwardWorkspace, HiddenState, LstmConfig, ModelLoss, activation_floats,
                         flatten, forward_loss, init_params, load_checkpoint, lstm_step,
                         make_layout, save_checkpoint, unflatten)
from zorn.numerics import ShapeError
from zorn.tasks import TaskBatch, gen_transduction


def reference_forward(params, batch):
    """Plain numpy float64 LSTM, one position at a time."""
    cfg = params.config
    P = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    H = cfg.hidden_dim

    def sig(a):
        return 1 / (1 + np.exp(-a))

    total, count = 0.0, 0
    for b in range(batch.inputs.shape[0]):
        h = np.zeros((cfg.num_layers, H))
        c = np.zeros((cfg.num_layers, H))
        for t in range(batch.inputs.shape[1]):
            x = P["embedding"][batch.inputs[b, t]]
            for l in range(cfg.num_layers):
                a = x @ P[f"layer{l}.w_in"] + h[l] @ P[f"layer{l}.w_rec"] + P[f"layer{l}.bias"]
                i, f, g, o = sig(a[:H]), sig(a[H:2 * H]), np.tanh(a[2 * H:3 * H]), sig(a[3 * H:])
                c[l] = f * c[l] + i * g
                h[l] = o * np.tanh(c[l])
                x = h[l]
            if batch.loss_mask[b, t]:
                logits = x @ P["out.weight"] + P["out.bias"]
                m = logits.max()
                total += m + math.log(np.exp(logits - m).sum()) - logits[batch.targets[b, t]]
                count += 1
    return total / count


def test_param_count_and_layout():
    cfg = LstmConfig(29, 140)
    assert cfg.num_params == 29 * 32 + 32 * 560 + 140 * 560 + 560 + 140 * 29 + 29 == 101_897
    layout = make_layout(cfg)
    assert layout[0].offset == 0
    for a, b in zip(layout, layout[1:]):
        assert b.offset == a.offset + a.length
    assert sum(s.length for s in layout) == cfg.num_params


def test_flatten_round_trip():
    params = init_params(LstmConfig(11, 6, 4, 2), 3)
    vec = flatten(params)
    back = unflatten(vec, vec.layout)
    assert back.config == params.config
    assert back.theta.tobytes() == params.theta.tobytes()
    for name, t in params.tensors.items():
        np.testing.assert_array_equal(back[name], t)
    with pytest.raises(ShapeError):
        unflatten(vec.values[:-1], vec.layout)


def test_init_is_seeded_and_bounded():
    cfg = LstmConfig(29, 16)
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert a.theta.tobytes() != init_params(cfg, 8).theta.tobytes()
    k = 1 / math.sqrt(16)
    assert np.all(a["layer0.bias"][16:32] == 1.0)
    others = np.concatenate([a["embedding"].ravel(), a["layer0.w_rec"].ravel()])
    assert np.abs(others).max() <= k


@pytest.mark.parametrize("layers", [1, 2])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_forward_matches_reference(layers, dtype):
    cfg = LstmConfig(29, 12, 5, layers)
    params = init_params(cfg, 1, dtype)
    params.theta[:] += np.random.default_rng(0).uniform(-0.3, 0.3, cfg.num_params).astype(dtype)
    batch = gen_transduction("reverse", 3, (1, 6), seed=2)
    got = forward_loss(params, batch)
    want = reference_forward(params, batch)
    tol = 1e-12 if dtype == np.float64 else 1e-5
    assert got == pytest.approx(want, rel=tol)


def test_uniform_output_gives_log_vocab():
    cfg = LstmConfig(29, 8)
    params = init_params(cfg, 0, np.float64)
    params["out.weight"][:] = 0
    params["out.bias"][:] = 0
    batch = gen_transduction("copy", 4, (1, 10), seed=0)
    assert forward_loss(params, batch) == pytest.approx(math.log(29), rel=1e-12)


def test_forward_is_bit_reproducible():
    params = init_params(LstmConfig(29, 32), 0)
    batch = gen_transduction("copy", 4, (1, 10), seed=0)
    loss = ModelLoss(params, batch)
    values = {loss(params.theta) for _ in range(5)}
    assert len(values) == 1


def test_forward_input_errors():
    params = init_params(LstmConfig(5, 4), 0)
    ok = TaskBatch(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2), bool), [2])
    with pytest.raises(ValueError):
        forward_loss(params, ok)
    bad = TaskBatch(np.full((1, 2), 7), np.zeros((1, 2)), np.ones((1, 2), bool), [2])
    with pytest.raises(ValueError):
        forward_loss(params, bad)
    with pytest.raises(ShapeError):
        forward_loss(params, ok, theta=np.zeros(3, np.float32))


def test_lstm_step_matches_forward():
    cfg = LstmConfig(7, 6, 3)
    params = init_params(cfg, 4, np.float64)
    tokens = [1, 5, 2, 6]
    state = HiddenState.zeros(cfg, np.float64)
    total = 0.0
    for tok, nxt in zip(tokens, tokens[1:] + [0]):
        logits, state = lstm_step(params, state, tok)
        m = logits.max()
        total += m + math.log(np.exp(logits - m).sum()) - logits[nxt]
    batch = TaskBatch([tokens], [tokens[1:] + [0]], np.ones((1, 4), bool), [4])
    assert total / 4 == pytest.approx(forward_loss(params, batch), rel=1e-13)
    with pytest.raises(ValueError):
        lstm_step(params, state, 7)


def test_workspace_independent_of_batch_and_length():
    cfg = LstmConfig(29, 64)
    ws = ForwardWorkspace(cfg)
    assert ws.nbytes < 64 * 4 * 8 * 4
    H = cfg.hidden_dim
    a_max, A = activation_floats(cfg, 1)
    assert a_max == 6 * H
    assert A == 32 + 7 * H + 29


def test_forward_allocation_does_not_grow_with_length():
    cfg = LstmConfig(29, 64)
    params = init_params(cfg, 0)
    ws = ForwardWorkspace(cfg)
    peaks = []
    for n in (5, 50):
        batch = gen_transduction("copy", 8, (n, n), seed=0)
        forward_loss(params, batch, ws)
        tracemalloc.start()
        forward_loss(params, batch, ws)
        peaks.append(tracemalloc.get_traced_memory()[1])
        tracemalloc.stop()
    # only the int32/uint8 views of the batch itself may differ
    assert abs(peaks[1] - peaks[0]) <= 8 * 101 * 9 + 1024


def test_checkpoint_round_trip(tmp_path):
    params = init_params(LstmConfig(13, 10, 4, 2), 2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert back.config == params.config
    assert back.theta.tobytes() == params.theta.tobytes()
    raw = path.read_bytes()
    assert raw[:5] == b"ZORN1"
    assert len(raw) == 5 + 16 + 4 * params.config.num_params
    path.write_bytes(raw[:-4])
    with pytest.raises(ShapeError):
        load_checkpoint(path)


@given(st.integers(1, 3), st.integers(1, 6), st.integers(0, 1000))
@settings(max_examples=15, deadline=None)
def test_loss_is_finite_and_positive(B, L, seed):
    params = init_params(LstmConfig(29, 8), seed)
    batch = gen_transduction("copy", B, (1, L), seed=seed)
    value = forward_loss(params, batch)
    assert math.isfinite(value) and value > 0
