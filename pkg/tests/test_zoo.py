import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zorn.models import LstmConfig, ModelLoss, init_params
from zorn.probes import Distribution, ProbeSpec, probe_slice
from zorn.tasks import gen_transduction
from zorn.zoo import (DivergenceError, Estimator, StepConfig, ackley, cd_rge, cdrge_step,
                      estimate, estimate_gradient, fd_antithetic, fd_rge, probe_seed,
                      smoothed_loss, variance_probe)


def with_probe(vector):
    """Search for a seed whose Rademacher probe equals ``vector``."""
    vector = np.asarray(vector)
    for seed in range(10_000):
        spec = ProbeSpec(seed)
        if np.array_equal(probe_slice(spec, 0, vector.size), vector):
            return seed
    raise AssertionError("no seed found")


def half_square(theta):
    return 0.5 * float(np.dot(theta, theta))


def test_constant_loss_gives_zero():
    theta = np.array([1.0, 2.0])
    spec = ProbeSpec(1, epsilon=0.1)
    assert fd_rge(lambda t: 3.0, theta, spec) == 0.0
    assert cd_rge(lambda t: 3.0, theta, spec) == 0.0
    assert fd_antithetic(lambda t: 3.0, theta, spec) == 0.0


def test_quadratic_closed_forms():
    seed = with_probe([1.0, 1.0])
    theta = np.array([1.0, 0.0])
    spec = ProbeSpec(seed, epsilon=0.1)
    assert fd_rge(half_square, theta, spec) == pytest.approx(1.1, rel=1e-12)
    assert cd_rge(half_square, theta, spec) == pytest.approx(1.0, rel=1e-12)
    assert fd_antithetic(half_square, theta, spec) == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_allclose(theta, [1.0, 0.0], rtol=0, atol=1e-15)


def test_fd_bias_is_first_order():
    seed = with_probe([1.0, 1.0])
    theta = np.array([1.0, 0.0])
    err = [fd_rge(half_square, theta, ProbeSpec(seed, epsilon=e)) - 1.0 for e in (0.1, 0.05)]
    assert err[0] / err[1] == pytest.approx(2.0, rel=0.1)


def cube(theta):
    return float(theta[0] ** 3)


def test_cd_on_odd_cubic():
    seed = with_probe([1.0])
    for eps in (0.5, 0.1, 0.01):
        got = cd_rge(cube, np.zeros(1), ProbeSpec(seed, epsilon=eps))
        assert got == pytest.approx(eps ** 2, rel=1e-9)


def test_bias_orders_on_cubic():
    seed = with_probe([1.0])
    theta = np.ones(1)

    def bias(fn, eps):
        return fn(cube, theta.copy(), ProbeSpec(seed, epsilon=eps)) - 3.0

    assert 1.8 <= bias(fd_rge, 0.1) / bias(fd_rge, 0.05) <= 2.2
    assert 3.5 <= bias(cd_rge, 0.1) / bias(cd_rge, 0.05) <= 4.5


def test_symmetric_loss_gives_zero():
    seed = with_probe([1.0, -1.0])
    # symmetric about 0 along p
    assert cd_rge(half_square, np.zeros(2), ProbeSpec(seed, epsilon=0.3)) == 0.0


@given(st.integers(0, 2**32), st.floats(1e-4, 1.0), st.integers(1, 20))
@settings(max_examples=60, deadline=None)
def test_antithetic_equals_central(seed, eps, d):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(d)
    spec = ProbeSpec(seed, epsilon=eps)
    a = fd_antithetic(ackley, theta.copy(), spec)
    c = cd_rge(ackley, theta.copy(), spec)
    assert a == pytest.approx(c, rel=1e-6, abs=1e-9)


@given(st.integers(0, 2**32), st.floats(1e-3, 1.0))
@settings(max_examples=60, deadline=None)
def test_cd_is_exact_on_quadratics(seed, eps):
    rng = np.random.default_rng(seed)
    d = 8
    M = rng.standard_normal((d, d))
    A = M @ M.T
    b = rng.standard_normal(d)
    theta = rng.standard_normal(d)

    def quad(t):
        return float(0.5 * t @ A @ t + b @ t)

    spec = ProbeSpec(seed, epsilon=eps)
    p = probe_slice(spec, 0, d)
    exact = float((A @ theta + b) @ p)
    assert cd_rge(quad, theta, spec) == pytest.approx(exact, rel=1e-8, abs=1e-8)


def test_divergence_is_reported():
    def bad(theta):
        return float("nan")

    with pytest.raises(DivergenceError):
        cd_rge(bad, np.zeros(3), ProbeSpec(1))
    with pytest.raises(DivergenceError):
        fd_rge(bad, np.zeros(3), ProbeSpec(1))


def test_step_hand_arithmetic():
    cfg = StepConfig(0.5, n_pert=1, base_seed=0)
    # pick a base seed whose first probe is +1
    base = next(b for b in range(100) if probe_slice(ProbeSpec(probe_seed(b, 1)), 0, 1)[0] == 1)
    theta = np.array([1.0])
    _, report = cdrge_step(half_square, theta, cfg.replace(base_seed=base))
    assert tuple(report.loss_pairs[0]) == (0.125, 1.125)
    assert theta[0] == 0.5


def test_step_on_constant_loss_keeps_theta():
    theta = np.linspace(-1, 1, 50).astype(np.float32)
    before = theta.copy()
    cdrge_step(lambda t: 1.0, theta, StepConfig(0.01, n_pert=1, exact_restore=True))
    assert theta.tobytes() == before.tobytes()


def test_tied_step_has_no_epsilon_in_update():
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(30)
    cfg = StepConfig(0.01, n_pert=5, base_seed=11, exact_restore=True)
    est = estimate(half_square, theta.copy(), cfg)
    expected = theta.copy()
    for spec, (lm, lp) in zip(est.specs, est.loss_pairs):
        expected -= (lp - lm) / (2 * cfg.n_pert) * probe_slice(spec, 0, 30)
    got = theta.copy()
    cdrge_step(half_square, got, cfg)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)
    untied = theta.copy()
    cdrge_step(half_square, untied, cfg.replace(eta=0.02))
    np.testing.assert_allclose(untied - theta, 2 * (got - theta), rtol=1e-12)


def test_step_is_deterministic():
    params = init_params(LstmConfig(29, 16), 0)
    batch = gen_transduction("copy", 2, (1, 5), seed=0)
    loss = ModelLoss(params, batch)
    a = params.theta.copy()
    b = params.theta.copy()
    cfg = StepConfig(0.01, n_pert=4, base_seed=3)
    cdrge_step(loss, a, cfg)
    cdrge_step(loss, b, cfg)
    assert a.tobytes() == b.tobytes()


def test_nan_loss_restores_theta():
    calls = []

    def flaky(theta):
        calls.append(1)
        return float("inf") if len(calls) == 3 else half_square(theta)

    theta = np.arange(10, dtype=np.float32)
    before = theta.copy()
    with pytest.raises(DivergenceError):
        cdrge_step(flaky, theta, StepConfig(0.1, n_pert=4))
    assert theta.tobytes() == before.tobytes()


def test_unbiased_with_many_probes():
    d = 10
    rng = np.random.default_rng(5)
    theta = rng.standard_normal(d)
    g = estimate_gradient(half_square, theta, StepConfig(1e-3, n_pert=10_000, base_seed=1))
    assert np.linalg.norm(g - theta) / np.linalg.norm(theta) < 0.05


def test_error_shrinks_with_more_probes():
    d = 20
    rng = np.random.default_rng(2)
    A = np.diag(rng.uniform(0.5, 2, d))
    theta = rng.standard_normal(d)
    grad = A @ theta

    def quad(t):
        return float(0.5 * t @ A @ t)

    errs = [np.linalg.norm(estimate_gradient(quad, theta, StepConfig(1e-3, n_pert=n, base_seed=7))
                           - grad) for n in (8, 64, 512)]
    assert errs[0] > errs[1] > errs[2]


def test_variance_halves_when_probes_double():
    rng = np.random.default_rng(3)
    theta = rng.standard_normal(20)
    v1 = variance_probe(half_square, theta, StepConfig(1e-3, n_pert=50), trials=100)
    v2 = variance_probe(half_square, theta, StepConfig(1e-3, n_pert=100), trials=100)
    assert 2 / 1.5 <= v1 / v2 <= 2 * 1.5


def test_identical_seeds_zero_variance():
    theta = np.ones(5)
    assert variance_probe(half_square, theta, StepConfig(0.1, n_pert=3), 2, seeds=[4, 4]) == 0.0
    with pytest.raises(ValueError):
        variance_probe(half_square, theta, StepConfig(0.1), 1)


def test_fd_step_reuses_clean_loss():
    calls = []

    def counted(theta):
        calls.append(1)
        return half_square(theta)

    cdrge_step(counted, np.ones(4), StepConfig(0.1, n_pert=6, estimator=Estimator.FD))
    assert len(calls) == 7
    calls.clear()
    cdrge_step(counted, np.ones(4), StepConfig(0.1, n_pert=6))
    assert len(calls) == 12


def test_config_validation():
    with pytest.raises(ValueError):
        StepConfig(0.0)
    with pytest.raises(ValueError):
        StepConfig(0.1, eta=-1)
    with pytest.raises(ValueError):
        StepConfig(0.1, n_pert=0)
    assert StepConfig(0.1, n_pert=4).n_queries == 8
    assert StepConfig(0.1, n_pert=4, estimator="fd").n_queries == 5


def test_ackley_values():
    slack = 2 * np.finfo(float).eps  # e + 20 - 20 - e does not cancel exactly
    assert abs(ackley(np.zeros(1))) <= slack
    assert abs(ackley(np.zeros(100))) <= slack
    x = np.ones(2)
    direct = (-20 * math.exp(-0.2) - math.exp(math.cos(2 * math.pi)) + 20 + math.e)
    assert ackley(x) == pytest.approx(direct, rel=1e-14)
    assert ackley(x) == pytest.approx(3.6254, abs=1e-4)
    pts = np.random.default_rng(0).uniform(-30, 30, size=(10_000, 3))
    assert min(ackley(p) for p in pts) >= 0
    with pytest.raises(ValueError):
        ackley(np.zeros(0))


def test_smoothed_loss_small_epsilon():
    theta = np.array([0.3, -0.7, 1.1])
    sm = smoothed_loss(ackley, theta, 1e-5, n_samples=200)
    assert abs(sm.mean - ackley(theta)) < 1e-4


def test_smoothed_loss_of_linear_function():
    a = np.array([1.0, -2.0, 0.5, 3.0])
    theta = np.array([0.1, 0.2, 0.3, 0.4])
    for dist in Distribution:
        sm = smoothed_loss(lambda t: float(a @ t), theta, 0.5, dist, n_samples=20_000, seed=1)
        assert abs(sm.mean - a @ theta) < 5 * sm.stderr + 1e-12


def test_rademacher_smoothing_of_ackley_at_origin():
    # every |x_i| equals epsilon, so the surrogate is the 1-d profile at epsilon
    for eps in (0.1, 0.5, 1.0, 1.7):
        sm = smoothed_loss(ackley, np.zeros(2), eps, n_samples=500)
        assert sm.mean == pytest.approx(ackley(np.array([eps])), rel=1e-12)
        assert sm.stderr < 1e-12


def test_smoothed_loss_exclusion_limit():
    calls = []

    def sometimes_nan(theta):
        calls.append(1)
        return float("nan") if len(calls) % 50 == 0 else 1.0

    with pytest.raises(DivergenceError):
        smoothed_loss(sometimes_nan, np.zeros(2), 0.1, n_samples=100)
    calls.clear()

    def rarely_nan(theta):
        calls.append(1)
        return float("nan") if len(calls) == 500 else 1.0

    sm = smoothed_loss(rarely_nan, np.zeros(2), 0.1, n_samples=1000)
    assert sm.n_excluded == 1 and sm.n_used == 999
