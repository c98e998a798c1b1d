"""Estimator property checks shared by the ``diag`` command and the test suite.

Each check returns a :class:`CheckResult` holding the measured value, the
accepted band and whether the value fell inside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import rng_at
from .probes import Distribution, ProbeSpec, probe_slice
from .zoo import (StepConfig, ackley, cd_rge, estimate_gradient, fd_antithetic, fd_rge,
                  smoothed_loss, variance_probe)

ACKLEY_EPSILONS = (0.1, 0.5, 1.0, 1.7)


@dataclass
class CheckResult:
    name: str
    value: float
    band: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}  {self.name}: {self.value:.6g}  (expected {self.band})"


class Quadratic:
    """L(x) = 0.5 x'Ax + b'x with a known gradient."""

    def __init__(self, d: int, seed: int, diagonal: bool = False):
        rng = np.random.default_rng(seed)
        if diagonal:
            self.A = np.diag(rng.uniform(0.5, 2.0, d))
        else:
            M = rng.standard_normal((d, d)) / math.sqrt(d)
            self.A = M @ M.T + np.eye(d)
        self.b = rng.standard_normal(d)

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(0.5 * x @ self.A @ x + self.b @ x)

    def grad(self, x) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=np.float64) + self.b


def _cube(theta) -> float:
    return float(theta[0] ** 3)


def _unit_seed() -> int:
    """A probe seed whose first Rademacher entry is +1."""
    return next(s for s in range(64) if probe_slice(ProbeSpec(s), 0, 1)[0] > 0)


def check_unbiasedness(d: int = 10, epsilon: float = 1e-3, n_pert: int = 10_000,
                       seed: int = 0, tol: float = 0.05) -> CheckResult:
    q = Quadratic(d, seed)
    theta = np.random.default_rng(seed + 1).standard_normal(d)
    g = estimate_gradient(q, theta, StepConfig(epsilon, n_pert=n_pert, base_seed=seed))
    true = q.grad(theta)
    err = float(np.linalg.norm(g - true) / np.linalg.norm(true))
    return CheckResult("unbiasedness", err, f"< {tol}", err < tol,
                       {"d": d, "epsilon": epsilon, "n_pert": n_pert})


def check_variance_scaling(d: int = 50, epsilon: float = 1e-3, n_small: int = 100,
                           n_large: int = 400, trials: int = 200, seed: int = 0,
                           band=(2.6, 6.0)) -> CheckResult:
    q = Quadratic(d, seed)
    theta = np.random.default_rng(seed + 1).standard_normal(d)
    v_small = variance_probe(q, theta, StepConfig(epsilon, n_pert=n_small, base_seed=seed), trials)
    v_large = variance_probe(q, theta, StepConfig(epsilon, n_pert=n_large,
                                                  base_seed=seed + 7919), trials)
    ratio = v_small / v_large
    return CheckResult("variance scaling", ratio, f"in [{band[0]}, {band[1]}]",
                       band[0] <= ratio <= band[1],
                       {"var_small": v_small, "var_large": v_large,
                        "n_small": n_small, "n_large": n_large, "trials": trials})


def bias_ratios(epsilon: float = 0.1) -> tuple[float, float]:
    """Bias at eps over bias at eps/2 for FD and CD on x**3 at x = 1 along p = +1."""
    spec_seed = _unit_seed()
    theta = np.ones(1)

    def bias(fn, eps):
        return fn(_cube, theta.copy(), ProbeSpec(spec_seed, epsilon=eps)) - 3.0

    fd = bias(fd_rge, epsilon) / bias(fd_rge, epsilon / 2)
    cd = bias(cd_rge, epsilon) / bias(cd_rge, epsilon / 2)
    return fd, cd


def check_bias_order(epsilon: float = 0.1) -> CheckResult:
    fd, cd = bias_ratios(epsilon)
    ok = 1.8 <= fd <= 2.2 and 3.5 <= cd <= 4.5
    return CheckResult("bias order", cd, "FD ratio in [1.8, 2.2], CD ratio in [3.5, 4.5]", ok,
                       {"fd_ratio": fd, "cd_ratio": cd})


def antithetic_gap(losses, n_cases: int = 100, seed: int = 0) -> float:
    """Largest relative gap between the antithetic forward and central estimates.

    ``losses`` maps a name to ``(loss, dimension)``; cases cycle through it.
    """
    rng = np.random.default_rng(seed)
    items = list(losses.items())
    worst = 0.0
    for k in range(n_cases):
        _, (loss, d) = items[k % len(items)]
        theta = rng.uniform(-1, 1, d)
        eps = float(10 ** rng.uniform(-4, 0))
        spec = ProbeSpec(rng_at(seed, k), epsilon=eps)
        a = fd_antithetic(loss, theta.copy(), spec)
        c = cd_rge(loss, theta.copy(), spec)
        scale = max(abs(a), abs(c), 1e-300)
        worst = max(worst, abs(a - c) / scale if a != c else 0.0)
    return worst


def check_antithetic_identity(n_cases: int = 100, seed: int = 0) -> CheckResult:
    q = Quadratic(8, seed)
    gap = antithetic_gap({"quadratic": (q, 8), "ackley": (ackley, 5)}, n_cases, seed)
    return CheckResult("antithetic = central", gap, "<= 1e-6", gap <= 1e-6)


def ackley_sweep(epsilons=ACKLEY_EPSILONS, d: int = 2, n_samples: int = 100_000,
                 distribution=Distribution.RADEMACHER, seed: int = 0) -> list[float]:
    theta = np.zeros(d)
    return [smoothed_loss(ackley, theta, e, distribution, n_samples, seed).mean for e in epsilons]


def check_ackley_smoothing(epsilons=ACKLEY_EPSILONS, d: int = 2, n_samples: int = 100_000,
                           distribution=Distribution.RADEMACHER, seed: int = 0) -> CheckResult:
    values = ackley_sweep(epsilons, d, n_samples, distribution, seed)
    increasing = all(b > a for a, b in zip(values, values[1:]))
    return CheckResult(f"ackley smoothing ({Distribution.parse(distribution).name.lower()})",
                       values[-1], "strictly increasing in epsilon", increasing,
                       {"epsilons": list(epsilons), "values": values})


def run_all(epsilon: float = 1e-3, seed: int = 0, n_samples: int = 100_000) -> list[CheckResult]:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return [
        check_unbiasedness(epsilon=epsilon, seed=seed),
        check_variance_scaling(epsilon=epsilon, seed=seed),
        check_bias_order(),
        check_antithetic_identity(seed=seed),
        check_ackley_smoothing(n_samples=n_samples, seed=seed),
    ]
