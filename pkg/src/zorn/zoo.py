"""Zero-order gradient estimators and the forward-only optimizer step.

Losses are black boxes: any callable mapping a flat parameter array to a
float. Estimators return the scalar coefficient that multiplies the probe;
the probe itself is regenerated from its seed whenever it is needed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import MASK64, rng_at, splitmix64
from .probes import (DEFAULT_CHUNK_SIZE, Distribution, ProbeSpec, apply_probe,
                     apply_probes)

BlackBoxLoss = Callable[[np.ndarray], float]


class DivergenceError(FloatingPointError):
    """A loss evaluation returned NaN or infinity."""

    def __init__(self, message, theta_summary: str = ""):
        super().__init__(f"{message} ({theta_summary})" if theta_summary else message)
        self.theta_summary = theta_summary


class Estimator(enum.Enum):
    FD = "fd"
    CD = "cd"
    FD_AS = "fd_as"

    @classmethod
    def parse(cls, value) -> "Estimator":
        if isinstance(value, Estimator):
            return value
        return cls(str(value).strip().lower().replace("-", "_"))


@dataclass(frozen=True)
class StepConfig:
    epsilon: float
    eta: float | None = None  # None ties the step size to epsilon
    n_pert: int = 1
    distribution: Distribution = Distribution.RADEMACHER
    estimator: Estimator = Estimator.CD
    base_seed: int = 0
    chunk_size: int = DEFAULT_CHUNK_SIZE
    exact_restore: bool = False

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.eta is not None and not (self.eta > 0 and math.isfinite(self.eta)):
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.n_pert < 1:
            raise ValueError("n_pert must be >= 1")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        object.__setattr__(self, "distribution", Distribution.parse(self.distribution))
        object.__setattr__(self, "estimator", Estimator.parse(self.estimator))
        object.__setattr__(self, "base_seed", int(self.base_seed) & MASK64)

    @property
    def step_size(self) -> float:
        return self.epsilon if self.eta is None else self.eta

    @property
    def tied(self) -> bool:
        return self.eta is None or self.eta == self.epsilon

    @property
    def n_queries(self) -> int:
        return self.n_pert + 1 if self.estimator is Estimator.FD else 2 * self.n_pert

    def replace(self, **changes) -> "StepConfig":
        from dataclasses import replace
        return replace(self, **changes)

    def probe_specs(self) -> list[ProbeSpec]:
        return [ProbeSpec(probe_seed(self.base_seed, i), self.distribution, self.epsilon)
                for i in range(1, self.n_pert + 1)]


def probe_seed(base_seed: int, i: int) -> int:
    """Seed of perturbation ``i`` (1-based) within a step."""
    return splitmix64((base_seed ^ i) & MASK64)


def step_seed(run_seed: int, step: int) -> int:
    """Base seed for optimizer step ``step`` of a run."""
    return rng_at(run_seed & MASK64, step)


@dataclass
class GradEstimate:
    specs: list[ProbeSpec]
    loss_pairs: np.ndarray  # (n_pert, 2): columns L-, L+
    alphas: np.ndarray      # update coefficient per probe (theta -= sum alpha_i p_i)

    def __post_init__(self):
        if len(self.specs) != len(self.loss_pairs):
            raise ValueError("one loss pair per probe")

    def dense(self, d: int, dtype=np.float64) -> np.ndarray:
        """The descent direction sum_i alpha_i p_i, materialized."""
        g = np.zeros(d, dtype=dtype)
        apply_probes(g, self.alphas, [s.seed for s in self.specs],
                     self.specs[0].distribution if self.specs else Distribution.RADEMACHER)
        return g


@dataclass
class StepReport:
    loss: float  # mean of (L+ + L-)/2, or the clean loss for FD
    loss_pairs: np.ndarray
    update_norm: float
    clean_loss: float | None = None
    alphas: np.ndarray = field(default_factory=lambda: np.zeros(0))


def describe_theta(theta: np.ndarray) -> str:
    finite = np.isfinite(theta)
    return (f"|theta|={theta.size}, non-finite entries={int((~finite).sum())}, "
            f"max|theta|={float(np.max(np.abs(theta[finite]), initial=0.0)):.4g}")


def _checked(value, theta, what) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at {what}", describe_theta(theta))
    return value


# ---------------------------------------------------------------------------
# single-probe estimators
# ---------------------------------------------------------------------------

def loss_pair(loss: BlackBoxLoss, theta: np.ndarray, spec: ProbeSpec,
              chunk_size: int = DEFAULT_CHUNK_SIZE,
              clean: np.ndarray | None = None) -> tuple[float, float]:
    """(L-, L+) by the in-place +eps, -2eps, +eps sequence.

    With ``clean`` given, theta is restored by copying it instead of the
    final +eps application, so no rounding drift accumulates.
    """
    eps = spec.epsilon
    apply_probe(theta, eps, spec, chunk_size)
    try:
        plus = float(loss(theta))
        apply_probe(theta, -2.0 * eps, spec, chunk_size)
        minus = float(loss(theta))
    finally:
        if clean is not None:
            np.copyto(theta, clean)
        else:
            apply_probe(theta, eps, spec, chunk_size)
    return minus, plus


def fd_rge(loss: BlackBoxLoss, theta: np.ndarray, spec: ProbeSpec,
           clean_loss: float | None = None, chunk_size: int = DEFAULT_CHUNK_SIZE) -> float:
    """Forward difference (L(theta + eps p) - L(theta)) / eps."""
    if clean_loss is None:
        clean_loss = _checked(loss(theta), theta, "clean point")
    apply_probe(theta, spec.epsilon, spec, chunk_size)
    try:
        plus = _checked(loss(theta), theta, "theta + eps p")
    finally:
        apply_probe(theta, -spec.epsilon, spec, chunk_size)
    return (plus - clean_loss) / spec.epsilon


def cd_rge(loss: BlackBoxLoss, theta: np.ndarray, spec: ProbeSpec,
           chunk_size: int = DEFAULT_CHUNK_SIZE) -> float:
    """Central difference (L(theta + eps p) - L(theta - eps p)) / (2 eps)."""
    minus, plus = loss_pair(loss, theta, spec, chunk_size)
    _checked(plus, theta, "theta + eps p")
    _checked(minus, theta, "theta - eps p")
    return (plus - minus) / (2.0 * spec.epsilon)


def fd_antithetic(loss: BlackBoxLoss, theta: np.ndarray, spec: ProbeSpec,
                  clean_loss: float | None = None,
                  chunk_size: int = DEFAULT_CHUNK_SIZE) -> float:
    """Average of the forward differences along p and -p, both against L(theta)."""
    if clean_loss is None:
        clean_loss = _checked(loss(theta), theta, "clean point")
    minus, plus = loss_pair(loss, theta, spec, chunk_size)
    _checked(plus, theta, "theta + eps p")
    _checked(minus, theta, "theta - eps p")
    eps = spec.epsilon
    return 0.5 * ((plus - clean_loss) / eps - (minus - clean_loss) / eps)


# ---------------------------------------------------------------------------
# optimizer step
# ---------------------------------------------------------------------------

def update_coefficients(loss_pairs: np.ndarray, cfg: StepConfig,
                        clean_loss: float | None = None) -> np.ndarray:
    """alpha_i such that the step is theta -= sum_i alpha_i p_i."""
    pairs = np.asarray(loss_pairs, dtype=np.float64).reshape(-1, 2)
    n = pairs.shape[0]
    if cfg.estimator is Estimator.FD:
        diffs = (pairs[:, 1] - clean_loss) / n
    else:
        diffs = (pairs[:, 1] - pairs[:, 0]) / (2 * n)
    if cfg.tied:
        return diffs  # eta / eps == 1 cancels
    return diffs * (cfg.step_size / cfg.epsilon)


def estimate(loss: BlackBoxLoss, theta: np.ndarray, cfg: StepConfig) -> GradEstimate:
    """Loss pairs and update coefficients for one step, leaving theta in place.

    For the FD estimator the L- column holds the shared clean loss.
    """
    specs = cfg.probe_specs()
    clean = theta.copy() if cfg.exact_restore else None
    pairs = np.zeros((cfg.n_pert, 2))
    clean_loss = None
    if cfg.estimator is Estimator.FD:
        clean_loss = _checked(loss(theta), theta, "clean point")
    for m, spec in enumerate(specs):
        if cfg.estimator is Estimator.FD:
            apply_probe(theta, spec.epsilon, spec, cfg.chunk_size)
            try:
                plus = float(loss(theta))
            finally:
                if clean is not None:
                    np.copyto(theta, clean)
                else:
                    apply_probe(theta, -spec.epsilon, spec, cfg.chunk_size)
            pairs[m] = (clean_loss, plus)
        else:
            pairs[m] = loss_pair(loss, theta, spec, cfg.chunk_size, clean)
        if not np.all(np.isfinite(pairs[m])):
            raise DivergenceError(f"non-finite loss pair {tuple(pairs[m])} for probe {m + 1}",
                                  describe_theta(theta))
    return GradEstimate(specs, pairs, update_coefficients(pairs, cfg, clean_loss))


def apply_update(theta: np.ndarray, loss_pairs: np.ndarray, cfg: StepConfig,
                 clean_loss: float | None = None) -> StepReport:
    """theta -= sum_i alpha_i p_i in ascending i; returns the step report."""
    pairs = np.asarray(loss_pairs, dtype=np.float64).reshape(-1, 2)
    alphas = update_coefficients(pairs, cfg, clean_loss)
    seeds = [probe_seed(cfg.base_seed, i) for i in range(1, pairs.shape[0] + 1)]
    norm = apply_probes(theta, -alphas, seeds, cfg.distribution, cfg.chunk_size)
    if cfg.estimator is Estimator.FD:
        mean_loss = float(clean_loss)
    else:
        mean_loss = float(np.mean((pairs[:, 0] + pairs[:, 1]) / 2.0))
    return StepReport(mean_loss, pairs, norm, clean_loss, alphas)


def cdrge_step(loss: BlackBoxLoss, theta: np.ndarray, cfg: StepConfig):
    """One forward-only optimizer step, in place. Returns ``(theta, report)``.

    On a non-finite loss theta is restored to its pre-step values and
    :class:`DivergenceError` is raised.
    """
    if not np.all(np.isfinite(theta)):
        raise DivergenceError("theta is not finite before the step", describe_theta(theta))
    snapshot = theta.copy()
    try:
        est = estimate(loss, theta, cfg)
    except DivergenceError:
        np.copyto(theta, snapshot)
        raise
    if cfg.exact_restore:
        np.copyto(theta, snapshot)
    del snapshot
    clean_loss = est.loss_pairs[0, 0] if cfg.estimator is Estimator.FD else None
    report = apply_update(theta, est.loss_pairs, cfg, clean_loss)
    return theta, report


# ---------------------------------------------------------------------------
# smoothing, test functions, diagnostics
# ---------------------------------------------------------------------------

@dataclass
class SmoothedLoss:
    mean: float
    stderr: float
    n_used: int
    n_excluded: int


def smoothed_loss(loss: BlackBoxLoss, theta: np.ndarray, epsilon: float,
                  distribution=Distribution.RADEMACHER, n_samples: int = 1000,
                  seed: int = 0) -> SmoothedLoss:
    """Monte Carlo estimate of E_p[L(theta + eps p)] over seeded probes."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    base = np.ascontiguousarray(theta, dtype=np.float64)
    work = base.copy()
    dist = Distribution.parse(distribution)
    values = np.empty(n_samples)
    for k in range(n_samples):
        np.copyto(work, base)
        apply_probe(work, epsilon, ProbeSpec(rng_at(seed, k), dist, epsilon))
        values[k] = loss(work)
    ok = np.isfinite(values)
    excluded = int((~ok).sum())
    if excluded > 0.01 * n_samples:
        raise DivergenceError(f"{excluded} of {n_samples} smoothed-loss samples are non-finite")
    used = values[ok]
    stderr = float(used.std(ddof=1) / math.sqrt(used.size)) if used.size > 1 else 0.0
    return SmoothedLoss(float(used.mean()), stderr, int(used.size), excluded)


def ackley(theta, a: float = 20.0, b: float = 0.2, c: float = 2 * math.pi) -> float:
    x = np.asarray(theta, dtype=np.float64).reshape(-1)
    if x.size < 1:
        raise ValueError("ackley needs at least one dimension")
    d = x.size
    return float(-a * math.exp(-b * math.sqrt(np.dot(x, x) / d))
                 - math.exp(np.sum(np.cos(c * x)) / d) + a + math.e)


def estimate_gradient(loss: BlackBoxLoss, theta: np.ndarray, cfg: StepConfig) -> np.ndarray:
    """Dense zero-order gradient estimate (1/n) sum_i g_i p_i.

    Equals the step direction divided by the step size; meant for
    diagnostics on small problems.
    """
    return estimate(loss, theta, cfg).dense(theta.size) / cfg.step_size


def variance_probe(loss: BlackBoxLoss, theta: np.ndarray, cfg: StepConfig, trials: int,
                   seeds: Sequence[int] | None = None) -> float:
    """Total sample variance (trace of the covariance) of the dense estimate
    across ``trials`` independent steps."""
    if trials < 2:
        raise ValueError("variance needs at least two trials")
    if seeds is None:
        seeds = [step_seed(cfg.base_seed, t) for t in range(trials)]
    if len(seeds) != trials:
        raise ValueError("one seed per trial")
    work = np.array(theta, dtype=np.float64)
    samples = np.stack([estimate_gradient(loss, work, cfg.replace(base_seed=s, exact_restore=True))
                        for s in seeds])
    return float(samples.var(axis=0, ddof=1).sum())
