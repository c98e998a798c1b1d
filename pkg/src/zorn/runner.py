"""Experiment loops behind the command-line subcommands."""

from __future__ import annotations

import json
import math
import resource
import time
import tracemalloc
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import plotting
from .baseline import AdamWState, adamw_step, bptt_grad, clip_grad_norm
from .config import RunConfig, read_config_file
from .models import (ForwardWorkspace, LstmConfig, activation_floats, forward_loss, init_params,
                     load_checkpoint, save_checkpoint)
from .numerics import rng_at, splitmix64
from .probes import Distribution
from .tasks import (TRAIN_LENGTHS, Task, TaskBatch, evaluate, gen_transduction, load_corpus,
                    next_lm_batch, task_alphabet, validation_batches)
from .zoo import DivergenceError, Estimator, StepConfig, cdrge_step, step_seed

METRICS = "metrics.jsonl"
TIMING = "timing.jsonl"
CHECKPOINT = "checkpoint.bin"
STATE = "state.json"
CONFIG = "config.txt"

_BATCH_STREAM = 0xBA7C5EED


# ---------------------------------------------------------------------------
# metrics files
# ---------------------------------------------------------------------------

def read_metrics(path) -> list[dict]:
    """Records of a JSONL file; a partial trailing line is ignored."""
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for line in path.read_text().split("\n"):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            break
    return out


class JsonlWriter:
    def __init__(self, path, keep_through: int | None = None):
        self.path = Path(path)
        if keep_through is None:
            self.path.write_text("")
        else:
            kept = [r for r in read_metrics(self.path) if r["step"] <= keep_through]
            self.path.write_text("".join(json.dumps(r) + "\n" for r in kept))
        self.fh = self.path.open("a")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


# ---------------------------------------------------------------------------
# model and data
# ---------------------------------------------------------------------------

def hidden_for_params(vocab_size: int, target: int, embed_dim: int = 32,
                      num_layers: int = 1) -> int:
    """Hidden width whose parameter count is closest to ``target``."""
    best, best_gap = 1, math.inf
    for h in range(1, 4096):
        n = LstmConfig(vocab_size, h, embed_dim, num_layers).num_params
        if abs(n - target) < best_gap:
            best, best_gap = h, abs(n - target)
        if n > target:
            break
    return best


class DataSource:
    """Training batches by step number and a fixed validation set."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.is_lm = cfg.task == "lm"
        if self.is_lm:
            self.corpus = load_corpus(cfg.corpus or None)
            self.vocab_size = self.corpus.alphabet.vocab_size
        else:
            self.task = Task.parse(cfg.task)
            self.vocab_size = task_alphabet(self.task).vocab_size
        self._val = None

    def train_batch(self, step: int) -> TaskBatch:
        cfg = self.cfg
        if self.is_lm:
            batch, _ = next_lm_batch(self.corpus.train, cfg.batch_size, cfg.seq_len,
                                     (step - 1) * cfg.batch_size)
            return batch
        seed = rng_at(splitmix64(cfg.seed ^ _BATCH_STREAM), step)
        return gen_transduction(self.task, cfg.batch_size, TRAIN_LENGTHS, seed)

    def validation(self) -> list[TaskBatch]:
        if self._val is None:
            cfg = self.cfg
            source = self.corpus.val if self.is_lm else self.task
            self._val = validation_batches(source, cfg.eval_batches, cfg.eval_batch_size,
                                           cfg.seq_len, cfg.eval_seed)
        return self._val


def model_config(cfg: RunConfig, vocab_size: int) -> LstmConfig:
    h = cfg.hidden_dim or hidden_for_params(vocab_size, cfg.target_params, cfg.embed_dim,
                                            cfg.num_layers)
    return LstmConfig(vocab_size, h, cfg.embed_dim, cfg.num_layers)


def step_config(cfg: RunConfig, base_seed: int, npert: int | None = None) -> StepConfig:
    return StepConfig(cfg.epsilon, cfg.eta, npert or cfg.npert,
                      Distribution.parse(cfg.distribution),
                      Estimator.FD if cfg.optimizer == "fdrge" else Estimator.CD,
                      base_seed, cfg.chunk_size, cfg.exact_restore)


def validation_loss(params, batches, workspace=None) -> float:
    return evaluate(lambda p, b: forward_loss(p, b, workspace), params, batches)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

class ConfigMismatch(RuntimeError):
    pass


@dataclass
class TrainOutcome:
    out: Path
    final_step: int
    final_val_loss: float | None
    diverged: bool = False


def _save_state(out: Path, params, step: int, opt: AdamWState | None) -> None:
    save_checkpoint(out / CHECKPOINT, params)
    if opt is not None and opt.m is not None:
        tmp = out / "optimizer.tmp.npz"
        np.savez(tmp, m=opt.m, v=opt.v)
        tmp.replace(out / "optimizer.npz")
    state = {"step": step, "adam_step": opt.step if opt else 0}
    (out / (STATE + ".tmp")).write_text(json.dumps(state))
    (out / (STATE + ".tmp")).replace(out / STATE)


def train(cfg: RunConfig, coordinator=None, log=print) -> TrainOutcome:
    """Train with metrics, checkpoints and optional resumption.

    ``metrics.jsonl`` records ``{step, train_loss, val_loss}`` and is
    bit-reproducible from the persisted config; per-step wall time and peak
    memory go to ``timing.jsonl``.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = DataSource(cfg)
    mcfg = model_config(cfg, data.vocab_size)
    params = init_params(mcfg, cfg.seed)
    theta = params.theta
    opt = AdamWState(cfg.lr, weight_decay=cfg.weight_decay) if cfg.optimizer == "bptt" else None
    start = 0
    resumed = cfg.resume and (out / STATE).exists()
    if resumed:
        saved = RunConfig(**read_config_file(out / CONFIG))
        diff = saved.diff(cfg)
        if diff:
            raise ConfigMismatch("refusing to resume, config differs:\n  " + "\n  ".join(diff))
        state = json.loads((out / STATE).read_text())
        start = state["step"]
        loaded = load_checkpoint(out / CHECKPOINT)
        if loaded.config != mcfg:
            raise ConfigMismatch(f"checkpoint model {loaded.config} != {mcfg}")
        theta[:] = loaded.theta
        if opt is not None and state["adam_step"]:
            moments = np.load(out / "optimizer.npz")
            opt.m, opt.v, opt.step = moments["m"].copy(), moments["v"].copy(), state["adam_step"]
    cfg.save(out / CONFIG)
    metrics = JsonlWriter(out / METRICS, start if resumed else None)
    timing = JsonlWriter(out / TIMING, start if resumed else None)
    ws = ForwardWorkspace(mcfg, theta.dtype)
    val_batches = data.validation()
    val = None
    log(f"model {mcfg} with {mcfg.num_params} parameters; steps {start}..{cfg.steps}")
    try:
        if start == 0:
            val = validation_loss(params, val_batches, ws)
            metrics.write({"step": 0, "train_loss": None, "val_loss": val})
            _save_state(out, params, 0, opt)
        for step in range(start + 1, cfg.steps + 1):
            batch = data.train_batch(step)
            t0 = time.perf_counter()
            if opt is None:
                loss = _Loss(params, batch, ws)
                sc = step_config(cfg, step_seed(cfg.seed, step))
                if coordinator is None:
                    _, report = cdrge_step(loss, theta, sc)
                else:
                    from .dist import pack_batch
                    _, report = coordinator.step(loss, theta, sc, pack_batch(batch, mcfg))
                train_loss = report.loss
            else:
                grad, train_loss, _ = bptt_grad(params, batch)
                if not math.isfinite(train_loss):
                    raise DivergenceError(f"non-finite loss {train_loss} at step {step}")
                if cfg.clip > 0:
                    clip_grad_norm(grad, cfg.clip)
                adamw_step(theta, grad, opt)
            wall_ms = (time.perf_counter() - t0) * 1e3
            val = None
            if (cfg.eval_every and step % cfg.eval_every == 0) or step == cfg.steps:
                val = validation_loss(params, val_batches, ws)
            metrics.write({"step": step, "train_loss": train_loss, "val_loss": val})
            timing.write({"step": step, "wall_ms": round(wall_ms, 3),
                          "peak_bytes": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024})
            if val is not None:
                _save_state(out, params, step, opt)
                log(f"step {step}\ttrain {train_loss:.4f}\tval {val:.4f}")
    except DivergenceError as exc:
        log(f"diverged: {exc}")
        return TrainOutcome(out, step, None, diverged=True)
    finally:
        metrics.close()
        timing.close()
    records = read_metrics(out / METRICS)
    plotting.plot_training(records, out / "loss.png", f"{cfg.task} / {cfg.optimizer}")
    last_val = next((r["val_loss"] for r in reversed(records) if r["val_loss"] is not None), None)
    return TrainOutcome(out, cfg.steps, last_val)


class _Loss:
    def __init__(self, params, batch, workspace):
        self.params, self.batch, self.ws = params, batch, workspace

    def __call__(self, theta):
        return forward_loss(self.params, self.batch, self.ws, theta=theta)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def evaluate_run(cfg: RunConfig, checkpoint=None) -> dict:
    data = DataSource(cfg)
    path = Path(checkpoint) if checkpoint else Path(cfg.out) / CHECKPOINT
    if path.exists():
        params = load_checkpoint(path)
        source = str(path)
    else:
        params = init_params(model_config(cfg, data.vocab_size), cfg.seed)
        source = f"fresh init (seed {cfg.seed})"
    val = validation_loss(params, data.validation())
    return {"task": cfg.task, "params": params.config.num_params, "source": source,
            "val_loss": val, "eval_batches": cfg.eval_batches,
            "eval_batch_size": cfg.eval_batch_size, "eval_seed": cfg.eval_seed}


# ---------------------------------------------------------------------------
# overfit
# ---------------------------------------------------------------------------

@dataclass
class OverfitRow:
    optimizer: str
    npert: int
    epsilon: float
    repeat: int
    steps_to_threshold: int | None
    final_loss: float
    steps_run: int
    seconds: float

    @property
    def reached(self) -> bool:
        return self.steps_to_threshold is not None


def fixed_batch(task: str, context: int, seed: int) -> TaskBatch:
    """One sequence of ``context`` tokens (for COPY/REVERSE: payload of (C-2)/2)."""
    t = Task.parse(task)
    L = context if t is Task.SUM else max(1, (context - 2) // 2)
    return gen_transduction(t, 1, (L, L), seed)


def overfit_cdrge(params, batch, cfg: RunConfig, npert: int, seed: int, budget: int,
                  threshold: float):
    """Steps of forward-only descent until the clean loss drops below ``threshold``."""
    theta = params.theta.copy()
    ws = ForwardWorkspace(params.config, theta.dtype)
    loss = _Loss(params, batch, ws)
    curve = []
    reached = None
    for step in range(budget + 1):
        clean = loss(theta)
        curve.append(clean)
        if clean < threshold:
            reached = step
            break
        if step == budget:
            break
        cdrge_step(loss, theta, step_config(cfg, step_seed(seed, step), npert))
    return reached, curve


def overfit_bptt(params, batch, cfg: RunConfig, budget: int, threshold: float):
    theta = params.theta.copy()
    p = type(params)(params.config, type(params.vector)(theta, params.vector.layout))
    # the overfitting study runs without weight decay
    opt = AdamWState(cfg.lr, weight_decay=0.0)
    curve = []
    reached = None
    for step in range(budget + 1):
        grad, loss, _ = bptt_grad(p, batch)
        curve.append(loss)
        if loss < threshold:
            reached = step
            break
        if step == budget or not math.isfinite(loss):
            break
        if cfg.clip > 0:
            clip_grad_norm(grad, cfg.clip)
        adamw_step(theta, grad, opt)
    return reached, curve


def overfit(cfg: RunConfig, log=print, optimizers=("bptt", "cdrge")) -> list[OverfitRow]:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    nperts = [int(x) for x in cfg.npert_list.split(",") if x.strip()]
    if cfg.epsilon_list:
        epsilons = [float(x) for x in cfg.epsilon_list.split(",")]
    else:
        epsilons = [cfg.epsilon] * len(nperts)
    rows, curves = [], {}
    for rep in range(cfg.repeats):
        seed = cfg.seed + rep
        batch = fixed_batch(cfg.task, cfg.context, seed)
        mcfg = model_config(cfg, task_alphabet(cfg.task).vocab_size)
        params = init_params(mcfg, seed)
        runs = []
        if "bptt" in optimizers:
            runs.append(("bptt", 0, 0.0))
        if "cdrge" in optimizers:
            runs += [("cdrge", n, e) for n, e in zip(nperts, epsilons)]
        for name, n, eps in runs:
            t0 = time.perf_counter()
            if name == "bptt":
                reached, curve = overfit_bptt(params, batch, cfg, cfg.steps, cfg.threshold)
            else:
                reached, curve = overfit_cdrge(params, batch, cfg.replace(epsilon=eps), n,
                                               seed, cfg.steps, cfg.threshold)
            row = OverfitRow(name, n, eps, rep, reached, curve[-1], len(curve) - 1,
                             time.perf_counter() - t0)
            rows.append(row)
            label = name if name == "bptt" else f"cdrge@{n}"
            if rep == 0:
                curves[label] = curve
            status = reached if reached is not None else f"not reached (final {curve[-1]:.4f})"
            log(f"{label}\trepeat {rep}\tsteps to {cfg.threshold}: {status}")
    with (out / "overfit.csv").open("w") as fh:
        fh.write("optimizer,npert,epsilon,repeat,steps_to_threshold,final_loss,steps_run,"
                 "seconds\n")
        for r in rows:
            fh.write(f"{r.optimizer},{r.npert},{r.epsilon},{r.repeat},"
                     f"{'' if r.steps_to_threshold is None else r.steps_to_threshold},"
                     f"{r.final_loss!r},{r.steps_run},{r.seconds:.2f}\n")
    plotting.plot_overfit(curves, cfg.threshold, out / "overfit.png")
    return rows


# ---------------------------------------------------------------------------
# memory report
# ---------------------------------------------------------------------------

@dataclass
class MemoryReport:
    optimizer: str
    batch_size: int
    seq_len: int
    num_params: int
    a_max: int
    activations: int
    symbolic_bytes: int
    measured_peak_bytes: int

    def as_dict(self) -> dict:
        return asdict(self)


def _lm_like_batch(vocab: int, B: int, C: int, seed: int) -> TaskBatch:
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, vocab, size=(B, C + 1)).astype(np.int32)
    return TaskBatch(tokens[:, :-1], tokens[:, 1:], np.ones((B, C), bool),
                     np.full(B, C, np.int32))


def memory_report(config: LstmConfig, batch_size: int, seq_len: int, optimizer: str = "cdrge",
                  npert: int = 2, chunk_size: int = 1 << 16, bytes_per_value: int = 4,
                  seed: int = 0) -> MemoryReport:
    """Symbolic footprint and the traced peak allocation of one optimizer step.

    Symbolic: BPTT keeps ``B*C*A`` activations, the forward-only step keeps
    ``B*a_max + |theta| + chunk``. The measurement counts every allocation made
    during the step (python objects and numpy buffers).
    """
    params = init_params(config, seed)
    batch = _lm_like_batch(config.vocab_size, batch_size, seq_len, seed)
    a_max, A = activation_floats(config, batch_size)
    k = bytes_per_value
    if optimizer == "bptt":
        symbolic = k * seq_len * A

        def run():
            bptt_grad(params, batch)
    else:
        symbolic = k * (a_max + config.num_params + chunk_size)
        theta = params.theta
        sc = StepConfig(1e-3, n_pert=npert, chunk_size=chunk_size)

        def run():
            cdrge_step(_Loss(params, batch, ForwardWorkspace(config)), theta, sc)
    run()  # compile and warm caches outside the measurement
    tracemalloc.start()
    try:
        run()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return MemoryReport(optimizer, batch_size, seq_len, config.num_params, a_max // batch_size,
                        A // batch_size, symbolic, peak)
