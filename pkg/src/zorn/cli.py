"""Command-line driver.

    zorn overfit   --task copy --steps 10000 --npert-list 8,96,512
    zorn train     --task sum --optimizer cdrge --npert 512 --epsilon 0.1 --out runs/sum
    zorn eval      --task copy --out runs/sum
    zorn serve     --rank 1 --world-size 4 --addr 127.0.0.1:29500
    zorn diag
    zorn memreport --seq-lens 10,100

Every flag can also come from a ``key = value`` file (``--config``) or from
``ZORN_<KEY>`` environment variables; flags win over the environment, which
wins over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import RunConfig, parse_value, resolve

COMMANDS = ("overfit", "train", "eval", "serve", "diag", "memreport")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zorn", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.bin)")
        for f in fields(RunConfig):
            if f.name == "command":
                continue
            if f.type in ("bool", bool):
                p.add_argument(_flag(f.name), dest=f.name, default=None,
                               action=argparse.BooleanOptionalAction)
            else:
                p.add_argument(_flag(f.name), dest=f.name, default=None, type=str,
                               metavar=f.name.upper())
    return parser


def _cli_values(ns: argparse.Namespace) -> dict:
    out = {}
    for f in fields(RunConfig):
        if f.name == "command":
            continue
        value = getattr(ns, f.name, None)
        if value is not None:
            out[f.name] = parse_value(f.name, value)
    out["command"] = ns.command
    return out


def _print_table(header, rows, stream=None) -> None:
    stream = stream or sys.stdout
    print("\t".join(header), file=stream)
    for row in rows:
        print("\t".join("" if v is None else str(v) for v in row), file=stream)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    from .runner import ConfigMismatch, train

    try:
        outcome = train(cfg, log=lambda m: print(m, file=sys.stderr))
    except ConfigMismatch as exc:
        print(str(exc), file=sys.stderr)
        return 2
    _print_table(["out", "final_step", "final_val_loss", "diverged"],
                 [[outcome.out, outcome.final_step, outcome.final_val_loss, outcome.diverged]])
    return 1 if outcome.diverged else 0


def cmd_eval(cfg: RunConfig, checkpoint=None) -> int:
    from .runner import evaluate_run

    result = evaluate_run(cfg, checkpoint)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(result, indent=1) + "\n")
    _print_table(list(result), [list(result.values())])
    return 0


def cmd_overfit(cfg: RunConfig) -> int:
    from .runner import overfit

    rows = overfit(cfg, log=lambda m: print(m, file=sys.stderr))
    _print_table(["optimizer", "npert", "epsilon", "repeat", "steps_to_threshold", "final_loss"],
                 [[r.optimizer, r.npert, r.epsilon if r.npert else "", r.repeat,
                   r.steps_to_threshold if r.reached else "not reached",
                   f"{r.final_loss:.6g}"] for r in rows])
    return 0


def cmd_serve(cfg: RunConfig) -> int:
    from .dist import Coordinator, RankRole, parse_addr, serve_worker
    from .runner import train

    role = RankRole(cfg.rank, cfg.world_size, parse_addr(cfg.addr), cfg.timeout)
    if role.rank != 0:
        steps = serve_worker(role)
        print(f"worker {role.rank} served {steps} steps", file=sys.stderr)
        return 0
    with Coordinator.listen(role) as co:
        outcome = train(cfg, coordinator=co, log=lambda m: print(m, file=sys.stderr))
    _print_table(["out", "final_step", "final_val_loss", "diverged"],
                 [[outcome.out, outcome.final_step, outcome.final_val_loss, outcome.diverged]])
    return 1 if outcome.diverged else 0


def cmd_diag(cfg: RunConfig) -> int:
    from . import diagnostics, plotting
    from .probes import Distribution

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    # the estimator checks use their own small epsilon; --samples sizes the sweep
    results = diagnostics.run_all(seed=cfg.seed, n_samples=cfg.samples)
    sweeps = {"rademacher": results[-1].detail["values"]}
    for dist in (Distribution.NORMAL, Distribution.UNIFORM):
        sweeps[dist.name.lower()] = diagnostics.ackley_sweep(
            n_samples=cfg.samples, distribution=dist, seed=cfg.seed)
    with (out / "diag.csv").open("w") as fh:
        fh.write("check,value,expected,passed\n")
        for r in results:
            fh.write(f"{r.name},{r.value!r},{r.band},{r.passed}\n")
    with (out / "ackley_sweep.csv").open("w") as fh:
        fh.write("epsilon," + ",".join(sweeps) + "\n")
        for k, eps in enumerate(diagnostics.ACKLEY_EPSILONS):
            fh.write(f"{eps}," + ",".join(repr(v[k]) for v in sweeps.values()) + "\n")
    plotting.plot_sweep(diagnostics.ACKLEY_EPSILONS, sweeps, out / "ackley_sweep.png")
    _print_table(["check", "value", "expected", "result"],
                 [[r.name, f"{r.value:.6g}", r.band, "PASS" if r.passed else "FAIL"]
                  for r in results])
    var = results[1].detail
    print(f"variance ratio n={var['n_small']} vs n={var['n_large']}: {results[1].value:.3f}")
    return 0


def cmd_memreport(cfg: RunConfig) -> int:
    from . import plotting
    from .models import LstmConfig
    from .runner import hidden_for_params, memory_report

    vocab = 29
    h = cfg.hidden_dim or hidden_for_params(vocab, cfg.target_params, cfg.embed_dim,
                                            cfg.num_layers)
    mcfg = LstmConfig(vocab, h, cfg.embed_dim, cfg.num_layers)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for C in (int(x) for x in cfg.seq_lens.split(",") if x.strip()):
        for opt in ("cdrge", "bptt"):
            rows.append(memory_report(mcfg, cfg.batch_size, C, opt,
                                      chunk_size=min(cfg.chunk_size, 1 << 16),
                                      seed=cfg.seed).as_dict())
    header = list(rows[0])
    with (out / "memreport.csv").open("w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(r[k]) for k in header) + "\n")
    plotting.plot_memory(rows, out / "memory.png")
    _print_table(header, [[r[k] for k in header] for r in rows])
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=ns.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(_cli_values(ns), ns.config)
    except ValueError as exc:
        parser.error(str(exc))
    handlers = {"train": cmd_train, "overfit": cmd_overfit, "serve": cmd_serve,
                "diag": cmd_diag, "memreport": cmd_memreport}
    if ns.command == "eval":
        return cmd_eval(cfg, ns.checkpoint)
    return handlers[ns.command](cfg)


if __name__ == "__main__":
    sys.exit(main())
