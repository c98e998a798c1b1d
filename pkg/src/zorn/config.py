"""Run configuration: typed ``key = value`` files, ``ZORN_*`` environment
overrides and command-line flags, merged in that order of increasing
precedence."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .probes import DEFAULT_CHUNK_SIZE

# keys that may change between a run and its resumption
RESUMABLE = frozenset({"steps", "resume", "out", "command", "rank", "world_size", "addr",
                       "timeout"})


@dataclass
class RunConfig:
    command: str = "train"
    task: str = "copy"              # copy | reverse | sum | lm
    optimizer: str = "cdrge"        # cdrge | fdrge | bptt
    npert: int = 96
    epsilon: float = 0.1
    eta: float | None = None        # unset ties the step size to epsilon
    distribution: str = "rademacher"
    exact_restore: bool = False
    chunk_size: int = DEFAULT_CHUNK_SIZE
    batch_size: int = 32
    seq_len: int = 10
    steps: int = 1000
    seed: int = 0
    hidden_dim: int = 0             # 0 sizes the model to target_params
    target_params: int = 100_000
    embed_dim: int = 32
    num_layers: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.1
    clip: float = 1.0               # 0 disables clipping
    eval_every: int = 100
    eval_batches: int = 4
    eval_batch_size: int = 32
    eval_seed: int = 1
    threshold: float = 0.01
    npert_list: str = "8,96,512"
    epsilon_list: str = ""          # overfit: one epsilon per npert_list entry
    context: int = 20
    repeats: int = 1
    seq_lens: str = "10,100"
    samples: int = 100_000
    corpus: str = ""
    out: str = "runs/default"
    resume: bool = False
    rank: int = 0
    world_size: int = 1
    addr: str = "127.0.0.1:29500"
    timeout: float = 60.0

    def validate(self) -> "RunConfig":
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.eta is not None and not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.optimizer not in ("cdrge", "fdrge", "bptt"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("npert", "batch_size", "seq_len", "eval_batches", "eval_batch_size",
                     "repeats", "chunk_size", "world_size", "num_layers", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0 or self.eval_every < 0:
            raise ValueError("steps and eval_every must be >= 0")
        if self.epsilon_list and len(self.epsilon_list.split(",")) != \
                len(self.npert_list.split(",")):
            raise ValueError("epsilon_list needs one entry per npert_list entry")
        if self.npert % self.world_size:
            raise ValueError("npert must be divisible by world_size")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def diff(self, other: "RunConfig", ignore=RESUMABLE) -> list[str]:
        out = []
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if f.name not in ignore and a != b:
                out.append(f"{f.name}: {a!r} != {b!r}")
        return out


_HINTS = typing.get_type_hints(RunConfig)


def _base_type(name: str):
    hint = _HINTS[name]
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    return args[0] if args else hint


def parse_value(name: str, text):
    """Convert ``text`` to the declared type of field ``name``."""
    if name not in _HINTS:
        raise KeyError(f"unknown config key {name!r}")
    if not isinstance(text, str):
        return text
    text = text.strip()
    optional = type(None) in typing.get_args(_HINTS[name])
    if optional and text in ("", "none", "None"):
        return None
    kind = _base_type(name)
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    return kind(text)


def read_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        try:
            values[key] = parse_value(key, value)
        except KeyError:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}") from None
    return values


def read_env(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    values = {}
    for f in fields(RunConfig):
        key = "ZORN_" + f.name.upper()
        if key in environ:
            values[f.name] = parse_value(f.name, environ[key])
    return values


def resolve(cli: dict, config_path=None, environ=None) -> RunConfig:
    """Defaults, then the file, then the environment, then explicit flags."""
    merged = {}
    if config_path:
        merged.update(read_config_file(config_path))
    merged.update(read_env(environ))
    merged.update({k: v for k, v in cli.items() if v is not None})
    return dataclasses.replace(RunConfig(), **merged).validate()
