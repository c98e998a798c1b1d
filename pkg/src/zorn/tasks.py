"""Synthetic transduction tasks and a character-level corpus pipeline."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

PAD, SEP, EOS, UNK = "<pad>", "<sep>", "<eos>", "<unk>"

TRAIN_LENGTHS = (1, 10)
VAL_LENGTHS = (11, 60)


class Task(enum.Enum):
    COPY = "copy"
    REVERSE = "reverse"
    SUM = "sum"

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, Task):
            return value
        key = str(value).strip().lower()
        if key in ("add", "rolling_sum", "rollingsum"):
            key = "sum"
        return cls(key)


@dataclass
class TaskBatch:
    inputs: np.ndarray     # (B, T) int32
    targets: np.ndarray    # (B, T) int32
    loss_mask: np.ndarray  # (B, T) bool
    lengths: np.ndarray    # (B,) int32, unpadded length of each row

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.int32)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.int32)
        self.loss_mask = np.ascontiguousarray(self.loss_mask, dtype=bool)
        self.lengths = np.ascontiguousarray(self.lengths, dtype=np.int32)
        if not (self.inputs.shape == self.targets.shape == self.loss_mask.shape):
            raise ValueError("inputs, targets and loss_mask must share one shape")
        if self.lengths.shape != (self.inputs.shape[0],):
            raise ValueError("lengths must have one entry per row")
        if self.lengths.size and self.lengths.max() > self.inputs.shape[1]:
            raise ValueError("a row length exceeds the padded width")

    @property
    def shape(self):
        return self.inputs.shape

    def __eq__(self, other):
        if not isinstance(other, TaskBatch):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("inputs", "targets", "loss_mask", "lengths"))


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple[str, ...]
    specials: tuple[str, ...] = (PAD, SEP, EOS)

    @property
    def vocab_size(self) -> int:
        return len(self.specials) + len(self.symbols)

    @property
    def pad_id(self) -> int:
        return self.specials.index(PAD)

    @property
    def sep_id(self) -> int:
        return self.specials.index(SEP)

    @property
    def eos_id(self) -> int:
        return self.specials.index(EOS)

    @property
    def unk_id(self) -> int:
        return self.specials.index(UNK)

    def id_of(self, symbol: str) -> int:
        return len(self.specials) + self.symbols.index(symbol)

    def encode(self, text) -> list[int]:
        lookup = {s: i + len(self.specials) for i, s in enumerate(self.symbols)}
        if UNK in self.specials:
            unk = self.unk_id
            return [lookup.get(ch, unk) for ch in text]
        return [lookup[ch] for ch in text]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            out.append(self.specials[i] if i < len(self.specials)
                       else self.symbols[i - len(self.specials)])
        return "".join(out)


LETTERS = Alphabet(tuple("abcdefghijklmnopqrstuvwxyz"))
DIGITS = Alphabet(tuple("0123456789"))


def task_alphabet(task) -> Alphabet:
    return DIGITS if Task.parse(task) is Task.SUM else LETTERS


def _layout_row(task: Task, alphabet: Alphabet, payload: np.ndarray):
    """Token row, target row and mask for one sample."""
    L = payload.size
    if task is Task.SUM:
        digits = payload - len(alphabet.specials)
        sums = np.cumsum(digits) % 10
        return payload, sums + len(alphabet.specials), np.ones(L, dtype=bool)
    out = payload if task is Task.COPY else payload[::-1]
    seq = np.concatenate([payload, [alphabet.sep_id], out, [alphabet.eos_id]])
    inputs, targets = seq[:-1], seq[1:]
    mask = np.zeros(inputs.size, dtype=bool)
    mask[L:] = True  # targets y_1..y_L and EOS
    return inputs, targets, mask


def build_batch(task, payloads) -> TaskBatch:
    """Lay out explicit payloads (lists of token ids) as a padded batch."""
    task = Task.parse(task)
    alphabet = task_alphabet(task)
    rows = [_layout_row(task, alphabet, np.asarray(p, dtype=np.int64)) for p in payloads]
    T = max(r[0].size for r in rows)
    B = len(rows)
    inputs = np.full((B, T), alphabet.pad_id, dtype=np.int32)
    targets = np.full((B, T), alphabet.pad_id, dtype=np.int32)
    mask = np.zeros((B, T), dtype=bool)
    lengths = np.zeros(B, dtype=np.int32)
    for b, (x, y, m) in enumerate(rows):
        inputs[b, :x.size] = x
        targets[b, :y.size] = y
        mask[b, :m.size] = m
        lengths[b] = x.size
    return TaskBatch(inputs, targets, mask, lengths)


def gen_transduction(task, batch_size: int, len_range=TRAIN_LENGTHS, seed: int = 0) -> TaskBatch:
    """Random COPY / REVERSE / SUM batch; payload lengths uniform in ``len_range``."""
    task = Task.parse(task)
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid length range [{lo}, {hi}]")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    alphabet = task_alphabet(task)
    rng = np.random.default_rng(seed)
    lengths = rng.integers(lo, hi + 1, size=batch_size)
    first = len(alphabet.specials)
    payloads = [rng.integers(first, alphabet.vocab_size, size=int(L)) for L in lengths]
    return build_batch(task, payloads)


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

def bundled_corpus_path() -> Path:
    return Path(str(resources.files("zorn") / "data" / "corpus.txt"))


@dataclass
class Corpus:
    alphabet: Alphabet
    train: np.ndarray  # int32 token stream
    val: np.ndarray


def corpus_alphabet(text: str) -> Alphabet:
    return Alphabet(tuple(sorted(set(text))), specials=(PAD, SEP, EOS, UNK))


def load_corpus(path=None, val_fraction: float = 0.1) -> Corpus:
    """Read a UTF-8 text file; the last ``val_fraction`` is held out."""
    path = bundled_corpus_path() if path is None else Path(path)
    text = path.read_text(encoding="utf-8")
    if not text:
        raise ValueError(f"{path}: corpus is empty")
    alphabet = corpus_alphabet(text)
    tokens = np.asarray(alphabet.encode(text), dtype=np.int32)
    split = len(tokens) - int(len(tokens) * val_fraction)
    return Corpus(alphabet, tokens[:split], tokens[split:])


def num_windows(stream_len: int, seq_len: int) -> int:
    return max(0, (stream_len - 1) // seq_len)


def next_lm_batch(stream: np.ndarray, batch_size: int, seq_len: int, cursor: int = 0):
    """Next ``batch_size`` contiguous windows; returns ``(batch, new_cursor)``.

    Window ``k`` reads ``stream[k*seq_len : (k+1)*seq_len]`` and predicts the
    character after each position. The cursor counts windows and wraps.
    """
    n = num_windows(len(stream), seq_len)
    if n == 0:
        raise ValueError(f"stream of {len(stream)} tokens is too short for seq_len {seq_len}")
    idx = (cursor + np.arange(batch_size)) % n
    starts = idx * seq_len
    offsets = starts[:, None] + np.arange(seq_len)[None, :]
    inputs = stream[offsets]
    targets = stream[offsets + 1]
    mask = np.ones_like(inputs, dtype=bool)
    lengths = np.full(batch_size, seq_len, dtype=np.int32)
    return TaskBatch(inputs, targets, mask, lengths), int((cursor + batch_size) % n)


def lm_pass_token_count(stream_len: int, seq_len: int) -> int:
    """Input positions covered by one full pass over a stream."""
    return num_windows(stream_len, seq_len) * seq_len


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def validation_batches(source, n_batches: int, batch_size: int, seq_len: int = 10,
                       seed: int = 0):
    """Fixed validation batches for a transduction task or an LM token stream."""
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    if isinstance(source, (Task, str)):
        return [gen_transduction(source, batch_size, VAL_LENGTHS, seed=seed * 1_000_003 + i)
                for i in range(n_batches)]
    cursor = 0
    out = []
    for _ in range(n_batches):
        batch, cursor = next_lm_batch(source, batch_size, seq_len, cursor)
        out.append(batch)
    return out


def evaluate(loss_fn, params, batches) -> float:
    """Mean of ``loss_fn(params, batch)`` over ``batches``."""
    batches = list(batches)
    if not batches:
        raise ValueError("need at least one batch")
    return float(np.mean([loss_fn(params, b) for b in batches]))
