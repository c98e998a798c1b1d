"""Parameter-server execution of the forward-only step over TCP.

Rank 0 owns the parameters. Each step it streams theta and the batch to every
worker, hands each rank a slice of the probe seeds, evaluates its own slice,
collects ``(L-, L+)`` pairs and applies the update. Workers only run
perturbed forward passes and send back 16 bytes per probe.

Wire format: ``b"ZRN1" | type:u8 | payload_len:u64le | payload``.
"""

from __future__ import annotations

import enum
import logging
import os
import selectors
import socket
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .probes import DEFAULT_CHUNK_SIZE, Distribution, ProbeSpec
from .zoo import (BlackBoxLoss, DivergenceError, Estimator, StepConfig, apply_update,
                  describe_theta, loss_pair, probe_seed)

log = logging.getLogger(__name__)

MAGIC = b"ZRN1"
HEADER = struct.Struct("<4sBQ")
MAX_PAYLOAD = 1 << 34
PAIR = struct.Struct("<dd")
HELLO = struct.Struct("<II")
SEED_HEAD = struct.Struct("<dBBQI")
SEED_ITEM = struct.Struct("<QQ")
BATCH_HEAD = struct.Struct("<6I")


class MsgType(enum.IntEnum):
    BROADCAST_THETA = 1
    BROADCAST_BATCH = 2
    SCATTER_SEEDS = 3
    GATHER_LOSSES = 4
    SHUTDOWN = 5


class ProtocolError(RuntimeError):
    def __init__(self, message, rank: int | None = None):
        super().__init__(f"rank {rank}: {message}" if rank is not None else message)
        self.rank = rank


class StepAborted(RuntimeError):
    """A worker timed out or disconnected; the step was not applied."""

    def __init__(self, message, rank: int | None = None):
        super().__init__(f"rank {rank}: {message}" if rank is not None else message)
        self.rank = rank


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    payload: bytes = b""


@dataclass(frozen=True)
class RankRole:
    rank: int
    world_size: int
    addr: tuple[str, int] = ("127.0.0.1", 29500)
    timeout: float = 60.0

    def __post_init__(self):
        if self.world_size < 1:
            raise ValueError("world_size must be >= 1")
        if not 0 <= self.rank < self.world_size:
            raise ValueError(f"rank {self.rank} outside 0..{self.world_size - 1}")

    @classmethod
    def from_env(cls, rank=None, world_size=None, addr=None, timeout=None) -> "RankRole":
        """Fill unset fields from ``ZORN_RANK``, ``ZORN_WORLD_SIZE`` and ``ZORN_ADDR``."""
        env = os.environ
        rank = int(env.get("ZORN_RANK", 0)) if rank is None else rank
        world_size = int(env.get("ZORN_WORLD_SIZE", 1)) if world_size is None else world_size
        addr = env.get("ZORN_ADDR", "127.0.0.1:29500") if addr is None else addr
        if isinstance(addr, str):
            addr = parse_addr(addr)
        return cls(rank, world_size, addr, 60.0 if timeout is None else timeout)


def parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------

def encode_frame(msg: Message, max_payload: int = MAX_PAYLOAD) -> bytes:
    payload = bytes(msg.payload)
    if len(payload) > max_payload:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds limit {max_payload}")
    return HEADER.pack(MAGIC, int(msg.msg_type), len(payload)) + payload


def _parse_header(head: bytes, max_payload: int, rank=None) -> tuple[MsgType, int]:
    magic, kind, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", rank)
    try:
        kind = MsgType(kind)
    except ValueError:
        raise ProtocolError(f"unknown message type {kind}", rank) from None
    if length > max_payload:
        raise ProtocolError(f"payload length {length} exceeds limit {max_payload}", rank)
    return kind, length


def decode_frame(data: bytes, max_payload: int = MAX_PAYLOAD) -> Message:
    """Inverse of :func:`encode_frame`; ``data`` must hold exactly one frame."""
    data = bytes(data)
    if len(data) < HEADER.size:
        raise ProtocolError(f"truncated header ({len(data)} bytes)")
    kind, length = _parse_header(data[:HEADER.size], max_payload)
    if len(data) - HEADER.size != length:
        raise ProtocolError(f"payload length {length} but {len(data) - HEADER.size} bytes present")
    return Message(kind, data[HEADER.size:])


def _recv_exact(sock: socket.socket, n: int, rank=None) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:])
        if k == 0:
            raise ConnectionError(f"peer {rank} closed the connection")
        got += k
    return bytes(buf)


def read_frame(sock: socket.socket, rank=None, max_payload: int = MAX_PAYLOAD) -> Message:
    kind, length = _parse_header(_recv_exact(sock, HEADER.size, rank), max_payload, rank)
    return Message(kind, _recv_exact(sock, length, rank) if length else b"")


def send_frame(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_frame(msg))


# ---------------------------------------------------------------------------
# payloads
# ---------------------------------------------------------------------------

def theta_frames(theta: np.ndarray, chunk_size: int = DEFAULT_CHUNK_SIZE):
    """BROADCAST_THETA messages carrying theta as little-endian f32, chunked."""
    flat = np.ascontiguousarray(theta, dtype="<f4")
    for start in range(0, flat.size, chunk_size):
        yield Message(MsgType.BROADCAST_THETA, flat[start:start + chunk_size].tobytes())


def pack_batch(batch, config) -> bytes:
    """Batch payload: model shape, batch shape, then the four arrays."""
    b, t = batch.inputs.shape
    head = BATCH_HEAD.pack(config.vocab_size, config.embed_dim, config.hidden_dim,
                           config.num_layers, b, t)
    return b"".join([head,
                     np.ascontiguousarray(batch.inputs, "<i4").tobytes(),
                     np.ascontiguousarray(batch.targets, "<i4").tobytes(),
                     np.ascontiguousarray(batch.loss_mask, np.uint8).tobytes(),
                     np.ascontiguousarray(batch.lengths, "<i4").tobytes()])


def unpack_batch(payload: bytes):
    from .models import LstmConfig
    from .tasks import TaskBatch

    v, e, h, nl, b, t = BATCH_HEAD.unpack_from(payload)
    off = BATCH_HEAD.size
    need = off + b * t * 9 + b * 4
    if len(payload) != need:
        raise ProtocolError(f"batch payload is {len(payload)} bytes, expected {need}")

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off)
        off += count * np.dtype(dtype).itemsize
        return arr

    inputs = take(b * t, "<i4").reshape(b, t).astype(np.int32)
    targets = take(b * t, "<i4").reshape(b, t).astype(np.int32)
    mask = take(b * t, np.uint8).reshape(b, t).astype(bool)
    lengths = take(b, "<i4").astype(np.int32)
    return LstmConfig(v, h, e, nl), TaskBatch(inputs, targets, mask, lengths)


@dataclass(frozen=True)
class SeedAssignment:
    """The probes one rank evaluates, as (global 1-based index, seed) pairs."""

    epsilon: float
    distribution: Distribution
    items: tuple[tuple[int, int], ...]
    exact_restore: bool = True
    gather_per_probe: bool = True
    chunk_size: int = DEFAULT_CHUNK_SIZE

    def encode(self) -> bytes:
        flags = int(self.exact_restore) | (int(self.gather_per_probe) << 1)
        head = SEED_HEAD.pack(self.epsilon, int(self.distribution), flags, self.chunk_size,
                              len(self.items))
        return head + b"".join(SEED_ITEM.pack(i, s) for i, s in self.items)

    @classmethod
    def decode(cls, payload: bytes) -> "SeedAssignment":
        if len(payload) < SEED_HEAD.size:
            raise ProtocolError("truncated seed payload")
        eps, dist, flags, chunk, count = SEED_HEAD.unpack_from(payload)
        if len(payload) != SEED_HEAD.size + count * SEED_ITEM.size:
            raise ProtocolError("seed payload length does not match its count")
        items = tuple(SEED_ITEM.unpack_from(payload, SEED_HEAD.size + k * SEED_ITEM.size)
                      for k in range(count))
        return cls(eps, Distribution(dist), items, bool(flags & 1), bool(flags & 2), chunk)


def assign_seeds(cfg: StepConfig, world_size: int, gather_per_probe: bool = True,
                 order=None) -> list[SeedAssignment]:
    """Split probes 1..n into contiguous blocks of n/w, block r going to rank order[r]."""
    n, w = cfg.n_pert, world_size
    if n % w:
        raise ValueError(f"n_pert={n} is not divisible by world_size={w}")
    seeds = [probe_seed(cfg.base_seed, i) for i in range(1, n + 1)]
    if len(set(seeds)) != n:
        raise ValueError("probe seed collision within a step")
    per = n // w
    blocks = [SeedAssignment(cfg.epsilon, cfg.distribution,
                             tuple((i + 1, seeds[i]) for i in range(r * per, (r + 1) * per)),
                             cfg.exact_restore, gather_per_probe, cfg.chunk_size)
              for r in range(w)]
    if order is None:
        return blocks
    out = [None] * w
    for block, rank in zip(blocks, order):
        out[rank] = block
    return out


def _evaluate(loss: BlackBoxLoss, theta: np.ndarray, assignment: SeedAssignment, emit=None):
    """Loss pairs for the assignment in seed order; ``emit`` is called per pair."""
    clean = theta.copy() if assignment.exact_restore else None
    pairs = []
    for _, seed in assignment.items:
        spec = ProbeSpec(seed, assignment.distribution, assignment.epsilon)
        pair = loss_pair(loss, theta, spec, assignment.chunk_size, clean)
        pairs.append(pair)
        if emit is not None and assignment.gather_per_probe:
            emit([pair])
    if emit is not None and not assignment.gather_per_probe:
        emit(pairs)
    return pairs


def _pairs_payload(pairs) -> bytes:
    return b"".join(PAIR.pack(m, p) for m, p in pairs)


# ---------------------------------------------------------------------------
# worker
# ---------------------------------------------------------------------------

LossFactory = Callable[[bytes], BlackBoxLoss]


def lstm_loss_factory(payload: bytes) -> BlackBoxLoss:
    from .models import ForwardWorkspace, forward_loss, init_params

    config, batch = unpack_batch(payload)
    params = init_params(config, 0, np.float32)  # only the layout is used
    ws = ForwardWorkspace(config, np.float32)
    return lambda theta: forward_loss(params, batch, ws, theta=theta)


def connect(role: RankRole, retries: int = 200, delay: float = 0.05) -> socket.socket:
    import time

    last = None
    for _ in range(retries):
        try:
            sock = socket.create_connection(role.addr, timeout=role.timeout)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            send_frame(sock, Message(MsgType.GATHER_LOSSES,
                                     HELLO.pack(role.rank, role.world_size)))
            return sock
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise ConnectionError(f"rank {role.rank} could not reach {role.addr}: {last}")


def serve_worker(role: RankRole, loss_factory: LossFactory = lstm_loss_factory,
                 sock: socket.socket | None = None) -> int:
    """Worker loop. Returns the number of steps served once SHUTDOWN arrives.

    Per step it receives theta chunks, one batch and one seed assignment, and
    replies with the loss pairs in the order the seeds arrived.
    """
    if role.rank == 0:
        raise ValueError("rank 0 is the coordinator, not a worker")
    if sock is None:
        sock = connect(role)
    theta = np.empty(0, dtype=np.float32)
    filled = 0
    loss = None
    steps = 0
    try:
        while True:
            msg = read_frame(sock, rank=0)
            if msg.msg_type is MsgType.SHUTDOWN:
                return steps
            if msg.msg_type is MsgType.BROADCAST_THETA:
                chunk = np.frombuffer(msg.payload, dtype="<f4")
                if filled + chunk.size > theta.size:
                    grown = np.empty(filled + chunk.size, dtype=np.float32)
                    grown[:filled] = theta[:filled]
                    theta = grown
                theta[filled:filled + chunk.size] = chunk
                filled += chunk.size
            elif msg.msg_type is MsgType.BROADCAST_BATCH:
                loss = loss_factory(msg.payload)
            elif msg.msg_type is MsgType.SCATTER_SEEDS:
                if loss is None:
                    raise ProtocolError("seeds arrived before any batch", 0)
                assignment = SeedAssignment.decode(msg.payload)
                work = theta[:filled]
                if not assignment.items:
                    send_frame(sock, Message(MsgType.GATHER_LOSSES))
                else:
                    _evaluate(loss, work, assignment,
                              lambda ps: send_frame(sock, Message(MsgType.GATHER_LOSSES,
                                                                  _pairs_payload(ps))))
                filled = 0
                steps += 1
            else:
                raise ProtocolError(f"unexpected {msg.msg_type.name} from rank 0", 0)
    except (ConnectionError, OSError) as exc:
        log.warning("worker %d lost its connection after %d steps: %s", role.rank, steps, exc)
        return steps
    finally:
        sock.close()


# ---------------------------------------------------------------------------
# coordinator
# ---------------------------------------------------------------------------

@dataclass
class Coordinator:
    """Rank 0's view of a session: one socket per worker rank."""

    role: RankRole
    conns: dict[int, socket.socket] = field(default_factory=dict)
    degraded: bool = False
    gather_per_probe: bool = True
    listener: socket.socket | None = None

    @classmethod
    def listen(cls, role: RankRole, gather_per_probe: bool = True) -> "Coordinator":
        if role.rank != 0:
            raise ValueError("only rank 0 coordinates")
        co = cls(role, gather_per_probe=gather_per_probe)
        if role.world_size > 1:
            co.listener = socket.create_server(role.addr, reuse_port=False)
        return co

    @property
    def address(self) -> tuple[str, int]:
        return self.listener.getsockname()[:2] if self.listener else self.role.addr

    def accept_workers(self) -> None:
        assert self.listener is not None or self.role.world_size == 1
        self.listener.settimeout(self.role.timeout) if self.listener else None
        while len(self.conns) < self.role.world_size - 1:
            conn, _ = self.listener.accept()
            conn.settimeout(self.role.timeout)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = read_frame(conn)
            if hello.msg_type is not MsgType.GATHER_LOSSES or len(hello.payload) != HELLO.size:
                raise ProtocolError("expected a hello frame")
            rank, world = HELLO.unpack(hello.payload)
            if world != self.role.world_size or not 0 < rank < world or rank in self.conns:
                raise ProtocolError(f"bad hello (rank {rank}, world {world})", rank)
            self.conns[rank] = conn

    def shutdown(self) -> None:
        for rank, conn in self.conns.items():
            try:
                send_frame(conn, Message(MsgType.SHUTDOWN))
            except OSError:
                pass
            conn.close()
        self.conns.clear()
        if self.listener is not None:
            self.listener.close()
            self.listener = None

    def __enter__(self):
        self.accept_workers()
        return self

    def __exit__(self, *exc):
        self.shutdown()

    def _broadcast(self, theta, batch_payload, assignments) -> None:
        for rank, conn in self.conns.items():
            try:
                for msg in theta_frames(theta, assignments[rank].chunk_size):
                    send_frame(conn, msg)
                send_frame(conn, Message(MsgType.BROADCAST_BATCH, batch_payload))
                send_frame(conn, Message(MsgType.SCATTER_SEEDS, assignments[rank].encode()))
            except OSError as exc:
                raise StepAborted(f"send failed: {exc}", rank) from exc

    def _gather(self, assignments, out: np.ndarray) -> None:
        sel = selectors.DefaultSelector()
        expected, received = {}, {}
        for rank, conn in self.conns.items():
            expected[rank] = len(assignments[rank].items)
            received[rank] = []
            sel.register(conn, selectors.EVENT_READ, rank)
        pending = {r for r in self.conns}
        try:
            while pending:
                events = sel.select(self.role.timeout)
                if not events:
                    raise StepAborted(f"no reply within {self.role.timeout}s", min(pending))
                for key, _ in events:
                    rank = key.data
                    try:
                        msg = read_frame(key.fileobj, rank)
                    except (ConnectionError, socket.timeout, OSError) as exc:
                        raise StepAborted(str(exc), rank) from exc
                    if msg.msg_type is not MsgType.GATHER_LOSSES or len(msg.payload) % PAIR.size:
                        raise ProtocolError(f"malformed gather ({msg.msg_type.name})", rank)
                    received[rank].extend(PAIR.iter_unpack(msg.payload))
                    if len(received[rank]) > expected[rank]:
                        raise ProtocolError("more loss pairs than seeds", rank)
                    if len(received[rank]) == expected[rank]:
                        pending.discard(rank)
                        sel.unregister(key.fileobj)
        finally:
            sel.close()
        for rank, pairs in received.items():
            for (index, _), pair in zip(assignments[rank].items, pairs):
                out[index - 1] = pair

    def step(self, loss: BlackBoxLoss, theta: np.ndarray, cfg: StepConfig,
             batch_payload: bytes = b"", order=None):
        """One distributed step in place on rank 0's theta. Returns ``(theta, report)``.

        On abort theta is left as it was and the session is marked degraded.
        """
        if self.degraded:
            raise StepAborted("session is degraded", 0)
        if cfg.estimator is Estimator.FD:
            raise ValueError("the distributed step evaluates loss pairs; use CD or FD_AS")
        if not np.all(np.isfinite(theta)):
            raise DivergenceError("theta is not finite before the step", describe_theta(theta))
        assignments = assign_seeds(cfg, self.role.world_size, self.gather_per_probe, order)
        pairs = np.full((cfg.n_pert, 2), np.nan)
        snapshot = theta.copy()
        try:
            self._broadcast(theta, batch_payload, assignments)
            mine = assignments[0]
            local = _evaluate(loss, theta, mine)
            for (index, _), pair in zip(mine.items, local):
                pairs[index - 1] = pair
            self._gather(assignments, pairs)
        except (StepAborted, ProtocolError):
            np.copyto(theta, snapshot)
            self.degraded = True
            raise
        except BaseException:
            np.copyto(theta, snapshot)
            raise
        if not np.all(np.isfinite(pairs)):
            np.copyto(theta, snapshot)
            raise DivergenceError("non-finite loss pair gathered", describe_theta(theta))
        # like the sequential step, the update lands on rank 0's theta as its
        # own evaluations left it (exactly the broadcast theta under exact_restore)
        del snapshot
        return theta, apply_update(theta, pairs, cfg)


def dist_cdrge_step(loss: BlackBoxLoss, theta: np.ndarray, cfg: StepConfig,
                    coordinator: Coordinator, batch_payload: bytes = b""):
    """Distributed counterpart of :func:`zorn.zoo.cdrge_step` run on rank 0."""
    return coordinator.step(loss, theta, cfg, batch_payload)
