"""Deterministic discrete-event simulation of heterogeneous clients and links."""

from __future__ import annotations

import hashlib
import heapq
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InputError, QuiescenceSignal

DROPOUT_STREAM = 0xD0


@dataclass(frozen=True)
class DeviceProfile:
    name: str = "fast"
    fwd_seconds_per_block_per_sample: float = 1e-3
    bwd_multiplier: float = 2.0
    memory_bytes_budget: int = 8 * 2**30
    uplink_bytes_per_s: float = 10e6
    downlink_bytes_per_s: float = 10e6
    latency_s: float = 0.01
    dropout_prob: float = 0.0

    def __post_init__(self):
        for name in ("fwd_seconds_per_block_per_sample", "bwd_multiplier", "memory_bytes_budget",
                     "uplink_bytes_per_s", "downlink_bytes_per_s"):
            if not getattr(self, name) > 0:
                raise InputError(f"device {self.name!r}: {name} must be > 0")
        if self.latency_s < 0:
            raise InputError(f"device {self.name!r}: latency_s must be >= 0")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise InputError(f"device {self.name!r}: dropout_prob must lie in [0, 1]")


@dataclass(frozen=True)
class Link:
    bytes_per_s: float
    latency_s: float


def transfer_time(nbytes: int, link: Link) -> float:
    if nbytes < 0:
        raise InputError(f"byte count must be >= 0, got {nbytes}")
    return link.latency_s + nbytes / link.bytes_per_s


def compute_time(blocks: int, samples: int, profile: DeviceProfile, direction: str = "forward") -> float:
    if direction not in ("forward", "backward"):
        raise InputError(f"direction must be 'forward' or 'backward', got {direction!r}")
    mult = 1.0 if direction == "forward" else profile.bwd_multiplier
    return blocks * samples * profile.fwd_seconds_per_block_per_sample * mult


def sample_dropout(dropout_prob: float, seed: int, client_id: int, round_index: int) -> bool:
    """True if the client participates in ``round_index``."""
    if dropout_prob <= 0.0:
        return True
    if dropout_prob >= 1.0:
        return False
    u = np.random.default_rng([seed, DROPOUT_STREAM, client_id, round_index]).random()
    return bool(u >= dropout_prob)


@dataclass(order=True)
class SimEvent:
    fire_time_s: float
    sequence_number: int
    actor: str = field(compare=False)
    action: str = field(compare=False)
    nbytes: int = field(compare=False, default=0)
    callback: Callable[[], None] | None = field(compare=False, default=None, repr=False)


class Simulator:
    """Single-threaded event loop ordered by (fire_time, insertion sequence)."""

    def __init__(self, keep_trace: bool = True):
        self.now = 0.0
        self._queue: list[SimEvent] = []
        self._seq = 0
        self.keep_trace = keep_trace
        self.trace: list[tuple[float, str, str, int]] = []

    def __len__(self) -> int:
        return len(self._queue)

    def schedule(self, at: float, actor: str, action: str, callback=None, nbytes: int = 0) -> SimEvent:
        if at < self.now:
            raise InputError(f"cannot schedule at {at} before current time {self.now}")
        ev = SimEvent(at, self._seq, actor, action, nbytes, callback)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def schedule_in(self, delay: float, actor: str, action: str, callback=None, nbytes: int = 0):
        return self.schedule(self.now + delay, actor, action, callback, nbytes)

    def advance(self) -> SimEvent:
        if not self._queue:
            raise QuiescenceSignal("event queue is empty")
        ev = heapq.heappop(self._queue)
        self.now = ev.fire_time_s
        if self.keep_trace:
            self.trace.append((ev.fire_time_s, ev.actor, ev.action, ev.nbytes))
        if ev.callback is not None:
            ev.callback()
        return ev

    def run(self) -> float:
        while self._queue:
            self.advance()
        return self.now

    def trace_lines(self) -> list[str]:
        return [f"{t!r}\t{actor}\t{action}\t{nbytes}" for t, actor, action, nbytes in self.trace]

    def trace_hash(self) -> str:
        h = hashlib.sha256()
        for line in self.trace_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()


class ClientLinks:
    """Half-duplex-per-direction links of one client: frames on a direction serialize."""

    def __init__(self, profile: DeviceProfile):
        self.up = Link(profile.uplink_bytes_per_s, profile.latency_s)
        self.down = Link(profile.downlink_bytes_per_s, profile.latency_s)
        self._busy = {"up": 0.0, "down": 0.0}

    def send(self, now: float, direction: str, nbytes: int) -> float:
        """Arrival time of a frame handed to the link at ``now``."""
        link = self.up if direction == "up" else self.down
        start = max(now, self._busy[direction])
        done_tx = start + nbytes / link.bytes_per_s
        self._busy[direction] = done_tx
        return done_tx + link.latency_s


@dataclass
class MetricsLedger:
    num_clients: int
    bytes_up: list[int] = field(init=False)
    bytes_down: list[int] = field(init=False)
    compute_s: list[float] = field(init=False)
    idle_s: list[float] = field(init=False)
    steps: list[int] = field(init=False)
    dropped: list[int] = field(init=False)
    peak_memory_bytes: list[int] = field(init=False)
    frames: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    barrier_events: int = 0
    total_time_s: float = 0.0
    over_budget_clients: list[int] = field(default_factory=list)

    def __post_init__(self):
        n = self.num_clients
        self.bytes_up = [0] * n
        self.bytes_down = [0] * n
        self.compute_s = [0.0] * n
        self.idle_s = [0.0] * n
        self.steps = [0] * n
        self.dropped = [0] * n
        self.peak_memory_bytes = [0] * n

    def record_frame(self, client_id: int, direction: str, tag_name: str, nbytes: int) -> None:
        if direction == "up":
            self.bytes_up[client_id] += nbytes
        else:
            self.bytes_down[client_id] += nbytes
        self.frames[tag_name] += 1

    @property
    def total_bytes_up(self) -> int:
        return sum(self.bytes_up)

    @property
    def total_bytes_down(self) -> int:
        return sum(self.bytes_down)

    @property
    def total_steps(self) -> int:
        return sum(self.steps)
