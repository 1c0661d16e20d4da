"""Complete training runs on top of the simulator.

``flexp_sfl``: asynchronous split exchange, per-client cut points, no aggregation.
``sfl``: synchronous rounds of the same split exchange at one common cut, plus
periodic FedAvg of the client-side blocks.
``fedavg``: every client trains the full stack locally; full-model FedAvg each round.

A "step" is one gradient application by one client. ``target_steps`` bounds the
total number of step attempts across the federation; an attempt lost to dropout
applies no update.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .client import ClientRuntime, _tape_bytes
from .data import Federation, FederationSpec, batch_indices, generate_federation, global_test_set
from .engine import BlockParams, OptimizerConfig, OptimizerState
from .errors import InputError
from .model import (
    LayerStack,
    ModelConfig,
    accuracy,
    build_model,
    forward_chain,
    pretrain,
    train_step,
)
from .server import ServerRuntime
from .sim import (
    ClientLinks,
    DeviceProfile,
    MetricsLedger,
    Simulator,
    compute_time,
    sample_dropout,
    transfer_time,
)
from .wire import Message, Tag, flatten_params, header_bytes, unflatten_params

PROTOCOLS = ("flexp_sfl", "sfl", "fedavg")
INIT_STREAM = 0x1417
PRETRAIN_STREAM = 0x9E7


@dataclass
class RunPlan:
    protocol: str = "flexp_sfl"
    target_steps: int | None = 500
    time_budget_s: float | None = None
    q: list[float] = field(default_factory=lambda: [0.5] * 5)
    sfl_q: float | None = None
    aggregation_period: int = 1
    local_steps: int = 1
    lam: float = 0.0
    align_every: int | None = 5
    batch_size: int = 8
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pretrain_steps: int = 0
    pretrain_lr: float = 3e-3
    element_size: int = 4
    server_seconds_per_block_per_sample: float = 0.0
    reconnect_s: float = 1.0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise InputError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if (self.target_steps is None) == (self.time_budget_s is None):
            raise InputError("exactly one of target_steps and time_budget_s must be set")
        for i, q in enumerate(self.q):
            if not 0.0 <= q <= 1.0:
                raise InputError(f"q[{i}] = {q} outside [0, 1]")
        if self.lam < 0:
            raise InputError("lam must be >= 0")
        if self.aggregation_period < 1 or self.local_steps < 1 or self.batch_size < 1:
            raise InputError("aggregation_period, local_steps and batch_size must be >= 1")
        if self.align_every is not None and self.align_every < 1:
            raise InputError("align_every must be >= 1 or null")

    @property
    def common_q(self) -> float:
        """Cut used by the SFL baseline: explicit ``sfl_q`` or the median client q."""
        return self.sfl_q if self.sfl_q is not None else float(statistics.median(self.q))


@dataclass
class Experiment:
    model: ModelConfig
    federation: FederationSpec
    devices: list[DeviceProfile]
    plan: RunPlan

    def __post_init__(self):
        n = self.federation.num_clients
        if len(self.devices) != n:
            raise InputError(f"{len(self.devices)} device profiles for {n} clients")
        if len(self.plan.q) != n:
            raise InputError(f"{len(self.plan.q)} q values for {n} clients")
        if self.model.input_dim != self.federation.input_dim:
            raise InputError("model.input_dim must equal federation.input_dim")
        if self.model.num_classes != self.federation.num_classes:
            raise InputError("model.num_classes must equal federation.num_classes")


@dataclass
class TimelineRow:
    sim_time_s: float
    step: int
    client_id: int
    train_loss: float
    bytes_up_total: int
    bytes_down_total: int


@dataclass
class RunResult:
    protocol: str
    ledger: MetricsLedger
    timeline: list[TimelineRow]
    personalized_acc: list[float]
    global_acc: list[float]
    crosseval: np.ndarray
    models: list[list[BlockParams]]
    trace_hash: str
    q: list[float]

    @property
    def mean_personalized_acc(self) -> float:
        return float(np.mean(self.personalized_acc))

    @property
    def mean_global_acc(self) -> float:
        return float(np.mean(self.global_acc))


def shared_base(exp: Experiment, fed: Federation, seed: int) -> LayerStack:
    base = build_model(exp.model, [seed, INIT_STREAM])
    if exp.plan.pretrain_steps:
        x, y = fed.pooled_train()
        hyper = OptimizerConfig("adam", exp.plan.pretrain_lr)
        base, _ = pretrain(base, x, y, exp.plan.pretrain_steps, exp.plan.batch_size * 4, hyper,
                           [seed, PRETRAIN_STREAM])
    return base


def _act_shape(exp: Experiment) -> tuple[int, ...]:
    b, d = exp.plan.batch_size, exp.model.hidden_dim
    return (b, exp.model.seq_len, d) if exp.model.seq_len else (b, d)


class _Run:
    """State shared by every protocol driver."""

    def __init__(self, exp: Experiment, seed: int, fed: Federation | None = None,
                 base: LayerStack | None = None, keep_trace: bool = True):
        self.exp, self.plan, self.seed = exp, exp.plan, seed
        self.fed = fed if fed is not None else generate_federation(exp.federation, seed)
        self.base = base if base is not None else shared_base(exp, self.fed, seed)
        self.n = exp.federation.num_clients
        self.sim = Simulator(keep_trace)
        self.ledger = MetricsLedger(self.n)
        self.links = [ClientLinks(p) for p in exp.devices]
        self.timeline: list[TimelineRow] = []
        self.attempts = 0
        self._server_busy = 0.0
        self._finished_at = [0.0] * self.n

    # -- budget ------------------------------------------------------------

    def budget_left(self, cost: int = 1) -> bool:
        if self.plan.target_steps is not None:
            return self.attempts + cost <= self.plan.target_steps
        return self.sim.now < self.plan.time_budget_s

    # -- frames ------------------------------------------------------------

    def send(self, c: int, direction: str, msg: Message, on_arrive: Callable[[Message], None]):
        nbytes = msg.byte_size
        arrival = self.links[c].send(self.sim.now, direction, nbytes)
        self.ledger.record_frame(c, direction, msg.tag.name, nbytes)
        actor = f"client{c}" if direction == "up" else "server"
        self.sim.schedule(arrival, actor, f"{msg.tag.name}->{'server' if direction == 'up' else f'client{c}'}",
                          lambda: on_arrive(msg), nbytes)

    def server_delay(self, blocks: int) -> float:
        """Serialized server compute; zero by default."""
        per = self.plan.server_seconds_per_block_per_sample
        if per <= 0.0 or blocks == 0:
            return 0.0
        start = max(self.sim.now, self._server_busy)
        self._server_busy = start + per * blocks * self.plan.batch_size
        return self._server_busy - self.sim.now

    def log_row(self, c: int, loss: float) -> None:
        self.timeline.append(TimelineRow(
            self.sim.now, self.ledger.total_steps, c, loss,
            self.ledger.total_bytes_up, self.ledger.total_bytes_down,
        ))

    def _barrier(self) -> None:
        """Every participant has finished; early finishers idled until now."""
        self.ledger.barrier_events += 1
        for c in self._participants:
            self.ledger.idle_s[c] += self.sim.now - self._finished_at[c]

    def participates(self, c: int, round_index: int) -> bool:
        return sample_dropout(self.exp.devices[c].dropout_prob, self.seed, c, round_index)


# ---------------------------------------------------------------------------
# split exchange (shared by FlexP-SFL and SFL)


class _SplitDriver(_Run):
    def __init__(self, exp, seed, qs: Sequence[float], lam: float, align_every, **kw):
        super().__init__(exp, seed, **kw)
        plan = self.plan
        self.server = ServerRuntime(self.base, plan.optimizer, plan.element_size)
        self.clients = []
        for c in range(self.n):
            self.server.register_client(c, qs[c], lam)
            self.clients.append(ClientRuntime(
                c, qs[c], self.base, plan.optimizer, self.fed.shards[c], lam=lam,
                align_every=align_every, batch_size=plan.batch_size,
                element_size=plan.element_size, seed=seed,
            ))
        self._outstanding = [0] * self.n
        self._step_start = [0.0] * self.n
        self._step_compute = [0.0] * self.n
        self._step_loss = [0.0] * self.n
        self.on_step_done: Callable[[int, float], None] = lambda c, loss: None

    def nominal_step_time(self, c: int) -> float:
        """Duration of an undisturbed step; what a dropped client sits out."""
        prof, b = self.exp.devices[c], self.plan.batch_size
        front = self.clients[c].cl_count + 1
        act = header_bytes(len(_act_shape(self.exp))) + int(np.prod(_act_shape(self.exp))) * self.plan.element_size
        links = self.links[c]
        return (
            compute_time(front, b, prof, "forward")
            + compute_time(1, b, prof, "forward") + compute_time(1, b, prof, "backward")
            + compute_time(front, b, prof, "backward")
            + 2 * transfer_time(act, links.up) + 2 * transfer_time(act, links.down)
        )

    def begin_step(self, c: int) -> None:
        client, prof = self.clients[c], self.exp.devices[c]
        x, y = client.next_batch()
        t = compute_time(client.cl_count + 1, self.plan.batch_size, prof, "forward")
        self._step_start[c] = self.sim.now
        self._step_compute[c] = t
        self.sim.schedule_in(t, f"client{c}", "forward_done", lambda: self._front_done(c, x, y))

    def _front_done(self, c, x, y):
        msgs = self.clients[c].client_forward(x, y)
        self._outstanding[c] = len(msgs) + 1  # replies plus the GRAD_DOWN that closes the step
        for msg in msgs:
            self.send(c, "up", msg, self._server_recv)

    def _server_recv(self, msg: Message):
        c = msg.client_id
        reply = self.server.handle(msg)
        blocks = len(self.server.sl_indices(c))
        if msg.tag == Tag.ALIGN_PROBE:
            blocks = self.clients[c].cl_count
        elif msg.tag == Tag.GRAD_UP:
            blocks = int(blocks * self.exp.devices[c].bwd_multiplier)
        delay = self.server_delay(blocks)
        handler = {Tag.ACT_DOWN: self._act_down, Tag.GRAD_DOWN: self._grad_down,
                   Tag.ALIGN_ACK: self._align_ack}[reply.tag]
        if delay:
            self.sim.schedule_in(delay, "server", f"compute {msg.tag.name}",
                                 lambda: self.send(c, "down", reply, handler))
        else:
            self.send(c, "down", reply, handler)

    def _act_down(self, msg: Message):
        c = msg.client_id
        self._outstanding[c] -= 1
        prof, b = self.exp.devices[c], self.plan.batch_size
        t = compute_time(1, b, prof, "forward") + compute_time(1, b, prof, "backward")
        self._step_compute[c] += t

        def finish_head():
            loss, grad_up = self.clients[c].client_finalize_forward(msg)
            self._step_loss[c] = loss
            self.send(c, "up", grad_up, self._server_recv)

        self.sim.schedule_in(t, f"client{c}", "head_done", finish_head)

    def _grad_down(self, msg: Message):
        c = msg.client_id
        prof = self.exp.devices[c]
        t = compute_time(self.clients[c].cl_count + 1, self.plan.batch_size, prof, "backward")
        self._step_compute[c] += t

        def finish_back():
            self.clients[c].client_apply_cut_gradient(msg)
            self._close(c)

        self.sim.schedule_in(t, f"client{c}", "backward_done", finish_back)

    def _align_ack(self, msg: Message):
        self._close(msg.client_id)

    def _close(self, c: int):
        self._outstanding[c] -= 1
        if self._outstanding[c]:
            return
        elapsed = self.sim.now - self._step_start[c]
        self.ledger.compute_s[c] += self._step_compute[c]
        self.ledger.idle_s[c] += elapsed - self._step_compute[c]
        self.ledger.steps[c] += 1
        self.on_step_done(c, self._step_loss[c])

    def models(self) -> list[list[BlockParams]]:
        return [cl.composite(self.server.snapshot_sl(cl.client_id)) for cl in self.clients]


class FlexpSFL(_SplitDriver):
    def __init__(self, exp, seed, **kw):
        plan = exp.plan
        super().__init__(exp, seed, plan.q, plan.lam, plan.align_every, **kw)
        self._round = [0] * self.n
        self.on_step_done = self._done

    def start(self, c: int) -> None:
        if not self.budget_left():
            return
        self.attempts += 1
        r = self._round[c]
        self._round[c] += 1
        if not self.participates(c, r):
            self.ledger.dropped[c] += 1
            wait = self.nominal_step_time(c) + self.plan.reconnect_s
            self.ledger.idle_s[c] += wait
            self.sim.schedule_in(wait, f"client{c}", "dropped", lambda: self.start(c))
            return
        self.begin_step(c)

    def _done(self, c: int, loss: float) -> None:
        self.log_row(c, loss)
        self.start(c)

    def run(self) -> None:
        for c in range(self.n):
            self.sim.schedule(0.0, f"client{c}", "join", lambda c=c: self.start(c))
        self.sim.run()


class SFLBaseline(_SplitDriver):
    def __init__(self, exp, seed, **kw):
        q = exp.plan.common_q
        super().__init__(exp, seed, [q] * exp.federation.num_clients, 0.0, None, **kw)
        self.on_step_done = self._done
        self.round = 0
        self._waiting: set[int] = set()
        self._participants: list[int] = []
        self._losses: dict[int, float] = {}

    def run(self) -> None:
        self.sim.schedule(0.0, "server", "round_start", self._round_start)
        self.sim.run()

    def _round_start(self):
        if not self.budget_left(self.n):
            return
        self.attempts += self.n
        r = self.round
        self._participants = [c for c in range(self.n) if self.participates(c, r)]
        for c in range(self.n):
            if c not in self._participants:
                self.ledger.dropped[c] += 1
        self._waiting = set(self._participants)
        self._losses = {}
        if not self._participants:
            self._round_end()
            return
        for c in self._participants:
            self.begin_step(c)

    def _done(self, c, loss):
        self._losses[c] = loss
        self._finished_at[c] = self.sim.now
        self._waiting.discard(c)
        if self._waiting:
            return
        self._barrier()
        if (self.round + 1) % self.plan.aggregation_period == 0:
            aggregate_round(self, self._participants,
                            get=lambda c: self.clients[c].local_blocks(),
                            put=lambda c, blocks: self.clients[c].set_local_blocks(blocks),
                            then=self._round_end)
        else:
            self._round_end()

    def _round_end(self):
        for c in self._participants:
            self.log_row(c, self._losses[c])
        self.round += 1
        self._round_start()


def aggregate_round(run: _Run, participants: list[int], get, put, then) -> None:
    """PARAM_UP from every participant, |D_n|-weighted average, PARAM_DOWN to each."""
    uploads: dict[int, np.ndarray] = {}
    template = get(participants[0])
    es = run.plan.element_size

    def on_up(msg: Message):
        uploads[msg.client_id] = msg.payload
        if len(uploads) < len(participants):
            return
        run.ledger.barrier_events += 1
        weights = [run.fed.shards[c].num_train for c in participants]
        avg = weighted_average([uploads[c] for c in participants], weights)
        pending = set(participants)
        for c in participants:
            down = Message(Tag.PARAM_DOWN, c, 0, avg, es)

            def on_down(m: Message, c=c):
                put(c, unflatten_params(m.payload, template))
                pending.discard(c)
                if not pending:
                    run.ledger.barrier_events += 1
                    then()

            run.send(c, "down", down, on_down)

    for c in participants:
        run.send(c, "up", Message(Tag.PARAM_UP, c, 0, flatten_params(get(c)), es), on_up)


def weighted_average(vectors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Data-size-weighted mean; returns the first vector unchanged when all are identical."""
    w = np.asarray(weights, dtype=np.float64)
    if len(vectors) == 0 or w.sum() <= 0:
        raise InputError("weighted_average needs at least one vector with positive total weight")
    w = w / w.sum()
    ref = vectors[0]
    acc = np.zeros_like(ref)
    for wi, v in zip(w[1:], vectors[1:]):
        acc += wi * (v - ref)
    return ref + acc


class FedAvgBaseline(_Run):
    def __init__(self, exp, seed, **kw):
        super().__init__(exp, seed, **kw)
        self.blocks = [self.base.blocks() for _ in range(self.n)]
        self.states = [[OptimizerState() for _ in self.base.blocks()] for _ in range(self.n)]
        self.local_steps = [0] * self.n
        self.round = 0
        self._participants: list[int] = []
        self._losses: dict[int, float] = {}
        self._waiting: set[int] = set()
        num_blocks = len(self.base.blocks())
        full_bytes = sum(b.param_count() for b in self.base.blocks()) * self.plan.element_size
        act_bytes = self._activation_bytes()
        for c, prof in enumerate(exp.devices):
            # parameters, saved activations, and the flattened upload buffer
            self.ledger.peak_memory_bytes[c] = 2 * full_bytes + act_bytes
            if self.ledger.peak_memory_bytes[c] > prof.memory_bytes_budget:
                self.ledger.over_budget_clients.append(c)
        self._num_blocks = num_blocks

    def _activation_bytes(self) -> int:
        x = self.fed.shards[0].x_train[: self.plan.batch_size]
        _, tapes = forward_chain(self.base.blocks(), x)
        return _tape_bytes(tapes, self.plan.element_size)

    def run(self) -> None:
        self.sim.schedule(0.0, "server", "round_start", self._round_start)
        self.sim.run()

    def _round_start(self):
        h = self.plan.local_steps
        if not self.budget_left(self.n * h):
            return
        self.attempts += self.n * h
        r = self.round
        self._participants = [c for c in range(self.n) if self.participates(c, r)]
        for c in range(self.n):
            if c not in self._participants:
                self.ledger.dropped[c] += h
        self._waiting = set(self._participants)
        self._losses = {}
        if not self._participants:
            self._round_end()
            return
        for c in self._participants:
            prof, b = self.exp.devices[c], self.plan.batch_size
            t = h * (compute_time(self._num_blocks, b, prof, "forward")
                     + compute_time(self._num_blocks, b, prof, "backward"))
            self.ledger.compute_s[c] += t
            self.sim.schedule_in(t, f"client{c}", "local_done", lambda c=c: self._local(c))

    def _local(self, c: int):
        shard = self.fed.shards[c]
        loss = 0.0
        for _ in range(self.plan.local_steps):
            idx = batch_indices(self.seed, c, self.local_steps[c], shard.num_train, self.plan.batch_size)
            loss, self.blocks[c], self.states[c] = train_step(
                self.blocks[c], self.states[c], shard.x_train[idx], shard.y_train[idx], self.plan.optimizer
            )
            self.local_steps[c] += 1
            self.ledger.steps[c] += 1
        self._losses[c] = loss
        self._finished_at[c] = self.sim.now
        self._waiting.discard(c)
        if self._waiting:
            return
        self._barrier()
        if (self.round + 1) % self.plan.aggregation_period == 0:
            aggregate_round(self, self._participants, get=lambda c: self.blocks[c],
                            put=self._put, then=self._round_end)
        else:
            self._round_end()

    def _put(self, c, blocks):
        self.blocks[c] = blocks

    def _round_end(self):
        for c in self._participants:
            self.log_row(c, self._losses[c])
        self.round += 1
        self._round_start()

    def models(self) -> list[list[BlockParams]]:
        return [list(b) for b in self.blocks]


# ---------------------------------------------------------------------------


def _finish(driver, protocol: str, qs: list[float]) -> RunResult:
    fed, ledger = driver.fed, driver.ledger
    ledger.total_time_s = driver.sim.now
    models = driver.models()
    gx, gy, _ = global_test_set(fed.shards)
    n = driver.n
    cross = np.zeros((n, n))
    for i, m in enumerate(models):
        for j, s in enumerate(fed.shards):
            cross[i, j] = accuracy(m, s.x_test, s.y_test)
    glob = [accuracy(m, gx, gy) for m in models]
    if isinstance(driver, _SplitDriver):
        for c, cl in enumerate(driver.clients):
            extra = cl.param_bytes() if protocol == "sfl" else 0
            ledger.peak_memory_bytes[c] = cl.param_bytes() + cl.activation_cache_bytes + extra
            if ledger.peak_memory_bytes[c] > driver.exp.devices[c].memory_bytes_budget:
                ledger.over_budget_clients.append(c)
    return RunResult(
        protocol, ledger, driver.timeline, [float(cross[i, i]) for i in range(n)], glob, cross,
        models, driver.sim.trace_hash(), list(qs),
    )


def run_flexp_sfl(exp: Experiment, seed: int, **kw) -> RunResult:
    d = FlexpSFL(exp, seed, **kw)
    d.run()
    return _finish(d, "flexp_sfl", exp.plan.q)


def run_sfl_baseline(exp: Experiment, seed: int, **kw) -> RunResult:
    d = SFLBaseline(exp, seed, **kw)
    d.run()
    return _finish(d, "sfl", [exp.plan.common_q] * d.n)


def run_fedavg_baseline(exp: Experiment, seed: int, **kw) -> RunResult:
    d = FedAvgBaseline(exp, seed, **kw)
    d.run()
    return _finish(d, "fedavg", [1.0] * d.n)


RUNNERS = {"flexp_sfl": run_flexp_sfl, "sfl": run_sfl_baseline, "fedavg": run_fedavg_baseline}


def run_protocol(exp: Experiment, seed: int, **kw) -> RunResult:
    return RUNNERS[exp.plan.protocol](exp, seed, **kw)
