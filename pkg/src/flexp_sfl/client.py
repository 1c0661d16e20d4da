"""Client half of the split exchange: private PL1, CL and PL2 plus a local shard."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Shard, batch_indices
from .engine import (
    BlockParams,
    OptimizerConfig,
    OptimizerState,
    Tape,
    backward_block,
    cross_entropy_loss,
    forward_block,
    optimizer_step,
)
from .errors import InputError, ProtocolError, TapeStateError
from .model import LayerStack, accuracy, backward_chain, forward_chain, partition
from .wire import Message, Tag


@dataclass
class StepContext:
    step_id: int
    labels: np.ndarray
    z_pl1: np.ndarray
    front_tapes: list[Tape]
    probed: bool
    loss: float | None = None
    head_done: bool = False


@dataclass
class ClientRuntime:
    """One client's state machine; at most one step in flight."""

    client_id: int
    q: float
    base: LayerStack
    hyper: OptimizerConfig
    shard: Shard | None = None
    lam: float = 0.0
    align_every: int | None = 5
    batch_size: int = 8
    element_size: int = 4
    seed: int = 0

    pl1: BlockParams = field(init=False)
    cl: list[BlockParams] = field(init=False)
    pl2: BlockParams = field(init=False)
    cl_count: int = field(init=False)
    steps_done: int = field(init=False, default=0)
    pending: StepContext | None = field(init=False, default=None)
    activation_cache_bytes: int = field(init=False, default=0)

    def __post_init__(self):
        self.cl_count = partition(self.base.num_middle, self.q)
        self.pl1 = self.base.input_block
        self.cl = list(self.base.middle_blocks[:self.cl_count])
        self.pl2 = self.base.head_block
        self.states = [OptimizerState() for _ in range(self.cl_count + 2)]

    # -- parameters --------------------------------------------------------

    def local_blocks(self) -> list[BlockParams]:
        """PL1, CL..., PL2 in forward order."""
        return [self.pl1, *self.cl, self.pl2]

    def set_local_blocks(self, blocks: list[BlockParams]) -> None:
        if len(blocks) != self.cl_count + 2:
            raise InputError(f"expected {self.cl_count + 2} blocks, got {len(blocks)}")
        self.pl1, *self.cl, self.pl2 = blocks
        self.cl = list(self.cl)

    def composite(self, server_sl: list[BlockParams]) -> list[BlockParams]:
        return [self.pl1, *self.cl, *server_sl, self.pl2]

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        if self.shard is None:
            raise InputError(f"client {self.client_id} has no data shard")
        idx = batch_indices(self.seed, self.client_id, self.steps_done, self.shard.num_train,
                            self.batch_size)
        return self.shard.x_train[idx], self.shard.y_train[idx]

    def will_probe(self, step_id: int) -> bool:
        return bool(self.align_every) and self.cl_count > 0 and step_id % self.align_every == 0

    # -- protocol ----------------------------------------------------------

    def client_forward(self, x: np.ndarray, labels: np.ndarray) -> list[Message]:
        if self.pending is not None:
            raise TapeStateError(f"client {self.client_id} already has step {self.pending.step_id} in flight")
        step_id = self.steps_done
        tape = Tape()
        z_pl1 = forward_block(self.pl1, x, tape)
        z_cl, cl_tapes = forward_chain(self.cl, z_pl1)
        probed = self.will_probe(step_id)
        self.pending = StepContext(step_id, np.asarray(labels), z_pl1, [tape, *cl_tapes], probed)
        if not self.activation_cache_bytes:
            self.activation_cache_bytes = _tape_bytes(self.pending.front_tapes, self.element_size)
        out = [Message(Tag.ACT_UP, self.client_id, step_id, z_cl, self.element_size)]
        if probed:
            out.append(Message(Tag.ALIGN_PROBE, self.client_id, step_id, z_pl1, self.element_size))
        return out

    def _check_step(self, msg: Message, tag: Tag) -> StepContext:
        if msg.tag != tag:
            raise ProtocolError(f"expected {tag.name}, got {msg.tag.name}")
        ctx = self.pending
        if ctx is None or msg.step_id != ctx.step_id or msg.client_id != self.client_id:
            want = None if ctx is None else (self.client_id, ctx.step_id)
            raise ProtocolError(f"frame for {(msg.client_id, msg.step_id)} does not match pending step {want}")
        return ctx

    def client_finalize_forward(self, msg: Message, labels: np.ndarray | None = None) -> tuple[float, Message]:
        ctx = self._check_step(msg, Tag.ACT_DOWN)
        if ctx.head_done:
            raise ProtocolError(f"step {ctx.step_id} already finalized")
        labels = ctx.labels if labels is None else np.asarray(labels)
        tape = Tape()
        logits = forward_block(self.pl2, msg.payload, tape)
        loss, loss_tape = cross_entropy_loss(logits, labels)
        g_logits, _ = backward_block(loss_tape, np.asarray(1.0))
        g_sl, grads = backward_block(tape, g_logits)
        i = self.cl_count + 1
        params, self.states[i] = optimizer_step(self.pl2.params, grads, self.states[i], self.hyper)
        self.pl2 = self.pl2.replace(params)
        ctx.loss, ctx.head_done = loss, True
        return loss, Message(Tag.GRAD_UP, self.client_id, ctx.step_id, g_sl, self.element_size)

    def client_apply_cut_gradient(self, msg: Message) -> float:
        """Backprop the returned cut gradient through CL and PL1; returns the step loss."""
        ctx = self._check_step(msg, Tag.GRAD_DOWN)
        if not ctx.head_done:
            raise ProtocolError(f"GRAD_DOWN for step {ctx.step_id} arrived before ACT_DOWN")
        _, grads = backward_chain(ctx.front_tapes, msg.payload)
        front = [self.pl1, *self.cl]
        for i, (blk, gr) in enumerate(zip(front, grads)):
            params, self.states[i] = optimizer_step(blk.params, gr, self.states[i], self.hyper)
            front[i] = blk.replace(params)
        self.pl1, self.cl = front[0], front[1:]
        self.pending = None
        self.steps_done += 1
        return ctx.loss

    def evaluate(self, server_sl: list[BlockParams], x: np.ndarray, y: np.ndarray) -> float:
        return accuracy(self.composite(server_sl), x, y)

    def param_bytes(self) -> int:
        return sum(b.param_count() for b in self.local_blocks()) * self.element_size


def _tape_bytes(tapes: list[Tape], element_size: int) -> int:
    """Bytes of every non-parameter value the tapes keep alive for backward."""
    total = 0
    for t in tapes:
        params = set(t.param_slots.values())
        total += sum(v.size for i, v in enumerate(t.values) if i not in params)
    return total * element_size
