"""Server half of the split exchange: one global copy, per-client server-layer views."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .engine import BlockParams, OptimizerConfig, OptimizerState, Tape, kl_divergence, optimizer_step
from .errors import InputError, ProtocolError
from .model import LayerStack, backward_chain, forward_chain, partition
from .wire import PARAM_TAGS, Message, SessionKey, Tag


@dataclass
class Registration:
    client_id: int
    q: float
    cl_count: int
    lam: float = 0.0


class ServerRuntime:
    """Holds ``w`` and serves ACT_UP / GRAD_UP / ALIGN_PROBE frames one at a time.

    Only middle blocks with index >= cl_count(n) change while serving client n.
    PL1/PL2 copies are kept for completeness and never trained.
    """

    def __init__(self, stack: LayerStack, hyper: OptimizerConfig, element_size: int = 4):
        self.stack = stack.copy()
        self.hyper = hyper
        self.element_size = element_size
        self.opt_states = [OptimizerState() for _ in self.stack.middle_blocks]
        self.registry: dict[int, Registration] = {}
        self.tapes: dict[SessionKey, list[Tape]] = {}
        self._last_cut: dict[int, tuple[int, np.ndarray]] = {}
        self._pending_align: dict[int, np.ndarray] = {}
        self.frames_in: dict[Tag, int] = defaultdict(int)
        self.frames_out: dict[Tag, int] = defaultdict(int)
        self.bytes_in = 0
        self.bytes_out = 0
        self.updates = 0
        self.last_alignment: dict[int, float] = {}

    @property
    def num_middle(self) -> int:
        return self.stack.num_middle

    @property
    def middle(self) -> list[BlockParams]:
        return self.stack.middle_blocks

    def register_client(self, client_id: int, q: float, lam: float = 0.0) -> int:
        if client_id in self.registry:
            raise ProtocolError(f"client {client_id} already registered")
        if lam < 0:
            raise InputError(f"lambda must be >= 0, got {lam}")
        cl = partition(self.num_middle, q)
        self.registry[client_id] = Registration(client_id, q, cl, lam)
        return cl

    def sl_indices(self, client_id: int) -> list[int]:
        """Middle-block indices (0-based) this server trains on behalf of ``client_id``."""
        return list(range(self._reg(client_id).cl_count, self.num_middle))

    def snapshot_sl(self, client_id: int) -> list[BlockParams]:
        return [self.middle[j] for j in self.sl_indices(client_id)]

    def _reg(self, client_id: int) -> Registration:
        try:
            return self.registry[client_id]
        except KeyError:
            raise ProtocolError(f"unknown client {client_id}") from None

    def _count_in(self, msg: Message) -> None:
        if msg.tag in PARAM_TAGS:
            raise ProtocolError(f"{msg.tag.name} frames are not part of the aggregation-free exchange")
        self.frames_in[msg.tag] += 1
        self.bytes_in += msg.byte_size

    def _reply(self, tag: Tag, msg: Message, payload: np.ndarray) -> Message:
        out = Message(tag, msg.client_id, msg.step_id, payload, self.element_size)
        self.frames_out[tag] += 1
        self.bytes_out += out.byte_size
        return out

    def handle(self, msg: Message) -> Message:
        if msg.tag == Tag.ACT_UP:
            return self.handle_activation_up(msg)
        if msg.tag == Tag.GRAD_UP:
            return self.handle_gradient_up(msg)
        if msg.tag == Tag.ALIGN_PROBE:
            return self.handle_align_probe(msg)
        raise ProtocolError(f"server cannot handle {msg.tag.name}")

    def handle_activation_up(self, msg: Message) -> Message:
        reg = self._reg(msg.client_id)
        if msg.key in self.tapes:
            raise ProtocolError(f"duplicate session {tuple(msg.key)}")
        self._count_in(msg)
        z_cl = msg.payload
        out, tapes = forward_chain(self.middle[reg.cl_count:], z_cl)
        self.tapes[msg.key] = tapes
        self._last_cut[msg.client_id] = (msg.step_id, z_cl)
        return self._reply(Tag.ACT_DOWN, msg, out)

    def handle_gradient_up(self, msg: Message) -> Message:
        reg = self._reg(msg.client_id)
        tapes = self.tapes.pop(msg.key, None)
        if tapes is None:
            raise ProtocolError(f"no forward tape for session {tuple(msg.key)}")
        self._count_in(msg)
        g, grads = backward_chain(tapes, msg.payload)
        for offset, gr in enumerate(grads):
            j = reg.cl_count + offset
            params, self.opt_states[j] = optimizer_step(
                self.middle[j].params, gr, self.opt_states[j], self.hyper
            )
            self.middle[j] = self.middle[j].replace(params)
        if grads:
            self.updates += 1
        pending = self._pending_align.pop(msg.client_id, None)
        if pending is not None:
            g = g + pending
        return self._reply(Tag.GRAD_DOWN, msg, g)

    def alignment(self, client_id: int, z_pl1: np.ndarray, z_cl: np.ndarray):
        """R and dR/dz_CL; the server's CL copy is evaluated but never updated here."""
        reg = self._reg(client_id)
        z_hat, _ = forward_chain(self.middle[:reg.cl_count], z_pl1, record=False)
        value, grad_p, _ = kl_divergence(z_cl, z_hat, axis=-1)
        return value, grad_p

    def handle_align_probe(self, msg: Message, z_cl: np.ndarray | None = None) -> Message:
        reg = self._reg(msg.client_id)
        if reg.cl_count == 0:
            raise ProtocolError(f"client {msg.client_id} has no client layers to align")
        if z_cl is None:
            last = self._last_cut.get(msg.client_id)
            if last is None or last[0] != msg.step_id:
                raise ProtocolError(f"no cut activation cached for session {tuple(msg.key)}")
            z_cl = last[1]
        self._count_in(msg)
        value, grad = self.alignment(msg.client_id, msg.payload, z_cl)
        self.last_alignment[msg.client_id] = value
        if reg.lam != 0.0:
            prev = self._pending_align.get(msg.client_id)
            scaled = reg.lam * grad
            self._pending_align[msg.client_id] = scaled if prev is None else prev + scaled
        return self._reply(Tag.ALIGN_ACK, msg, np.array([value]))

    def has_pending_alignment(self, client_id: int) -> bool:
        return client_id in self._pending_align
