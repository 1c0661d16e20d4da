"""Layered model: input projection, M homogeneous middle blocks, output head.

Layer indices used throughout the package: 0 is the input block (PL1),
1..M are the middle blocks, M+1 is the head (PL2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

from .engine import (
    BlockParams,
    OptimizerConfig,
    OptimizerState,
    Tape,
    backward_block,
    block_shapes,
    cross_entropy_loss,
    forward_block,
    optimizer_step,
)
from .errors import InputError

MIDDLE_KINDS = ("mlp_residual", "attention_mlp_residual")
INIT_STD = 0.02
DEFAULT_HEADER_BYTES = 32


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    hidden_dim: int = 32
    num_middle_blocks: int = 10
    num_classes: int = 8
    block_kind: str = "mlp_residual"
    seq_len: int | None = None

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_middle_blocks", "num_classes"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.block_kind not in MIDDLE_KINDS:
            raise InputError(f"block_kind must be one of {MIDDLE_KINDS}, got {self.block_kind!r}")
        if self.block_kind == "attention_mlp_residual" and not self.seq_len:
            raise InputError("attention_mlp_residual requires seq_len >= 1")
        if self.block_kind == "mlp_residual" and self.seq_len:
            raise InputError("seq_len is only meaningful for attention_mlp_residual")


@dataclass
class LayerStack:
    input_block: BlockParams
    middle_blocks: list[BlockParams]
    head_block: BlockParams

    @property
    def num_middle(self) -> int:
        return len(self.middle_blocks)

    def blocks(self) -> list[BlockParams]:
        return [self.input_block, *self.middle_blocks, self.head_block]

    def layer(self, index: int) -> BlockParams:
        return self.blocks()[index]

    def copy(self) -> "LayerStack":
        return LayerStack(
            self.input_block.copy(), [b.copy() for b in self.middle_blocks], self.head_block.copy()
        )


@dataclass(frozen=True)
class Partition:
    q: float
    num_middle: int
    cl_count: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "cl_count", partition(self.num_middle, self.q))

    @property
    def client_view(self) -> list[int]:
        return [0, *range(1, self.cl_count + 1), self.num_middle + 1]

    @property
    def server_view(self) -> list[int]:
        return list(range(self.cl_count + 1, self.num_middle + 1))


def partition(num_middle: int, q: float) -> int:
    """Number of middle blocks a client with ratio ``q`` keeps locally (round half up)."""
    if not 0.0 <= q <= 1.0:
        raise InputError(f"q must lie in [0, 1], got {q}")
    scaled = Decimal(repr(float(q))) * num_middle
    return int(scaled.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _init_block(kind: str, rng: np.random.Generator, shapes: dict, seq_len=None) -> BlockParams:
    params = {}
    for name, shape in shapes.items():
        if name.endswith("_g"):
            params[name] = np.ones(shape)
        elif name.startswith("w"):
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
        else:
            params[name] = np.zeros(shape)
    return BlockParams(kind, params, seq_len)


def build_model(config: ModelConfig, seed: int | Sequence[int]) -> LayerStack:
    """Deterministic initialization: N(0, 0.02) weights, zero biases, unit layernorm."""
    rng = np.random.default_rng(seed)
    d = config.hidden_dim
    inp = _init_block(
        "input_proj", rng,
        block_shapes("input_proj", d, in_dim=config.input_dim, seq_len=config.seq_len),
        config.seq_len,
    )
    mids = [
        _init_block(config.block_kind, rng, block_shapes(config.block_kind, d))
        for _ in range(config.num_middle_blocks)
    ]
    head = _init_block("output_head", rng, block_shapes("output_head", d, out_dim=config.num_classes))
    return LayerStack(inp, mids, head)


def param_count(blocks: LayerStack | Iterable[BlockParams], element_size: int = 4) -> tuple[int, int]:
    """(element count, bytes) of a stack or any collection of blocks."""
    if isinstance(blocks, LayerStack):
        blocks = blocks.blocks()
    count = sum(b.param_count() for b in blocks)
    return count, count * element_size


def view_blocks(stack: LayerStack, view: Iterable[int]) -> list[BlockParams]:
    all_blocks = stack.blocks()
    return [all_blocks[i] for i in view]


def mlp_block_param_count(d: int) -> int:
    return 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)


def payload_bytes(shape: Sequence[int], element_size: int = 4, header: int = DEFAULT_HEADER_BYTES) -> int:
    n = int(np.prod(shape)) if len(shape) else 0
    return n * element_size + header


# ---------------------------------------------------------------------------
# monolithic execution (reference path and local training)


def forward_chain(blocks: Sequence[BlockParams], x: np.ndarray, record: bool = True):
    """Forward through ``blocks``; returns (output, tapes) with tapes=None when not recording."""
    tapes = [] if record else None
    h = x
    for blk in blocks:
        tape = Tape() if record else None
        h = forward_block(blk, h, tape)
        if record:
            tapes.append(tape)
    return h, tapes


def backward_chain(tapes: Sequence[Tape], grad: np.ndarray):
    """Reverse through ``tapes``; returns (input grad, per-block param grads in forward order)."""
    grads = [None] * len(tapes)
    for i in range(len(tapes) - 1, -1, -1):
        grad, grads[i] = backward_block(tapes[i], grad)
    return grad, grads


def predict(blocks: Sequence[BlockParams], x: np.ndarray) -> np.ndarray:
    logits, _ = forward_chain(blocks, x, record=False)
    return logits


def accuracy(blocks: Sequence[BlockParams], x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise InputError("cannot evaluate on an empty test set")
    return float((predict(blocks, x).argmax(axis=1) == y).mean())


def train_step(
    blocks: list[BlockParams],
    states: list[OptimizerState],
    x: np.ndarray,
    y: np.ndarray,
    hyper: OptimizerConfig,
) -> tuple[float, list[BlockParams], list[OptimizerState]]:
    """One full-model gradient step; returns (loss, new blocks, new optimizer states)."""
    logits, tapes = forward_chain(blocks, x)
    loss, loss_tape = cross_entropy_loss(logits, y)
    g, _ = backward_block(loss_tape, np.asarray(1.0))
    _, grads = backward_chain(tapes, g)
    new_blocks, new_states = [], []
    for blk, st, gr in zip(blocks, states, grads):
        p, s = optimizer_step(blk.params, gr, st, hyper)
        new_blocks.append(blk.replace(p))
        new_states.append(s)
    return loss, new_blocks, new_states


def pretrain(
    stack: LayerStack,
    x: np.ndarray,
    y: np.ndarray,
    steps: int,
    batch_size: int,
    hyper: OptimizerConfig,
    seed: int | Sequence[int],
) -> tuple[LayerStack, list[float]]:
    """Brief pooled-data training so every participant starts from a shared base."""
    rng = np.random.default_rng(seed)
    blocks = stack.blocks()
    states = [OptimizerState() for _ in blocks]
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(y), size=batch_size)
        loss, blocks, states = train_step(blocks, states, x[idx], y[idx], hyper)
        losses.append(loss)
    return LayerStack(blocks[0], list(blocks[1:-1]), blocks[-1]), losses
