"""Dense float64 kernel with a per-block reverse-mode tape.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Each block
forward records its primitives on a :class:`Tape`; ``backward_block`` replays
that tape in reverse exactly once. Keeping one tape per block is what lets a
model be cut anywhere: the client owns the tapes of its prefix, the server the
tapes of its suffix, and only the boundary gradient crosses the wire.

Parameter arrays are never mutated in place. Optimizer updates return new
arrays, so a tape recorded before an update keeps differentiating against the
weights it actually saw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, InputError, NumericError, TapeStateError

BLOCK_KINDS = ("mlp_residual", "attention_mlp_residual", "input_proj", "output_head")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tape:
    """Ordered record of primitive applications for a single forward pass."""

    __slots__ = ("values", "nodes", "consumed", "input_slot", "output_slot", "param_slots")

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.nodes: list[tuple[int, tuple[int, ...], Callable]] = []
        self.consumed = False
        self.input_slot: int | None = None
        self.output_slot: int | None = None
        self.param_slots: dict[str, int] = {}

    def leaf(self, value: np.ndarray) -> int:
        self.values.append(value)
        return len(self.values) - 1

    def push(self, value: np.ndarray, inputs: tuple[int, ...], backward: Callable) -> int:
        slot = self.leaf(value)
        self.nodes.append((slot, inputs, backward))
        return slot

    def __getitem__(self, slot: int) -> np.ndarray:
        return self.values[slot]

    @property
    def output(self) -> np.ndarray:
        return self.values[self.output_slot]

    def run_backward(self, output_grad: np.ndarray) -> list[np.ndarray | None]:
        if self.consumed:
            raise TapeStateError("tape already consumed by a previous backward pass")
        if self.output_slot is None:
            raise TapeStateError("tape has no recorded output")
        out = self.values[self.output_slot]
        output_grad = np.asarray(output_grad, dtype=np.float64)
        if output_grad.shape != out.shape:
            raise DimensionError(
                f"output_grad shape {output_grad.shape} does not match forward output {out.shape}"
            )
        self.consumed = True
        grads: list[np.ndarray | None] = [None] * len(self.values)
        grads[self.output_slot] = output_grad
        for slot, inputs, backward in reversed(self.nodes):
            g = grads[slot]
            if g is None:
                continue
            for i, gi in zip(inputs, backward(g)):
                if gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        return grads


# ---------------------------------------------------------------------------
# primitives


def _sum_to_last(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def linear(t: Tape, x: int, w: int, b: int | None = None) -> int:
    """``y = x @ W.T + b`` over the last axis; ``W`` is stored (out, in)."""
    xv, wv = t[x], t[w]
    y = xv @ wv.T
    if b is not None:
        y = y + t[b]

    def backward(g):
        gx = g @ wv
        gw = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, _sum_to_last(g)

    inputs = (x, w) if b is None else (x, w, b)
    return t.push(y, inputs, backward)


def layernorm(t: Tape, x: int, gamma: int, beta: int, eps: float = LN_EPS) -> int:
    xv, gv = t[x], t[gamma]
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gv + t[beta]

    def backward(g):
        dxhat = g * gv
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _sum_to_last(g * xhat), _sum_to_last(g)

    return t.push(y, (x, gamma, beta), backward)


def gelu_value(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * (x * x * x))))


def gelu_derivative(x: np.ndarray) -> np.ndarray:
    th = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def gelu(t: Tape, x: int) -> int:
    xv = t[x]

    def backward(g):
        return (g * gelu_derivative(xv),)

    return t.push(gelu_value(xv), (x,), backward)


def add(t: Tape, a: int, b: int) -> int:
    return t.push(t[a] + t[b], (a, b), lambda g: (g, g))


def reshape(t: Tape, x: int, shape: tuple[int, ...]) -> int:
    old = t[x].shape
    return t.push(t[x].reshape(shape), (x,), lambda g: (g.reshape(old),))


def mean_axis(t: Tape, x: int, axis: int) -> int:
    xv = t[x]
    n = xv.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, xv.shape).copy(),)

    return t.push(xv.mean(axis=axis), (x,), backward)


def self_attention(t: Tape, q: int, k: int, v: int) -> int:
    """Single-head scaled dot-product attention over (batch, seq, d)."""
    qv, kv, vv = t[q], t[k], t[v]
    scale = 1.0 / math.sqrt(qv.shape[-1])
    attn = softmax(qv @ kv.transpose(0, 2, 1) * scale, axis=-1)
    out = attn @ vv

    def backward(g):
        d_attn = g @ vv.transpose(0, 2, 1)
        gv = attn.transpose(0, 2, 1) @ g
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True)) * scale
        return d_scores @ kv, d_scores.transpose(0, 2, 1) @ qv, gv

    return t.push(out, (q, k, v), backward)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted)."""
    x = np.asarray(x, dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise InputError(f"axis {axis} invalid for shape {x.shape}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    s = x - x.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# blocks


@dataclass
class BlockParams:
    """Parameters of one block. ``seq_len`` is set only for sequence-producing input blocks."""

    kind: str
    params: dict[str, np.ndarray]
    seq_len: int | None = None

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "BlockParams":
        return BlockParams(self.kind, {k: v.copy() for k, v in self.params.items()}, self.seq_len)

    def replace(self, params: dict[str, np.ndarray]) -> "BlockParams":
        return BlockParams(self.kind, params, self.seq_len)


def block_shapes(
    kind: str,
    d: int,
    *,
    in_dim: int | None = None,
    out_dim: int | None = None,
    seq_len: int | None = None,
) -> dict[str, tuple[int, ...]]:
    """Parameter shapes for a block of ``kind`` at hidden width ``d``."""
    if kind == "mlp_residual":
        return {
            "ln_g": (d,), "ln_b": (d,),
            "w1": (4 * d, d), "b1": (4 * d,),
            "w2": (d, 4 * d), "b2": (d,),
        }
    if kind == "attention_mlp_residual":
        shapes = {
            "ln1_g": (d,), "ln1_b": (d,),
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        }
        shapes.update({
            "ln_g": (d,), "ln_b": (d,),
            "w1": (4 * d, d), "b1": (4 * d,),
            "w2": (d, 4 * d), "b2": (d,),
        })
        return shapes
    if kind == "input_proj":
        width = d * (seq_len or 1)
        return {"w": (width, in_dim), "b": (width,)}
    if kind == "output_head":
        return {"w": (out_dim, d), "b": (out_dim,)}
    raise InputError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")


def _check_input(block: BlockParams, x: np.ndarray) -> None:
    p = block.params
    if block.kind == "input_proj":
        want_ndim, width = 2, p["w"].shape[1]
    elif block.kind == "output_head":
        # pooled sequence input is accepted as well as batch x d
        want_ndim, width = (3 if x.ndim == 3 else 2), p["w"].shape[1]
    elif block.kind == "mlp_residual":
        want_ndim, width = 2, p["w1"].shape[1]
    else:
        want_ndim, width = 3, p["wq"].shape[1]
    if x.ndim != want_ndim:
        raise DimensionError(
            f"{block.kind}: expected {want_ndim}-d input, got shape {x.shape} (axis count)"
        )
    if x.shape[-1] != width:
        raise DimensionError(
            f"{block.kind}: axis {x.ndim - 1} has size {x.shape[-1]}, expected {width}"
        )


def _mlp_branch(t: Tape, x: int, s: dict[str, int]) -> int:
    h = layernorm(t, x, s["ln_g"], s["ln_b"])
    h = gelu(t, linear(t, h, s["w1"], s["b1"]))
    return add(t, x, linear(t, h, s["w2"], s["b2"]))


def forward_block(block: BlockParams, x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
    """Run one block forward, recording on ``tape`` (a fresh throwaway tape if None)."""
    if tape is None:
        tape = Tape()
    if tape.output_slot is not None:
        raise TapeStateError("tape already holds a block forward")
    x = np.asarray(x, dtype=np.float64)
    _check_input(block, x)
    tape.input_slot = tape.leaf(x)
    s = {name: tape.leaf(v) for name, v in block.params.items()}
    tape.param_slots = s
    xi = tape.input_slot
    kind = block.kind

    if kind == "input_proj":
        out = linear(tape, xi, s["w"], s["b"])
        if block.seq_len:
            out = reshape(tape, out, (x.shape[0], block.seq_len, -1))
    elif kind == "output_head":
        if x.ndim == 3:
            xi = mean_axis(tape, xi, axis=1)
        out = linear(tape, xi, s["w"], s["b"])
    elif kind == "mlp_residual":
        out = _mlp_branch(tape, xi, s)
    elif kind == "attention_mlp_residual":
        h = layernorm(tape, xi, s["ln1_g"], s["ln1_b"])
        att = self_attention(
            tape, linear(tape, h, s["wq"]), linear(tape, h, s["wk"]), linear(tape, h, s["wv"])
        )
        xi = add(tape, xi, linear(tape, att, s["wo"]))
        out = _mlp_branch(tape, xi, s)
    else:
        raise InputError(f"unknown block kind {kind!r}")
    tape.output_slot = out
    return tape[out]


def backward_block(tape: Tape, output_grad: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Consume ``tape``; return (input gradient, parameter gradients)."""
    grads = tape.run_backward(output_grad)
    x = tape.values[tape.input_slot]
    gx = grads[tape.input_slot]
    if gx is None:
        gx = np.zeros_like(x)
    pg = {}
    for name, slot in tape.param_slots.items():
        g = grads[slot]
        pg[name] = np.zeros_like(tape.values[slot]) if g is None else g
    return gx, pg


# ---------------------------------------------------------------------------
# losses


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, Tape]:
    """Mean negative log-likelihood of ``labels`` under softmax(logits).

    The returned tape has the logits as its input; ``backward_block(tape, 1.0)``
    yields d(loss)/d(logits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be batch x K, got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match batch axis 0 of {logits.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    n = logits.shape[0]
    lsm = log_softmax(logits, axis=1)
    loss = -lsm[np.arange(n), labels].mean()

    tape = Tape()
    tape.input_slot = tape.leaf(logits)

    def backward(g):
        d = np.exp(lsm)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    tape.output_slot = tape.push(np.asarray(loss), (tape.input_slot,), backward)
    return float(loss), tape


def kl_divergence(
    p_logits: np.ndarray, q_logits: np.ndarray, axis: int = -1
) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(softmax(p) || softmax(q)) along ``axis``, averaged over all other positions.

    Returns (value, d value / d p_logits, d value / d q_logits).
    """
    p_logits = np.asarray(p_logits, dtype=np.float64)
    q_logits = np.asarray(q_logits, dtype=np.float64)
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    lp = log_softmax(p_logits, axis)
    lq = log_softmax(q_logits, axis)
    p = np.exp(lp)
    row = (p * (lp - lq)).sum(axis=axis, keepdims=True)
    positions = p_logits.size // p_logits.shape[axis]
    value = float(row.sum() / positions)
    grad_p = p * ((lp - lq) - row) / positions
    grad_q = (np.exp(lq) - p) / positions
    return value, grad_p, grad_q


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise InputError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        self.betas = tuple(self.betas)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    hyper: OptimizerConfig,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Return updated (params, state); inputs are left untouched."""
    for name, g in grads.items():
        if name not in params:
            raise InputError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        # a finite sum proves every element finite; only fall back to the full scan otherwise
        if not math.isfinite(float(g.sum())) and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
    if hyper.kind == "sgd":
        new = {k: (p - hyper.lr * grads[k]) if k in grads else p for k, p in params.items()}
        return new, OptimizerState(state.step + 1, state.m, state.v)

    b1, b2 = hyper.betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new[k] = p
            if k in state.m:
                m_new[k], v_new[k] = state.m[k], state.v[k]
            continue
        m = b1 * state.m[k] + (1.0 - b1) * g if k in state.m else (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g) if k in state.v else (1.0 - b2) * (g * g)
        m_new[k], v_new[k] = m, v
        denom = np.sqrt(v)
        denom *= 1.0 / math.sqrt(c2)
        denom += hyper.eps
        new[k] = p - (hyper.lr / c1) * m / denom
    return new, OptimizerState(t, m_new, v_new)


# ---------------------------------------------------------------------------
# gradient checking


def random_block(kind: str, rng: np.random.Generator, *, d: int = 8, in_dim: int = 5,
                 out_dim: int = 4, seq_len: int | None = None, scale: float = 0.3) -> BlockParams:
    shapes = block_shapes(kind, d, in_dim=in_dim, out_dim=out_dim, seq_len=seq_len)
    params = {name: rng.normal(0.0, scale, size=shape) for name, shape in shapes.items()}
    for name in params:
        if name.endswith("_g"):
            params[name] = 1.0 + params[name]
    return BlockParams(kind, params, seq_len if kind == "input_proj" else None)


def _random_input(kind: str, rng: np.random.Generator, d: int, in_dim: int, batch: int, seq: int):
    if kind == "input_proj":
        return rng.normal(size=(batch, in_dim))
    if kind == "attention_mlp_residual":
        return rng.normal(size=(batch, seq, d))
    return rng.normal(size=(batch, d))


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def grad_check(block_kind: str, seed: int, *, h: float = 1e-4, d: int = 6, batch: int = 3,
               seq: int = 4) -> float:
    """Max relative error between ``backward_block`` and central differences."""
    rng = np.random.default_rng(seed)
    in_dim, out_dim = 5, 4
    block = random_block(block_kind, rng, d=d, in_dim=in_dim, out_dim=out_dim)
    x = _random_input(block_kind, rng, d, in_dim, batch, seq)
    out_shape = forward_block(block, x).shape
    r = rng.normal(size=out_shape)

    def loss(blk, xx):
        return float((forward_block(blk, xx) * r).sum())

    tape = Tape()
    forward_block(block, x, tape)
    gx, pg = backward_block(tape, r)

    worst = 0.0
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (loss(block, xp) - loss(block, xm)) / (2 * h)
    worst = max(worst, relative_error(gx, num))
    for name, p in block.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            pp, pm = p.copy(), p.copy()
            pp[idx] += h
            pm[idx] -= h
            up = loss(block.replace({**block.params, name: pp}), x)
            dn = loss(block.replace({**block.params, name: pm}), x)
            num[idx] = (up - dn) / (2 * h)
        worst = max(worst, relative_error(pg[name], num))
    return worst
