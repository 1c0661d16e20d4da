"""Oracle suite behind ``flexp-sfl verify``.

Each check returns a :class:`CheckResult`; the suite is seed-pinned, so running
it twice gives the same numbers.
"""

from __future__ import annotations

import filecmp
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import engine
from .config import parse_config
from .data import FederationSpec, batch_indices, generate_federation
from .engine import BLOCK_KINDS, OptimizerConfig, OptimizerState, grad_check, kl_divergence, relative_error
from .experiment import run_experiment
from .model import ModelConfig, build_model, forward_chain, train_step
from .protocols import Experiment, RunPlan, run_protocol, shared_base
from .sim import DeviceProfile
from .wire import Message, Tag, decode_message, encode_message

GRAD_TOL = {"mlp_residual": 1e-4, "attention_mlp_residual": 1e-4, "input_proj": 1e-6, "output_head": 1e-6}
SPLIT_TOL = 1e-9
GOLDEN_ACT_UP = bytes.fromhex(
    "46505346" "01" "01" "01000000" "0000000000000000" "1000000000000000" "02" "02000000" "02000000"
    "0000803f" "00000040" "00004040" "00008040"
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} value={self.value:.3e}  tol {self.tolerance}  ({self.seconds:.1f}s)"


def gradcheck_worst(kind: str, seeds: int = 20) -> float:
    return max(grad_check(kind, s) for s in range(seeds))


def gradcheck_mutation() -> float:
    """Error the checker reports against a deliberately wrong GELU derivative."""
    real = engine.gelu_derivative
    engine.gelu_derivative = lambda x: 1.3 * engine.gelu_value(x) + 0.1
    try:
        return grad_check("mlp_residual", 0)
    finally:
        engine.gelu_derivative = real


def single_client_experiment(q: float, steps: int = 50, lam: float = 0.0, align_every=5,
                             optimizer: OptimizerConfig | None = None) -> Experiment:
    fed = FederationSpec(num_clients=1, samples_per_client=200)
    plan = RunPlan(target_steps=steps, q=[q], lam=lam, align_every=align_every, element_size=8,
                   optimizer=optimizer or OptimizerConfig())
    return Experiment(ModelConfig(), fed, [DeviceProfile()], plan)


def monolithic_reference(exp: Experiment, seed: int):
    """Plain full-model training of the composite on the batch sequence a client would draw."""
    fed = generate_federation(exp.federation, seed)
    blocks = shared_base(exp, fed, seed).blocks()
    states = [OptimizerState() for _ in blocks]
    shard = fed.shards[0]
    for step in range(exp.plan.target_steps):
        idx = batch_indices(seed, 0, step, shard.num_train, exp.plan.batch_size)
        _, blocks, states = train_step(blocks, states, shard.x_train[idx], shard.y_train[idx], exp.plan.optimizer)
    return blocks


def split_equivalence_gap(q: float, steps: int = 50, seed: int = 0) -> float:
    exp = single_client_experiment(q, steps)
    split = run_protocol(exp, seed, keep_trace=False).models[0]
    mono = monolithic_reference(exp, seed)
    gap = 0.0
    for a, b in zip(split, mono):
        for k in a.params:
            gap = max(gap, float(np.max(np.abs(a.params[k] - b.params[k]))))
    return gap


def alignment_fd_error(seed: int = 0, eps: float = 1e-2) -> tuple[float, float]:
    """(R at the aligned point, FD relative error of dR/dz_CL after an eps perturbation)."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_middle_blocks=4)
    stack = build_model(cfg, [seed, 1])
    cl = stack.middle_blocks[:2]
    x = rng.normal(size=(4, 32))
    z_pl1, _ = forward_chain([stack.input_block], x, record=False)
    z_hat, _ = forward_chain(cl, z_pl1, record=False)
    r0 = kl_divergence(z_hat, z_hat)[0]
    moved = [b.replace({k: v + eps * rng.normal(size=v.shape) for k, v in b.params.items()}) for b in cl]
    z_cl, _ = forward_chain(moved, z_pl1, record=False)
    _, grad, _ = kl_divergence(z_cl, z_hat)
    h = 1e-6
    num = np.zeros_like(z_cl)
    for idx in np.ndindex(z_cl.shape):
        zp, zm = z_cl.copy(), z_cl.copy()
        zp[idx] += h
        zm[idx] -= h
        num[idx] = (kl_divergence(zp, z_hat)[0] - kl_divergence(zm, z_hat)[0]) / (2 * h)
    return r0, relative_error(grad, num)


def wire_roundtrip_failures(count: int = 1000, seed: int = 2024) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(count):
        shape = tuple(int(s) for s in rng.integers(0, 6, size=int(rng.integers(0, 4))))
        m = Message(Tag(int(rng.integers(1, 9))), int(rng.integers(0, 2**32)), int(rng.integers(0, 2**63)),
                    rng.normal(size=shape), int(rng.choice([4, 8])))
        data = encode_message(m)
        if decode_message(data) != m or len(data) != m.byte_size:
            bad += 1
    golden = Message(Tag.ACT_UP, 1, 0, np.array([[1.0, 2.0], [3.0, 4.0]]))
    if encode_message(golden) != GOLDEN_ACT_UP:
        bad += 1
    return bad


def determinism_mismatches(seed: int = 0) -> int:
    cfg = parse_config({
        "federation": {"num_clients": 3, "samples_per_client": 80},
        "model": {"num_middle_blocks": 4},
        "plan": {"target_steps": 40, "lam": 0.25},
        "devices": {"fast": {}, "slow": {"fwd_seconds_per_block_per_sample": 1e-2, "dropout_prob": 0.2}},
    })
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp) / "a", Path(tmp) / "b"
        run_experiment(cfg, seed, a)
        run_experiment(cfg, seed, b)
        names = ["timeline.csv", "summary.csv", "crosseval.csv"]
        _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
        return len(mismatch) + len(errors)


def _timed(name: str, fn: Callable[[], float], ok: Callable[[float], bool], tol: str) -> CheckResult:
    t0 = time.perf_counter()
    value = float(fn())
    return CheckResult(name, bool(ok(value)), value, tol, time.perf_counter() - t0)


def run_all() -> list[CheckResult]:
    out = []
    for kind in BLOCK_KINDS:
        tol = GRAD_TOL[kind]
        out.append(_timed(f"gradcheck {kind}", lambda k=kind: gradcheck_worst(k), lambda v, t=tol: v < t,
                          f"< {tol:g}"))
    out.append(_timed("gradcheck catches a wrong backward", gradcheck_mutation, lambda v: v > 1e-2, "> 1e-2"))
    for q in (0.0, 0.1, 0.5, 1.0):
        out.append(_timed(f"split equivalence q={q}", lambda q=q: split_equivalence_gap(q),
                          lambda v: v <= SPLIT_TOL, f"<= {SPLIT_TOL:g}"))
    out.append(_timed("alignment R at aligned point", lambda: alignment_fd_error()[0], lambda v: v == 0.0, "== 0"))
    out.append(_timed("alignment gradient vs FD", lambda: alignment_fd_error()[1], lambda v: v < 1e-4, "< 1e-4"))
    out.append(_timed("wire round-trip failures", wire_roundtrip_failures, lambda v: v == 0, "== 0"))
    out.append(_timed("csv determinism mismatches", determinism_mismatches, lambda v: v == 0, "== 0"))
    return out
