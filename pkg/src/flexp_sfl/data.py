"""Synthetic federated classification data with label and task heterogeneity.

Every client sees the same class prototypes through its own rotation (task
shift) and draws labels from its own Dirichlet-distributed class mix (label
skew).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError

DATA_STREAM = 0xDA
BATCH_STREAM = 0xBA
ANGLE_SPREAD = 0.75


@dataclass(frozen=True)
class FederationSpec:
    num_clients: int = 5
    input_dim: int = 32
    num_classes: int = 8
    samples_per_client: int = 400
    theta_max: float = math.pi / 2
    label_skew_alpha: float | None = 1.0
    noise_sigma: float = 0.3
    prototype_norm: float = 1.0
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise InputError("num_clients must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise InputError("train_fraction must lie in (0, 1)")
        if not 0.0 <= self.theta_max <= math.pi:
            raise InputError("theta_max must lie in [0, pi]")
        if self.label_skew_alpha is not None and self.label_skew_alpha <= 0:
            raise InputError("label_skew_alpha must be > 0 (or null for uniform labels)")
        if self.samples_per_client < 2:
            raise InputError("samples_per_client must be >= 2")


@dataclass
class Shard:
    client_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    rotation: np.ndarray

    @property
    def num_train(self) -> int:
        return len(self.y_train)


@dataclass
class Federation:
    spec: FederationSpec
    prototypes: np.ndarray
    shards: list[Shard]

    def pooled_train(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.concatenate([s.x_train for s in self.shards]),
                np.concatenate([s.y_train for s in self.shards]))


def rotation_matrix(basis: np.ndarray, angles) -> np.ndarray:
    """Rotate consecutive planes of ``basis``; plane k turns by ``angles[k]``.

    A scalar angle turns every plane by the same amount.
    """
    d = basis.shape[0]
    angles = np.broadcast_to(np.asarray(angles, dtype=np.float64), (d // 2,))
    block = np.eye(d)
    for k, a in enumerate(angles):
        i = 2 * k
        c, s = math.cos(a), math.sin(a)
        block[i, i], block[i, i + 1] = c, -s
        block[i + 1, i], block[i + 1, i + 1] = s, c
    return basis @ block @ basis.T


def generate_federation(spec: FederationSpec, seed: int | None = None) -> Federation:
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, DATA_STREAM])
    k, d = spec.num_classes, spec.input_dim
    protos = rng.normal(size=(k, d))
    protos *= spec.prototype_norm / np.linalg.norm(protos, axis=1, keepdims=True)

    n_train = int(spec.samples_per_client * spec.train_fraction)
    n_train = min(max(n_train, 1), spec.samples_per_client - 1)
    shards = []
    for n in range(spec.num_clients):
        crng = np.random.default_rng([seed, DATA_STREAM, n])
        basis, _ = np.linalg.qr(crng.normal(size=(d, d)))
        # Per-plane fractions are drawn before anything that depends on theta_max,
        # so one seed gives nested federations as theta_max grows. Spreading the
        # angles (rather than one shared angle, which folds back toward -I near
        # pi) keeps the mean overlap between clients falling; the 0.75 cap keeps
        # that fall steep enough to stay strictly monotone up to theta_max = pi.
        frac = crng.uniform(0.0, ANGLE_SPREAD, size=d // 2)
        rot = rotation_matrix(basis, spec.theta_max * frac)
        if spec.label_skew_alpha is None:
            mix = np.full(k, 1.0 / k)
        else:
            mix = crng.dirichlet(np.full(k, spec.label_skew_alpha))
        y = crng.choice(k, size=spec.samples_per_client, p=mix)
        x = protos[y] @ rot.T + crng.normal(scale=spec.noise_sigma, size=(spec.samples_per_client, d))
        shards.append(Shard(n, x[:n_train], y[:n_train], x[n_train:], y[n_train:], rot))
    return Federation(spec, protos, shards)


def global_test_set(shards: list[Shard]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pooled test set: (x, y, client-of-origin)."""
    x = np.concatenate([s.x_test for s in shards])
    y = np.concatenate([s.y_test for s in shards])
    origin = np.concatenate([np.full(len(s.y_test), s.client_id) for s in shards])
    return x, y, origin


def mean_prototype_displacement(fed: Federation) -> float:
    """Average distance between the rotated prototypes of every client pair."""
    rotated = [fed.prototypes @ s.rotation.T for s in fed.shards]
    dists = [
        np.linalg.norm(rotated[i] - rotated[j], axis=1).mean()
        for i in range(len(rotated)) for j in range(i + 1, len(rotated))
    ]
    return float(np.mean(dists)) if dists else 0.0


def batch_indices(seed: int, client_id: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Indices of the mini-batch a client uses for its ``step``-th update."""
    rng = np.random.default_rng([seed, BATCH_STREAM, client_id, step])
    return rng.choice(n, size=batch_size, replace=batch_size > n)


def export_csv(fed: Federation, path: str | Path) -> None:
    d = fed.spec.input_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id", "split", "label", *[f"x_{i}" for i in range(d)]])
        for s in fed.shards:
            for split, xs, ys in (("train", s.x_train, s.y_train), ("test", s.x_test, s.y_test)):
                for xi, yi in zip(xs, ys):
                    w.writerow([s.client_id, split, int(yi), *[repr(float(v)) for v in xi]])
