import csv
import math

import numpy as np
import pytest

from flexp_sfl.data import (
    FederationSpec,
    batch_indices,
    export_csv,
    generate_federation,
    global_test_set,
    mean_prototype_displacement,
    rotation_matrix,
)
from flexp_sfl.errors import InputError
from flexp_sfl.model import ModelConfig, accuracy, build_model


def test_same_seed_same_shards():
    a = generate_federation(FederationSpec(), seed=5)
    b = generate_federation(FederationSpec(), seed=5)
    for s, t in zip(a.shards, b.shards):
        np.testing.assert_array_equal(s.x_train, t.x_train)
        np.testing.assert_array_equal(s.y_test, t.y_test)
    c = generate_federation(FederationSpec(), seed=6)
    assert not np.array_equal(a.shards[0].x_train, c.shards[0].x_train)


def test_homogeneous_limit():
    fed = generate_federation(FederationSpec(theta_max=0.0, label_skew_alpha=None), seed=0)
    for s in fed.shards:
        np.testing.assert_allclose(s.rotation, np.eye(32), atol=1e-12)
    assert mean_prototype_displacement(fed) == pytest.approx(0.0, abs=1e-12)


def test_rotation_is_orthogonal():
    basis, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(6, 6)))
    r = rotation_matrix(basis, 0.7)
    np.testing.assert_allclose(r @ r.T, np.eye(6), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_displacement_grows_with_theta():
    values = [mean_prototype_displacement(generate_federation(FederationSpec(theta_max=t), seed=1))
              for t in np.linspace(0, math.pi, 7)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_global_test_set():
    fed = generate_federation(FederationSpec(), seed=0)
    x, y, origin = global_test_set(fed.shards)
    assert len(y) == sum(len(s.y_test) for s in fed.shards) == len(x) == len(origin)
    assert set(origin.tolist()) == set(range(5))


def test_untrained_model_is_near_chance():
    fed = generate_federation(FederationSpec(samples_per_client=2000), seed=0)
    x, y, _ = global_test_set(fed.shards)
    accs = [accuracy(build_model(ModelConfig(), seed=s).blocks(), x, y) for s in range(5)]
    assert abs(np.mean(accs) - 1 / 8) < 0.06


def test_pooled_classes_balanced():
    fed = generate_federation(FederationSpec(num_clients=60, samples_per_client=200), seed=2)
    _, y, _ = global_test_set(fed.shards)
    x_tr, y_tr = fed.pooled_train()
    freq = np.bincount(np.concatenate([y, y_tr]), minlength=8) / (len(y) + len(y_tr))
    assert np.abs(freq - 1 / 8).max() < 0.04


def test_label_skew_concentrates_clients():
    fed = generate_federation(FederationSpec(label_skew_alpha=0.1, samples_per_client=400), seed=0)
    top = [np.bincount(s.y_train, minlength=8).max() / s.num_train for s in fed.shards]
    assert np.mean(top) > 0.5


def test_spec_validation():
    with pytest.raises(InputError):
        FederationSpec(num_clients=0)
    with pytest.raises(InputError):
        FederationSpec(train_fraction=1.0)
    with pytest.raises(InputError):
        FederationSpec(theta_max=4.0)


def test_batch_indices_deterministic():
    a = batch_indices(0, 1, 2, 100, 8)
    assert np.array_equal(a, batch_indices(0, 1, 2, 100, 8))
    assert not np.array_equal(a, batch_indices(0, 1, 3, 100, 8))
    assert len(set(a.tolist())) == 8


def test_export_csv(tmp_path):
    fed = generate_federation(FederationSpec(num_clients=2, input_dim=3, samples_per_client=10), seed=0)
    path = tmp_path / "shards.csv"
    export_csv(fed, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["client_id", "split", "label", "x_0", "x_1", "x_2"]
    assert len(rows) == 1 + 20
    first = fed.shards[0]
    assert [float(v) for v in rows[1][3:]] == first.x_train[0].tolist()
