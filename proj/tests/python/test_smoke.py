"""Smoke tests of the python bindings against the C++ core."""

import json
import math

import numpy as np
import pytest

import m2m


def test_segment_aggregate_roundtrip():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(2, 1, 16, 16))
    for scale in (1, 2, 4):
        tiles = m2m.segment(u, scale)
        assert len(tiles) == scale * scale
        assert np.array_equal(m2m.aggregate(tiles, scale), u)


def test_segment_rejects_indivisible():
    with pytest.raises(Exception):
        m2m.segment(np.zeros((1, 1, 6, 6)), 4)


def test_resampling():
    patch = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    up = m2m.interpolate_up(patch, 4, 4, method="nearest")
    assert up[0, 0, 0, 1] == 1.0 and up[0, 0, 3, 3] == 4.0
    down = m2m.downsample(up, 2, 2, method="area")
    assert np.array_equal(down, patch)
    ramp = m2m.interpolate_up(np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 1, 2, 2), 4, 4)
    assert np.allclose(ramp[0, 0, 0], [0.0, 1 / 3, 2 / 3, 1.0])


def test_metrics():
    truth = np.ones((1, 2, 4, 4))
    assert m2m.relative_l2(truth, truth) == 0.0
    assert m2m.relative_l2(np.zeros_like(truth), truth) == pytest.approx(1.0)
    assert m2m.rmse(truth, 0.75 * truth) == pytest.approx(0.25)
    assert m2m.mae(truth, 0.75 * truth) == pytest.approx(0.25)
    assert m2m.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    assert m2m.load_entropy(np.full((1, 4), 0.25)) == pytest.approx(math.log(4))


def test_controller_worked_example():
    ctrl = m2m.PiController(lambda0=0.5)
    lam, e, p, integral = ctrl.step(0.5)
    assert e == pytest.approx(0.5)
    assert p == pytest.approx(0.001 / (1 + math.exp(0.5)), abs=1e-15)
    assert integral == pytest.approx(-0.0005, abs=1e-15)
    assert lam == 0.0


def test_poisson_solver_manufactured():
    n = 33
    x = np.arange(n) / (n - 1)
    xx, yy = np.meshgrid(x, x, indexing="xy")
    exact = np.sin(np.pi * yy) * np.sin(np.pi * xx)
    f = -2.0 * np.pi**2 * exact
    u = m2m.poisson_solve(f)
    assert np.max(np.abs(u - exact)) / np.max(np.abs(exact)) < 5e-3


MINI_CFG = {
    "dataset": {"kind": "poisson"},
    "model": {
        "scale": 2,
        "experts": [
            {"modes": 2, "hidden_channels": 3, "num_layers": 2},
            {"modes": 3, "hidden_channels": 3, "num_layers": 2},
        ],
        "router": {"embed_dim": 8, "num_heads": 2, "num_layers": 1, "pool_size": 4},
        "k": 2,
    },
    "training": {"epochs": 2, "batch_size": 2, "threads": 2},
}


def test_dataset_and_model_roundtrip(tmp_path):
    ds = m2m.generate_poisson_dataset(grid=16, n_samples=5, train_split=3, seed=3)
    assert ds.n_train == 3 and ds.n_test == 2
    x, y, meta = ds.sample("train", 0)
    assert x.shape == (1, 16, 16) and "mu" in meta

    model = m2m.build_model(json.dumps(MINI_CFG))
    pred = model.predict(x[None])
    assert pred.shape == (1, 1, 16, 16)
    probs = model.route(x[None])
    assert probs.shape == (4, 2)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    model.save(tmp_path / "ckpt")
    loaded = m2m.load_checkpoint(tmp_path / "ckpt")
    assert np.array_equal(loaded.predict(x[None]), pred)


def test_training_reduces_loss():
    rng = np.random.default_rng(4)
    train, test = [], []
    for i in range(6):
        u = rng.normal(size=(1, 8, 8))
        (train if i < 4 else test).append((u, 0.5 * u))
    ds = m2m.dataset_from_samples(train, test, kind="poisson")
    cfg = dict(MINI_CFG)
    cfg["training"] = {"epochs": 15, "batch_size": 2, "threads": 2}
    model, log_csv = m2m.train_from_config(json.dumps(cfg), ds)
    rows = log_csv.strip().splitlines()[1:]
    first = float(rows[0].split(",")[1])
    last = float(rows[-1].split(",")[1])
    assert last < first
