import numpy as np
import pytest

from oracles import central_difference
from unsupface.metriclearn import (
    FineTuneConfig,
    ProjectionModel,
    fit_metric,
    init_projection,
    metric_gradients,
    projected_distance,
    training_loss,
)


def summed_loss(W, b, A, B, y, m=0.5):
    # direct restatement of the objective, independent of the module
    e = A - B
    d2 = np.einsum("ni,ij,nj->n", e, W.T @ W, e)
    return np.maximum(0.0, m - y * (b - d2)).sum()


def random_instance(rng, p=3, d=5, n=8):
    W = rng.normal(0, 0.6, (p, d))
    A, B = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    y = rng.choice([-1.0, 1.0], n)
    b = float(rng.uniform(0.5, 4.0))
    return W, b, A, B, y


def rel_err(a, b):
    return np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_finite_difference_agreement():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 120:
        W, b, A, B, y = random_instance(rng)
        e = A - B
        hinge = 0.5 - y * (b - ((e @ W.T) ** 2).sum(1))
        if np.min(np.abs(hinge)) < 1e-3:
            continue  # too close to a kink for a meaningful difference quotient
        dW, db, loss = metric_gradients(ProjectionModel(W, b), A, B, y)
        assert loss == pytest.approx(summed_loss(W, b, A, B, y), rel=1e-12)
        eps = 1e-6
        fd = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            def f(v, idx=idx):
                W2 = W.copy()
                W2[idx] = v
                return summed_loss(W2, b, A, B, y)
            fd[idx] = central_difference(f, W[idx], eps)
        fdb = central_difference(lambda v: summed_loss(W, v, A, B, y), b, eps)
        assert rel_err(dW, fd) < 1e-6
        assert rel_err(db, fdb) < 1e-6 or (db == 0 and abs(fdb) < 1e-8)
        checked += 1


def test_scalar_example():
    dW, db, _ = metric_gradients(ProjectionModel(np.array([[1.0]]), b=1.0), [[1.0]], [[0.0]], [1])
    assert dW[0, 0] == 2.0 and db == -1.0


def test_satisfied_pairs_give_zero_gradient():
    model = ProjectionModel(np.eye(2), b=1.0)
    dW, db, loss = metric_gradients(model, [[0, 0], [0, 0]], [[0.1, 0], [3, 0]], [1, -1])
    assert loss == 0 and db == 0 and not dW.any()


def test_quadratic_form_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        W = rng.normal(size=(4, 9))
        a, c = rng.normal(size=9), rng.normal(size=9)
        e = a - c
        expected = e @ W.T @ W @ e
        got = projected_distance(ProjectionModel(W), a, c)
        assert got == pytest.approx(expected, rel=1e-9)
        assert got == projected_distance(ProjectionModel(W), c, a) and got >= 0


def test_identity_reduction_and_homogeneity():
    rng = np.random.default_rng(2)
    a, c = rng.normal(size=(2, 6))
    plain = ((a - c) ** 2).sum()
    assert projected_distance(ProjectionModel(np.eye(6)), a, c) == pytest.approx(plain, rel=1e-12)
    assert projected_distance(ProjectionModel(2 * np.eye(6)), a, c) == pytest.approx(4 * plain)
    assert projected_distance(ProjectionModel(np.eye(6)), a, a) == 0


def test_dimension_checks():
    with pytest.raises(ValueError):
        init_projection(6, 5)
    with pytest.raises(ValueError):
        projected_distance(ProjectionModel(np.eye(3)), np.zeros(4), np.zeros(4))


def test_init_statistics_and_seed():
    cfg = FineTuneConfig()
    W = init_projection(64, 128, cfg, np.random.default_rng(0)).W
    assert abs(W.mean()) < 5 * cfg.init_sigma / np.sqrt(W.size)
    assert W.std() == pytest.approx(cfg.init_sigma, rel=0.05)
    m = init_projection(8, 8, cfg, np.random.default_rng(5))
    assert m.b == 1.0 and np.array_equal(m.W, init_projection(8, 8, cfg, np.random.default_rng(5)).W)
    tiny = init_projection(5, 5, FineTuneConfig(init_sigma=1e-12), np.random.default_rng(0))
    assert projected_distance(tiny, np.ones(5), np.zeros(5)) < 1e-20


def separable_problem(rng, n=400, d=8):
    centres = rng.normal(0, 3.0, (6, d))
    table, pairs = {}, []
    for i in range(n):
        ca, cb = rng.choice(6, 2, replace=False)
        table[f"a{i}"] = centres[ca] + rng.normal(0, 0.01, d)
        table[f"s{i}"] = centres[ca] + rng.normal(0, 0.01, d)
        table[f"d{i}"] = centres[cb] + rng.normal(0, 0.01, d)
        pairs += [(f"a{i}", f"s{i}", 1), (f"a{i}", f"d{i}", -1)]
    return table, pairs


def test_separable_fit_reaches_near_zero_loss():
    table, pairs = separable_problem(np.random.default_rng(3))
    cfg = FineTuneConfig(learning_rate=0.05, epochs=40, val_fraction=0.0, lr_decay_factor=1.05)
    model, hist = fit_metric(table, pairs, 4, cfg)
    assert training_loss(model, table, pairs) < 1e-3
    assert model.b > 0 and model.m == 0.5
    lrs = [r["lr"] for r in hist.epochs]
    assert lrs[1] == pytest.approx(lrs[0] / 1.05)


def test_fit_is_reproducible_and_decays_lr():
    table, pairs = separable_problem(np.random.default_rng(4), n=100)
    a, ha = fit_metric(table, pairs, 3, FineTuneConfig(epochs=3))
    b, _ = fit_metric(table, pairs, 3, FineTuneConfig(epochs=3))
    assert np.array_equal(a.W, b.W) and a.b == b.b
    assert ha.epochs[1]["lr"] == pytest.approx(0.01 / 1.2)


def test_missing_descriptor_and_nan():
    with pytest.raises(ValueError, match="missing"):
        fit_metric({"a": np.zeros(3)}, [("a", "b", 1)], 2)
    bad = {"a": np.full(3, np.nan), "b": np.zeros(3)}
    with pytest.raises(FloatingPointError):
        fit_metric(bad, [("a", "b", 1)], 2, FineTuneConfig(val_fraction=0.0))


def test_save_load(tmp_path):
    m = ProjectionModel(np.arange(6.0).reshape(2, 3), b=1.25)
    m.save(tmp_path / "w.npz")
    back = ProjectionModel.load(tmp_path / "w.npz")
    assert np.array_equal(back.W, m.W) and back.b == 1.25 and back.m == 0.5


def test_bias_stays_positive():
    # all-dissimilar pairs with tiny differences push b down on every step
    rng = np.random.default_rng(5)
    table = {i: rng.normal(0, 1e-3, 6) for i in range(40)}
    pairs = [(i, i + 1, -1) for i in range(0, 40, 2)]
    model, hist = fit_metric(table, pairs, 3, FineTuneConfig(learning_rate=0.1, epochs=5, val_fraction=0.0))
    assert model.b == pytest.approx(FineTuneConfig().min_bias)
    assert all(r["b"] > 0 for r in hist.epochs)
