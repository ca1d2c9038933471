"""Low-rank linear metric learning on fixed descriptors.

A projection ``W`` (``p x d``) and a learned threshold ``b`` are fit with the
fixed-margin hinge ``max(0, m - y (b - ||W (phi_i - phi_j)||^2))``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ProjectionModel:
    W: np.ndarray
    b: float = 1.0
    m: float = 0.5

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] > self.W.shape[1]:
            raise ValueError(f"W must be p x d with p <= d, got {self.W.shape}")

    @property
    def p(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]

    def project(self, X):
        return np.asarray(X, dtype=np.float64) @ self.W.T

    def save(self, path):
        np.savez(path, W=self.W, header=np.array([self.p, self.d, self.m, self.b]))

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            p, d, m, b = z["header"]
            W = z["W"]
        if W.shape != (int(p), int(d)):
            raise ValueError(f"header {p}x{d} does not match W {W.shape}")
        return cls(W, float(b), float(m))


@dataclass(frozen=True)
class FineTuneConfig:
    init_sigma: float = 0.01
    learning_rate: float = 0.01
    lr_decay_factor: float = 1.2
    epochs: int = 20
    batch_pairs: int = 128
    val_fraction: float = 0.1
    early_stop_patience: int = 5
    margin: float = 0.5
    init_bias: float = 1.0
    min_bias: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if min(self.init_sigma, self.learning_rate, self.margin, self.min_bias) <= 0:
            raise ValueError("init_sigma, learning_rate, margin and min_bias must be positive")
        if self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must exceed 1")
        if self.epochs < 1 or self.batch_pairs < 1:
            raise ValueError("epochs and batch_pairs must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


def init_projection(p, d, cfg: FineTuneConfig = FineTuneConfig(), rng=None):
    if not 1 <= p <= d:
        raise ValueError(f"need 1 <= p <= d, got p={p} d={d}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return ProjectionModel(rng.normal(0.0, cfg.init_sigma, (p, d)), cfg.init_bias, cfg.margin)


def projected_distance(model, phi_i, phi_j):
    """``||W phi_i - W phi_j||^2``, row-wise for 2-D input."""
    phi_i = np.asarray(phi_i, dtype=np.float64)
    phi_j = np.asarray(phi_j, dtype=np.float64)
    if phi_i.shape[-1] != model.d or phi_j.shape[-1] != model.d:
        raise ValueError(f"descriptor length must be {model.d}")
    z = (phi_i - phi_j) @ model.W.T
    return (z * z).sum(-1)


def metric_gradients(model, phi_i, phi_j, y):
    """Summed hinge loss over a batch and its gradients ``(dW, db, loss)``."""
    phi_i = np.atleast_2d(np.asarray(phi_i, dtype=np.float64))
    phi_j = np.atleast_2d(np.asarray(phi_j, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if len(y) == 0:
        raise ValueError("empty batch")
    e = phi_i - phi_j
    z = e @ model.W.T
    d2 = (z * z).sum(1)
    hinge = model.m - y * (model.b - d2)
    active = hinge > 0
    ya = y[active]
    dW = 2.0 * (z[active] * ya[:, None]).T @ e[active]
    db = float(-ya.sum())
    return dW, db, float(np.maximum(hinge, 0.0).sum())  # NaN propagates


def _accuracy(model, A, B, y):
    d2 = projected_distance(model, A, B)
    return float((((y == 1) & (d2 < model.b)) | ((y == -1) & (d2 > model.b))).mean())


@dataclass
class FitHistory:
    epochs: list = field(default_factory=list)  # dicts per epoch


def fit_metric(table, pairs, p, cfg: FineTuneConfig = FineTuneConfig()):
    """Fit ``W`` and ``b`` by minibatch gradient descent.

    ``table`` maps a key to its descriptor (a dict, or an array indexed by
    integer keys); ``pairs`` is a sequence of ``(key_i, key_j, y)``. The
    learning rate is divided by ``lr_decay_factor`` after every epoch. When
    ``val_fraction`` is positive, that slice of pairs is held out and the model
    with the best held-in accuracy is returned.
    """
    if not pairs:
        raise ValueError("no pairs to fit")
    try:
        A = np.stack([np.asarray(table[a], dtype=np.float64) for a, _, _ in pairs])
        B = np.stack([np.asarray(table[b], dtype=np.float64) for _, b, _ in pairs])
    except (KeyError, IndexError) as exc:
        raise ValueError(f"pair member missing from descriptor table: {exc}") from exc
    Y = np.array([float(t[2]) for t in pairs])
    rng = np.random.default_rng(cfg.seed)
    model = init_projection(p, A.shape[1], cfg, rng)

    order = rng.permutation(len(Y))
    n_val = int(round(cfg.val_fraction * len(Y))) if len(Y) >= 20 else 0
    val, fit = order[:n_val], order[n_val:]
    best = None
    stale = 0
    history = FitHistory()
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        perm = fit[rng.permutation(len(fit))]
        total = 0.0
        for s in range(0, len(perm), cfg.batch_pairs):
            idx = perm[s : s + cfg.batch_pairs]
            dW, db, loss = metric_gradients(model, A[idx], B[idx], Y[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss in epoch {epoch}, batch at {s}")
            # plain SGD on the summed batch objective; b is kept positive
            model.W -= lr * dW
            model.b = max(model.b - lr * db, cfg.min_bias)
            total += loss
        row = {"epoch": epoch, "lr": lr, "loss": total / len(fit), "b": model.b}
        if n_val:
            row["val_accuracy"] = _accuracy(model, A[val], B[val], Y[val])
            if best is None or row["val_accuracy"] > best[0]:
                best = (row["val_accuracy"], model.W.copy(), model.b)
                stale = 0
            else:
                stale += 1
        history.epochs.append(row)
        log.debug("epoch %d loss %.5f b %.4f", epoch, row["loss"], model.b)
        lr /= cfg.lr_decay_factor
        if n_val and cfg.early_stop_patience and stale >= cfg.early_stop_patience:
            break
    if best is not None:
        model = ProjectionModel(best[1], best[2], cfg.margin)
    return model, history


def training_loss(model, table, pairs):
    """Mean hinge loss of ``model`` over ``pairs``."""
    A = np.stack([table[a] for a, _, _ in pairs])
    B = np.stack([table[b] for _, b, _ in pairs])
    Y = np.array([float(t[2]) for t in pairs])
    return metric_gradients(model, A, B, Y)[2] / len(Y)
