"""Siamese max-margin training, validation and hard mining."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import dataio
from .encoder import to_tensor

log = logging.getLogger(__name__)

CENTER_VIEW = 4


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``state`` holds the last good parameters."""

    def __init__(self, iteration, state):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.state = state


@dataclass(frozen=True)
class LossConfig:
    bias: float = 1.0
    margin: float = 0.5

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.bias <= self.margin:
            raise ValueError("bias must exceed margin")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_pairs: int = 32
    weight_decay: float = 0.0005
    momentum: float = 0.0
    max_iterations: int = 2000
    val_every: int = 500
    early_stop_patience: int = 0  # validation checks without improvement; 0 disables
    hard_mining_epochs: float = 3.0  # epochs over the hard subset; 0 disables hard mining
    max_hard_iterations: int = 0  # cap on the post-mining phase; 0 means no cap
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_pairs < 1 or self.weight_decay < 0:
            raise ValueError("learning_rate and batch_pairs must be positive, weight_decay >= 0")
        if self.max_iterations < 0 or self.val_every < 1:
            raise ValueError("max_iterations must be >= 0 and val_every >= 1")


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)  # (iteration, batch loss)
    validations: list = field(default_factory=list)  # (iteration, accuracy)
    hard_mining: list = field(default_factory=list)  # dicts

    def rows(self):
        """``(iteration, loss, val_accuracy|None)`` rows for CSV export."""
        val = dict(self.validations)
        rows = [(it, loss, val.pop(it, None)) for it, loss in self.losses]
        rows.extend((it, None, acc) for it, acc in sorted(val.items()))
        return sorted(rows, key=lambda r: (r[0], r[1] is None))

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# loss algebra


def squared_distance(a, b):
    """Row-wise ``||a - b||^2`` for tensors or arrays."""
    d = a - b
    return (d * d).sum(-1)


def pair_distance(enc, x1, x2):
    """``D^2 = ||phi(x1) - phi(x2)||^2`` in inference mode."""
    from .encoder import embed

    return float(squared_distance(embed(enc, x1), embed(enc, x2)))


def pair_loss(d2, y, cfg: LossConfig = LossConfig()):
    """``max(0, m - y (b - D^2))``; works on scalars, arrays and tensors."""
    z = cfg.margin - y * (cfg.bias - d2)
    if isinstance(z, torch.Tensor):
        return torch.clamp(z, min=0.0)
    if np.ndim(z) == 0:
        return max(0.0, float(z))
    return np.maximum(0.0, z)


def batch_loss(enc, xa, xb, y, cfg: LossConfig):
    """Mean hinge loss over a pair batch, with both members in one forward pass."""
    out = enc(torch.cat([xa, xb]))
    n = xa.shape[0]
    d2 = squared_distance(out[:n], out[n:])
    return pair_loss(d2, y, cfg).mean(), d2


def verification_correct(d2, y, threshold):
    """Similar pairs must fall strictly below, dissimilar strictly above; ties are wrong."""
    d2 = np.asarray(d2, dtype=np.float64)
    y = np.asarray(y)
    return ((y == 1) & (d2 < threshold)) | ((y == -1) & (d2 > threshold))


# ---------------------------------------------------------------------------
# image access


class ImageBank:
    """Rescaled images keyed by face ref, ready for view cropping."""

    def __init__(self, loader, side, scale=dataio.DEFAULT_SCALE):
        self.loader = loader
        self.side = side
        self.scale = scale
        self._cache = {}

    def rescaled(self, ref):
        r = self._cache.get(ref)
        if r is None:
            r = dataio.rescale(self.loader(ref), self.side, self.scale)
            self._cache[ref] = r
        return r

    def view(self, ref, k):
        return dataio.crop_view(self.rescaled(ref), self.side, k)

    def batch(self, refs, views):
        return np.stack([self.view(r, k) for r, k in zip(refs, views)])


def pair_distances(enc, bank, pairs, batch_pairs=128):
    """Centre-view ``D^2`` for every ``(a, b, y)`` pair (inference mode)."""
    out = np.empty(len(pairs))
    was_training = enc.training
    enc.eval()
    with torch.no_grad():
        for s in range(0, len(pairs), batch_pairs):
            chunk = pairs[s : s + batch_pairs]
            xa = to_tensor(bank.batch([p[0] for p in chunk], [CENTER_VIEW] * len(chunk)), enc.dtype)
            xb = to_tensor(bank.batch([p[1] for p in chunk], [CENTER_VIEW] * len(chunk)), enc.dtype)
            out[s : s + len(chunk)] = squared_distance(enc(xa), enc(xb)).double().numpy()
    enc.train(was_training)
    return out


def validate(enc, bank, val_pairs, loss_cfg: LossConfig = LossConfig()):
    """Fraction of pairs on the correct side of the loss bias."""
    if not val_pairs:
        raise ValueError("empty validation set")
    d2 = pair_distances(enc, bank, val_pairs)
    y = np.array([p[2] for p in val_pairs])
    return float(verification_correct(d2, y, loss_cfg.bias).mean())


def hard_mine(enc, bank, pairs, loss_cfg: LossConfig = LossConfig()):
    """Pairs that still incur loss, and the retained fraction."""
    if not pairs:
        return [], 0.0
    d2 = pair_distances(enc, bank, pairs)
    y = np.array([p[2] for p in pairs])
    keep = pair_loss(d2, y, loss_cfg) > 0
    hard = [p for p, k in zip(pairs, keep) if k]
    return hard, len(hard) / len(pairs)


# ---------------------------------------------------------------------------
# training loop


def _sgd(enc, cfg: TrainConfig):
    return torch.optim.SGD(enc.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _run_phase(enc, bank, pairs, val_pairs, loss_cfg, cfg, rng, opt, history, n_iter, start,
               early_stop):
    best = (-1.0, None)
    stale = 0
    good_state = copy.deepcopy(enc.state_dict())
    it = start
    for it in range(start + 1, start + n_iter + 1):
        idx = rng.integers(len(pairs), size=cfg.batch_pairs)
        if cfg.augment:
            views = rng.integers(dataio.N_VIEWS, size=(2, cfg.batch_pairs))
        else:
            views = np.full((2, cfg.batch_pairs), CENTER_VIEW)
        batch = [pairs[i] for i in idx]
        xa = to_tensor(bank.batch([p[0] for p in batch], views[0]), enc.dtype)
        xb = to_tensor(bank.batch([p[1] for p in batch], views[1]), enc.dtype)
        y = torch.tensor([p[2] for p in batch], dtype=enc.dtype)
        enc.train()
        loss, _ = batch_loss(enc, xa, xb, y, loss_cfg)
        value = loss.item()
        if not math.isfinite(value):
            enc.load_state_dict(good_state)
            raise TrainingDiverged(it, good_state)
        opt.zero_grad()
        loss.backward()
        opt.step()
        enc.step += 1
        history.losses.append((it, value))
        if it % cfg.val_every == 0:
            good_state = copy.deepcopy(enc.state_dict())
            if val_pairs:
                acc = validate(enc, bank, val_pairs, loss_cfg)
                history.validations.append((it, acc))
                log.info("iter %d loss %.4f val_acc %.4f", it, value, acc)
                if acc > best[0]:
                    best, stale = (acc, it), 0
                else:
                    stale += 1
                if early_stop and stale >= early_stop:
                    log.info("validation saturated at iteration %d", it)
                    break
    return it


def train(enc, bank, pairs, val_pairs=(), loss_cfg: LossConfig = LossConfig(),
          cfg: TrainConfig = TrainConfig()):
    """Minibatch SGD on the max-margin pair loss, then optional hard mining.

    ``pairs`` and ``val_pairs`` are sequences of ``(ref_a, ref_b, y)``.
    Returns ``(enc, history)``; ``enc`` is updated in place.
    """
    if not pairs:
        raise ValueError("empty training manifest")
    train_keys = {frozenset(p[:2]) for p in pairs}
    if any(frozenset(p[:2]) in train_keys for p in val_pairs):
        raise ValueError("validation pairs overlap the training pairs")
    pairs = list(pairs)
    val_pairs = list(val_pairs)
    torch.manual_seed(cfg.seed)
    rng = dataio.derive_rng(cfg.seed, "train-batches")
    history = TrainHistory()
    opt = _sgd(enc, cfg)
    it = _run_phase(enc, bank, pairs, val_pairs, loss_cfg, cfg, rng, opt, history,
                    cfg.max_iterations, 0, cfg.early_stop_patience)
    if cfg.hard_mining_epochs > 0:
        hard, frac = hard_mine(enc, bank, pairs, loss_cfg)
        n_hard_iter = int(math.ceil(cfg.hard_mining_epochs * len(hard) / cfg.batch_pairs))
        if cfg.max_hard_iterations:
            n_hard_iter = min(n_hard_iter, cfg.max_hard_iterations)
        history.hard_mining.append(
            {"iteration": it, "n_pairs": len(pairs), "n_hard": len(hard), "fraction": frac,
             "iterations": n_hard_iter}
        )
        log.info("hard mining at %d: kept %d/%d (%.2f%%)", it, len(hard), len(pairs), 100 * frac)
        if hard and n_hard_iter:
            it = _run_phase(enc, bank, hard, val_pairs, loss_cfg, cfg, rng, opt, history,
                            n_hard_iter, it, 0)
    if val_pairs and (not history.validations or history.validations[-1][0] != it):
        history.validations.append((it, validate(enc, bank, val_pairs, loss_cfg)))
    enc.eval()
    return enc, history
