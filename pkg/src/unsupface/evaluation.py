"""Verification metrics and the k-fold, identity-exclusive protocol.

A pair is predicted *similar* when its distance is strictly below the
threshold. Ties at the threshold always count as errors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class ScoredPair:
    distance: float
    y: int
    fold: int = 0


def _arrays(scored):
    d = np.array([s.distance for s in scored], dtype=np.float64)
    y = np.array([s.y for s in scored], dtype=np.int64)
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite distance")
    return d, y


def roc_curve(scored):
    """ROC points ``(fpr, tpr, threshold)`` from a threshold sweep.

    Thresholds are every distinct distance followed by ``inf``; the first
    point is ``(0, 0)`` and the last ``(1, 1)``.
    """
    d, y = _arrays(scored)
    n_pos = int((y == 1).sum())
    n_neg = int((y == -1).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both similar and dissimilar pairs")
    order = np.argsort(d, kind="stable")
    d, y = d[order], y[order]
    uniq, start = np.unique(d, return_index=True)
    tp = np.concatenate([[0], np.cumsum(y == 1)])
    fp = np.concatenate([[0], np.cumsum(y == -1)])
    # predicted similar at threshold uniq[k] = everything before index start[k]
    idx = np.append(start, len(d))
    thresholds = np.append(uniq, np.inf)
    return [(fp[i] / n_neg, tp[i] / n_pos, float(t)) for i, t in zip(idx, thresholds)]


def auc(curve):
    """Trapezoidal area under ``(fpr, tpr, ...)`` points."""
    pts = np.array([c[:2] for c in curve], dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def eer(curve_or_scored):
    """Equal error rate, interpolated linearly between adjacent ROC points."""
    items = list(curve_or_scored)
    curve = roc_curve(items) if items and isinstance(items[0], ScoredPair) else items
    pts = np.array([c[:2] for c in curve], dtype=np.float64)
    fpr, fnr = pts[:, 0], 1.0 - pts[:, 1]
    g = fpr - fnr  # nondecreasing along the curve
    k = int(np.argmax(g >= 0))
    if g[k] == 0 or k == 0:
        return float(fpr[k])
    g0, g1 = g[k - 1], g[k]
    s = -g0 / (g1 - g0)
    return float(fpr[k - 1] + s * (fpr[k] - fpr[k - 1]))


def accuracy_at(scored, threshold):
    d, y = _arrays(scored)
    if len(d) == 0:
        raise ValueError("no pairs")
    correct = ((y == 1) & (d < threshold)) | ((y == -1) & (d > threshold))
    return float(correct.mean())


def candidate_thresholds(distances):
    """Midpoints between consecutive distinct distances plus one point beyond each end."""
    u = np.unique(np.asarray(distances, dtype=np.float64))
    return np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])


def best_threshold(scored):
    """Accuracy-maximising threshold; the lowest one on ties."""
    d, y = _arrays(scored)
    cands = candidate_thresholds(d)
    order = np.argsort(d, kind="stable")
    ds, ys = d[order], y[order]
    # similar pairs strictly below t are correct; dissimilar strictly above
    pos_below = np.searchsorted(ds[ys == 1], cands, side="left")
    neg_above = (ys == -1).sum() - np.searchsorted(ds[ys == -1], cands, side="right")
    acc = (pos_below + neg_above) / len(d)
    k = int(np.argmax(acc))
    return float(cands[k]), float(acc[k])


@dataclass
class FoldResult:
    fold: int
    threshold: float
    accuracy: float
    eer: float
    auc: float
    n_pairs: int
    roc: list = field(default_factory=list)


@dataclass
class EvalReport:
    name: str
    folds: list

    @property
    def mean_accuracy(self):
        return float(np.mean([f.accuracy for f in self.folds]))

    @property
    def mean_eer(self):
        return float(np.mean([f.eer for f in self.folds]))

    @property
    def mean_auc(self):
        return float(np.mean([f.auc for f in self.folds]))

    @property
    def std_accuracy(self):
        return float(np.std([f.accuracy for f in self.folds]))

    def summary(self):
        return {"name": self.name, "k": len(self.folds), "mean_accuracy": self.mean_accuracy,
                "std_accuracy": self.std_accuracy, "mean_eer": self.mean_eer,
                "mean_auc": self.mean_auc}

    def to_dict(self, with_roc=False):
        folds = []
        for f in self.folds:
            row = asdict(f)
            if not with_roc:
                row.pop("roc")
            folds.append(row)
        return {**self.summary(), "folds": folds}

    def roc_rows(self):
        return [(f.fold, fpr, tpr, thr) for f in self.folds for fpr, tpr, thr in f.roc]


def evaluate_fold(fold, train_scored, held_scored, selector=best_threshold):
    """Threshold from ``train_scored`` only, metrics on ``held_scored``."""
    t, _ = selector(train_scored)
    curve = roc_curve(held_scored)
    return FoldResult(fold, t, accuracy_at(held_scored, t), eer(curve), auc(curve),
                      len(held_scored), curve)


def _by_fold(scored, k):
    by_fold = {f: [] for f in range(k)}
    for s in scored:
        if s.fold not in by_fold:
            raise ValueError(f"fold id {s.fold} outside 0..{k - 1}")
        by_fold[s.fold].append(s)
    missing = [f for f, v in by_fold.items() if not v]
    if missing:
        raise ValueError(f"missing folds: {missing}")
    return by_fold


def kfold_eval(scored, k=10, name="", selector=best_threshold):
    """Per held-out fold: pick the threshold on the other folds, score the held-out one.

    ``selector`` receives the training-fold pairs only and returns
    ``(threshold, accuracy)``; tests pass an instrumented wrapper.
    """
    by_fold = _by_fold(list(scored), k)
    results = []
    for f in range(k):
        rest = [s for g in range(k) if g != f for s in by_fold[g]]
        results.append(evaluate_fold(f, rest, by_fold[f], selector))
    return EvalReport(name, results)


def kfold_refit_eval(pairs, k, fit, score, name="", selector=best_threshold):
    """k-fold protocol with a model refit on the training folds of every split.

    ``pairs`` carry a fold id in position 3. ``fit(train_pairs)`` returns a
    model; ``score(model, pairs)`` returns ``ScoredPair`` objects. Held-out
    pairs are never passed to ``fit`` or to ``selector``.
    """
    pairs = list(pairs)
    _by_fold([ScoredPair(0.0, int(p[2]), int(p[3])) for p in pairs], k)
    results = []
    for f in range(k):
        train = [p for p in pairs if p[3] != f]
        held = [p for p in pairs if p[3] == f]
        model = fit(train)
        results.append(evaluate_fold(f, score(model, train), score(model, held), selector))
    return EvalReport(name, results)


# ---------------------------------------------------------------------------
# identity-exclusive verification pairs


def identity_folds(labels, k, n_pos, n_neg, rng):
    """Split identities into ``k`` groups and sample pairs inside each group.

    Returns a list of ``(i, j, y, fold)`` over image indices; ``n_pos`` and
    ``n_neg`` pairs per fold, fewer if the group cannot supply them.
    """
    labels = np.asarray(labels)
    ids = rng.permutation(np.unique(labels))
    if len(ids) < 2 * k:
        raise ValueError(f"need at least {2 * k} identities for {k} folds")
    out = []
    for f, group in enumerate(np.array_split(ids, k)):
        members = {int(g): np.flatnonzero(labels == g) for g in group}
        pos = [(int(a), int(b)) for m in members.values()
               for ai, a in enumerate(m) for b in m[ai + 1:]]
        neg = [(int(a), int(b)) for gi, g in enumerate(group) for h in group[gi + 1:]
               for a in members[int(g)] for b in members[int(h)]]
        for cand, n, y in ((pos, n_pos, 1), (neg, n_neg, -1)):
            pick = rng.choice(len(cand), size=min(n, len(cand)), replace=False)
            out.extend((*cand[int(i)], y, f) for i in sorted(pick))
    return out


def score_pairs(desc, pairs):
    """``ScoredPair`` list from a descriptor matrix and ``(i, j, y, fold)`` pairs."""
    i = np.array([p[0] for p in pairs])
    j = np.array([p[1] for p in pairs])
    d2 = ((desc[i] - desc[j]) ** 2).sum(1)
    return [ScoredPair(float(d), int(p[2]), int(p[3])) for d, p in zip(d2, pairs)]
