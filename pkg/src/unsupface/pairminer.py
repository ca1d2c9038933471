"""Mine labelled face pairs from tracks without identity labels.

Faces of one track form similar pairs (y=+1). Faces of different tracks that
share a frame, and faces from videos of different genres, form dissimilar
pairs (y=-1).
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .records import config_hash

log = logging.getLogger(__name__)

SOURCES = ("track", "same_frame", "cross_genre")


class MiningWarning(UserWarning):
    pass


@dataclass(frozen=True, order=True)
class FacePair:
    a: str
    b: str
    y: int
    source: str

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError(f"pair of a face with itself: {self.a!r}")
        if self.y not in (1, -1):
            raise ValueError(f"label must be +1 or -1, got {self.y}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if (self.y == 1) != (self.source == "track"):
            raise ValueError(f"label {self.y} inconsistent with source {self.source!r}")

    @property
    def key(self):
        return (self.a, self.b) if self.a < self.b else (self.b, self.a)

    def to_record(self):
        return {"a": self.a, "b": self.b, "y": self.y, "source": self.source}

    @classmethod
    def from_record(cls, rec):
        return cls(str(rec["a"]), str(rec["b"]), int(rec["y"]), str(rec["source"]))

    def as_tuple(self):
        return (self.a, self.b, self.y)


def make_pair(a, b, y, source):
    """Pair with members in canonical (sorted) order."""
    return FacePair(*sorted((a, b)), y, source)


@dataclass
class PairManifest:
    pairs: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for p in self.pairs:
            if p.key in seen:
                raise ValueError(f"duplicate pair {p.key}")
            seen.add(p.key)

    def __len__(self):
        return len(self.pairs)

    @property
    def counts(self):
        c = {f"{y:+d}/{s}": 0 for y, s in ((1, "track"), (-1, "same_frame"), (-1, "cross_genre"))}
        for p in self.pairs:
            c[f"{p.y:+d}/{p.source}"] += 1
        c["similar"] = c["+1/track"]
        c["dissimilar"] = c["-1/same_frame"] + c["-1/cross_genre"]
        return c

    def tuples(self):
        return [p.as_tuple() for p in self.pairs]

    def of_label(self, y):
        return [p for p in self.pairs if p.y == y]


def _sample(items, n, rng):
    """Uniform subsample without replacement, preserving input order."""
    if n >= len(items):
        return list(items)
    idx = np.sort(rng.choice(len(items), size=n, replace=False))
    return [items[i] for i in idx]


def similar_pairs(track, cap=None, rng=None):
    """Within-track pairs, uniformly subsampled to at most ``cap``."""
    refs = [d.face_ref for d in track.members]
    if len(refs) < 2:
        return []
    allp = [make_pair(a, b, 1, "track") for a, b in combinations(refs, 2)]
    if cap is None or cap >= len(allp):
        return allp
    if rng is None:
        raise ValueError("subsampling needs an rng")
    return _sample(allp, int(cap), rng)


def same_frame_pairs(frame_faces):
    """Dissimilar pairs across distinct tracks among faces of one frame.

    ``frame_faces`` is a sequence of ``(track_id, Detection)`` sharing
    ``(video_id, frame_index)``.
    """
    frame_faces = list(frame_faces)
    keys = {(d.video_id, d.frame_index) for _, d in frame_faces}
    if len(keys) > 1:
        raise ValueError(f"faces from more than one frame: {sorted(keys)}")
    out = []
    for (ta, da), (tb, db) in combinations(frame_faces, 2):
        if ta != tb:
            out.append(make_pair(da.face_ref, db.face_ref, -1, "same_frame"))
    return out


def cross_genre_pairs(faces_by_genre, n, rng, exclude=()):
    """``n`` distinct pairs drawn uniformly over faces from two different genres.

    Pairs whose key is in ``exclude`` are not returned. When fewer candidates
    exist, all of them are returned with a warning.
    """
    genres = sorted(g for g, faces in faces_by_genre.items() if faces)
    if len(genres) < 2:
        warnings.warn("cross-genre pairing needs at least two genres", MiningWarning, stacklevel=2)
        return []
    faces = [sorted(faces_by_genre[g]) for g in genres]
    blocks = [(i, j) for i, j in combinations(range(len(genres)), 2)]
    sizes = np.array([len(faces[i]) * len(faces[j]) for i, j in blocks], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    exclude = set(exclude)

    def decode(k):
        bi = int(np.searchsorted(offsets, k, side="right")) - 1
        i, j = blocks[bi]
        r = int(k - offsets[bi])
        return make_pair(faces[i][r // len(faces[j])], faces[j][r % len(faces[j])], -1, "cross_genre")

    n = int(n)
    if n >= total - len(exclude):
        out = [p for p in (decode(k) for k in range(total)) if p.key not in exclude]
        if len(out) < n:
            warnings.warn(f"only {len(out)} cross-genre pairs available, {n} requested",
                          MiningWarning, stacklevel=2)
        return sorted(_sample(out, n, rng))
    out, picked = [], set()
    while len(out) < n:
        need = n - len(out)
        for k in rng.choice(total, size=min(total, need + len(exclude) + 8), replace=False):
            k = int(k)
            if k in picked:
                continue
            p = decode(k)
            if p.key in exclude:
                continue
            picked.add(k)
            out.append(p)
            if len(out) == n:
                break
    return sorted(out)


def allocate(capacities, target):
    """Integer quotas proportional to track length, capped by each capacity.

    ``capacities`` is a list of ``(length, max_pairs)``. Quotas sum to
    ``min(target, sum(max_pairs))``.
    """
    caps = np.array([c for _, c in capacities], dtype=np.int64)
    weights = np.array([l for l, _ in capacities], dtype=np.float64)
    target = int(min(target, caps.sum()))
    quota = np.zeros(len(caps), dtype=np.int64)
    open_ = caps > 0
    remaining = target
    while remaining > 0 and open_.any():
        w = np.where(open_, weights, 0.0)
        share = remaining * w / w.sum()
        room = caps - quota
        take = np.minimum(np.floor(share).astype(np.int64), room)
        if take.sum() == 0:
            # hand out single pairs by largest remainder, lowest index first on ties
            frac = np.where(open_ & (room > 0), share - np.floor(share), -1.0)
            for i in np.argsort(-frac, kind="stable")[:remaining]:
                if frac[i] < 0:
                    break
                take[i] = 1
        quota += take
        remaining = target - int(quota.sum())
        open_ = caps - quota > 0
    return quota


@dataclass(frozen=True)
class MiningConfig:
    n_similar: int = 4000
    n_dissimilar: int = 4000
    cap: int | None = None  # per-track similar cap; None = proportional allocation
    same_frame_fraction: float | None = None  # None = same-frame first, cross-genre fills
    seed: int = 0


def _frames(tracks):
    frames = defaultdict(list)
    for t in tracks:
        for d in t.members:
            frames[(d.video_id, d.frame_index)].append((t.track_id, d))
    return frames


def build_manifest(tracks, genre_map, cfg: MiningConfig = MiningConfig()):
    """Balanced similar/dissimilar manifest from finalised tracks.

    Same-frame pairs come only from faces that belong to surviving tracks.
    """
    tracks = sorted(tracks, key=lambda t: t.track_id)
    if not tracks:
        raise ValueError("no tracks to mine")
    rng = np.random.default_rng([cfg.seed, 1])

    if cfg.cap is None:
        caps = [(len(t), len(t) * (len(t) - 1) // 2) for t in tracks]
        quotas = allocate(caps, cfg.n_similar)
    else:
        quotas = [cfg.cap] * len(tracks)
    similar = []
    for t, q in zip(tracks, quotas):
        similar.extend(similar_pairs(t, int(q), rng))
    if len(similar) > cfg.n_similar:
        similar = _sample(similar, cfg.n_similar, rng)

    same = []
    frames = _frames(tracks)
    for key in sorted(frames):
        same.extend(same_frame_pairs(frames[key]))
    same = sorted({p.key: p for p in same}.values())
    if cfg.same_frame_fraction is None:
        n_same = min(len(same), cfg.n_dissimilar)
    else:
        n_same = min(len(same), int(round(cfg.same_frame_fraction * cfg.n_dissimilar)))
    same = _sample(same, n_same, rng)

    n_cross = cfg.n_dissimilar - len(same)
    cross = []
    if n_cross > 0:
        missing = sorted({t.video_id for t in tracks} - set(genre_map))
        if missing:
            raise ValueError(f"genre map lacks videos: {missing[:5]}")
        by_genre = defaultdict(list)
        for t in tracks:
            by_genre[genre_map[t.video_id]].extend(d.face_ref for d in t.members)
        cross = cross_genre_pairs(by_genre, n_cross, rng, exclude={p.key for p in same})

    dissimilar = same + cross
    if cfg.n_similar == cfg.n_dissimilar and len(similar) != len(dissimilar):
        n = min(len(similar), len(dissimilar))
        warnings.warn(f"targets not reachable; trimming both labels to {n} pairs",
                      MiningWarning, stacklevel=2)
        similar = _sample(similar, n, rng)
        dissimilar = _sample(sorted(dissimilar), n, rng)
    elif len(similar) < cfg.n_similar or len(dissimilar) < cfg.n_dissimilar:
        warnings.warn(f"mined {len(similar)}/{cfg.n_similar} similar and "
                      f"{len(dissimilar)}/{cfg.n_dissimilar} dissimilar pairs",
                      MiningWarning, stacklevel=2)
    pairs = sorted(similar) + sorted(dissimilar)
    prov = {"stage": "mine", "seed": cfg.seed, "config_hash": config_hash(cfg.__dict__),
            "n_tracks": len(tracks)}
    return PairManifest(pairs, prov)


def _components(pairs):
    parent = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for p in pairs:
        ra, rb = find(p.a), find(p.b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups = defaultdict(list)
    for p in pairs:
        groups[find(p.a)].append(p)
    return [groups[k] for k in sorted(groups)]


def split_validation(manifest, n_each, seed=0):
    """Carve ``n_each`` similar and dissimilar validation pairs.

    Validation similar pairs are taken track-by-track (connected components
    of the similar-pair graph), and every training pair touching one of their
    faces is dropped, so validation similar faces never appear in training.
    """
    sim = manifest.of_label(1)
    dis = manifest.of_label(-1)
    if len(sim) < n_each or len(dis) < n_each:
        raise ValueError(f"need {n_each} pairs of each label, have {len(sim)} similar "
                         f"and {len(dis)} dissimilar")
    rng = np.random.default_rng([seed, 2])
    comps = _components(sim)
    val_sim = []
    for ci in rng.permutation(len(comps)):
        comp = comps[ci]
        need = n_each - len(val_sim)
        if need <= 0:
            break
        val_sim.extend(_sample(comp, need, rng) if len(comp) > need else comp)
    val_faces = {f for p in val_sim for f in (p.a, p.b)}
    val_dis = _sample(dis, n_each, rng)
    val_keys = {p.key for p in val_sim + val_dis}
    train = [p for p in manifest.pairs
             if p.key not in val_keys and p.a not in val_faces and p.b not in val_faces]
    dropped = len(manifest) - len(train) - len(val_keys)
    if dropped:
        log.info("face-disjoint split dropped %d training pairs", dropped)
    prov = dict(manifest.provenance)
    return (PairManifest(train, {**prov, "split": "train"}),
            PairManifest(sorted(val_sim) + sorted(val_dis), {**prov, "split": "val"}))


def write_manifest(path, manifest):
    from .records import write_jsonl

    write_jsonl(path, (p.to_record() for p in manifest.pairs), header=manifest.provenance)


def read_manifest(path):
    from .records import iter_jsonl, read_header

    pairs = [FacePair.from_record(rec) for _, rec in iter_jsonl(path)]
    return PairManifest(pairs, read_header(path) or {})


def label_purity(manifest, identity_of):
    """Fractions of similar pairs sharing an identity and dissimilar pairs differing."""
    sim = manifest.of_label(1)
    dis = manifest.of_label(-1)
    ok_sim = sum(identity_of[p.a] == identity_of[p.b] for p in sim)
    ok_dis = sum(identity_of[p.a] != identity_of[p.b] for p in dis)
    return (ok_sim / len(sim) if sim else math.nan, ok_dis / len(dis) if dis else math.nan)
