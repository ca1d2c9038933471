import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unsupface import dataio
from unsupface.pairminer import (
    FacePair,
    MiningConfig,
    MiningWarning,
    PairManifest,
    allocate,
    build_manifest,
    cross_genre_pairs,
    label_purity,
    make_pair,
    read_manifest,
    same_frame_pairs,
    similar_pairs,
    split_validation,
    write_manifest,
)
from unsupface.tracking import BBox, Detection, FaceTrack, TrackerConfig, run_tracker


def track(tid, n, video="v", prefix=None, start=0):
    prefix = prefix or f"t{tid}_"
    return FaceTrack(tid, video, [Detection(video, start + f, BBox(0, 0, 10, 10), f"{prefix}{f}")
                                  for f in range(n)])


class TestSimilar:
    def test_counts(self):
        assert len(similar_pairs(track(0, 2))) == 1
        assert len(similar_pairs(track(0, 5))) == 10
        assert similar_pairs(track(0, 1)) == []

    def test_cap_subsamples_within_track(self, rng):
        t = track(0, 21)
        out = similar_pairs(t, 50, rng)
        refs = {d.face_ref for d in t.members}
        assert len(out) == 50 and len({p.key for p in out}) == 50
        assert all(p.a in refs and p.b in refs and p.y == 1 for p in out)


class TestSameFrame:
    def faces(self, tids):
        return [(t, Detection("v", 3, BBox(10 * i, 0, 5, 5), f"f{i}")) for i, t in enumerate(tids)]

    def test_counts(self):
        assert len(same_frame_pairs(self.faces([0, 1]))) == 1
        assert len(same_frame_pairs(self.faces([0, 1, 2, 3]))) == 6
        assert same_frame_pairs(self.faces([0])) == []

    def test_same_track_excluded(self):
        out = same_frame_pairs(self.faces([0, 0, 1]))
        assert {p.key for p in out} == {("f0", "f2"), ("f1", "f2")}

    def test_mixed_frames_rejected(self):
        mixed = self.faces([0]) + [(1, Detection("v", 4, BBox(0, 0, 5, 5), "x"))]
        with pytest.raises(ValueError):
            same_frame_pairs(mixed)


class TestCrossGenre:
    def test_single(self, rng):
        (p,) = cross_genre_pairs({"A": ["a"], "B": ["b"]}, 1, rng)
        assert p.key == ("a", "b") and p.y == -1

    def test_25_of_100(self, rng):
        A = [f"a{i}" for i in range(10)]
        B = [f"b{i}" for i in range(10)]
        out = cross_genre_pairs({"A": A, "B": B}, 25, rng)
        assert len({p.key for p in out}) == 25
        assert all(p.a in A and p.b in B for p in out)

    def test_single_genre_warns(self, rng):
        with pytest.warns(MiningWarning):
            assert cross_genre_pairs({"A": ["a", "b"]}, 3, rng) == []

    def test_shortfall_returns_all_with_warning(self, rng):
        with pytest.warns(MiningWarning):
            out = cross_genre_pairs({"A": ["a", "b"], "B": ["c"]}, 5, rng)
        assert len(out) == 2

    def test_exclusion(self, rng):
        out = cross_genre_pairs({"A": ["a", "b"], "B": ["c", "d"]}, 3, rng, exclude={("a", "c")})
        assert ("a", "c") not in {p.key for p in out} and len(out) == 3

    def test_uniform_over_candidates(self):
        # 3 genres with unequal sizes; every cross pair equally likely
        fbg = {"A": ["a0", "a1"], "B": ["b0"], "C": ["c0", "c1", "c2"]}
        counts = Counter()
        r = np.random.default_rng(0)
        for _ in range(3000):
            counts.update(p.key for p in cross_genre_pairs(fbg, 1, r))
        assert len(counts) == 11
        expected = 3000 / 11
        sigma = np.sqrt(3000 * (1 / 11) * (10 / 11))
        assert all(abs(c - expected) < 5 * sigma for c in counts.values())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=12), st.integers(0, 600))
def test_allocate(lengths, target):
    caps = [(n, n * (n - 1) // 2) for n in lengths]
    q = allocate(caps, target)
    assert q.sum() == min(target, sum(c for _, c in caps))
    assert all(0 <= a <= c for a, (_, c) in zip(q, caps))


def crossing_tracks():
    script = {"video_id": "v", "frame_size": [200, 60], "entities": [
        {"name": "a", "box": [0, 10, 30, 30], "velocity": [4, 0], "visible": [[0, 19]]},
        {"name": "b", "box": [160, 10, 30, 30], "velocity": [-4, 0], "visible": [[0, 19]]}]}
    s = dataio.synth_detection_stream(script)
    return s, run_tracker(s.detections, TrackerConfig())


class TestBuildManifest:
    def test_crossing_script_targets(self):
        s, tracks = crossing_tracks()
        man = build_manifest(tracks, {"v": "g"}, MiningConfig(10, 10))
        c = man.counts
        assert c["similar"] == 10 and c["dissimilar"] == 10 and c["-1/same_frame"] == 10
        owner = {d.face_ref: t.track_id for t in tracks for d in t.members}
        frame = {d.face_ref: d.frame_index for d in s.detections}
        for p in man.pairs:
            if p.y == 1:
                assert owner[p.a] == owner[p.b]
            else:
                assert frame[p.a] == frame[p.b] and owner[p.a] != owner[p.b]

    def test_balance_with_cross_genre_fill(self):
        tracks = [track(i, 6, video=f"v{i}") for i in range(4)]
        genre = {"v0": "news", "v1": "news", "v2": "sport", "v3": "sport"}
        man = build_manifest(tracks, genre, MiningConfig(30, 30))
        c = man.counts
        assert c["similar"] == c["dissimilar"] == 30 and c["-1/cross_genre"] == 30
        vid = {d.face_ref: t.video_id for t in tracks for d in t.members}
        assert all(genre[vid[p.a]] != genre[vid[p.b]] for p in man.of_label(-1))

    def test_unreachable_targets_trim_with_warning(self):
        tracks = [track(0, 3, video="v0"), track(1, 3, video="v1")]
        with pytest.warns(MiningWarning):
            man = build_manifest(tracks, {"v0": "a", "v1": "b"}, MiningConfig(100, 100))
        assert man.counts["similar"] == man.counts["dissimilar"] == 6

    def test_deterministic_and_distinct(self, tmp_path):
        tracks = [track(i, 8, video=f"v{i}") for i in range(4)]
        genre = {f"v{i}": "ab"[i % 2] for i in range(4)}
        for k in range(2):
            write_manifest(tmp_path / f"m{k}.jsonl", build_manifest(tracks, genre, MiningConfig(40, 40, seed=3)))
        assert (tmp_path / "m0.jsonl").read_bytes() == (tmp_path / "m1.jsonl").read_bytes()
        back = read_manifest(tmp_path / "m0.jsonl")
        assert back.provenance["seed"] == 3 and len(back) == 80

    def test_no_tracks(self):
        with pytest.raises(ValueError):
            build_manifest([], {})

    def test_missing_genre(self):
        with pytest.raises(ValueError, match="genre map"):
            build_manifest([track(0, 5)], {}, MiningConfig(5, 5))


class TestSplit:
    def test_tiny(self):
        man = PairManifest([make_pair("a", "b", 1, "track"), make_pair("c", "d", 1, "track"),
                            make_pair("a", "c", -1, "same_frame"), make_pair("b", "d", -1, "same_frame")])
        train, val = split_validation(man, 1, seed=0)
        assert len(val) == 2 and {p.y for p in val.pairs} == {1, -1}
        assert not {p.key for p in train.pairs} & {p.key for p in val.pairs}

    def test_face_disjoint_and_deterministic(self):
        tracks = [track(i, 8, video=f"v{i}") for i in range(10)]
        genre = {f"v{i}": "ab"[i % 2] for i in range(10)}
        man = build_manifest(tracks, genre, MiningConfig(200, 200))
        train, val = split_validation(man, 20, seed=4)
        assert [len(val.of_label(y)) for y in (1, -1)] == [20, 20]
        vfaces = {f for p in val.of_label(1) for f in (p.a, p.b)}
        assert not vfaces & {f for p in train.pairs for f in (p.a, p.b)}
        again = split_validation(man, 20, seed=4)
        assert again[0].pairs == train.pairs and again[1].pairs == val.pairs

    def test_insufficient(self):
        with pytest.raises(ValueError):
            split_validation(PairManifest([make_pair("a", "b", 1, "track")]), 1)


def test_pair_validation():
    with pytest.raises(ValueError):
        FacePair("a", "a", 1, "track")
    with pytest.raises(ValueError):
        FacePair("a", "b", 1, "same_frame")
    with pytest.raises(ValueError):
        PairManifest([make_pair("a", "b", 1, "track"), make_pair("b", "a", 1, "track")])


def test_purity_on_synthetic_corpus():
    corpus = dataio.synth_video_corpus(np.random.default_rng(0), n_ids=12, n_genres=3,
                                       videos_per_genre=2, per_video=2, n_frames=30)
    tracks = run_tracker(corpus.stream.detections, TrackerConfig())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MiningWarning)
        man = build_manifest(tracks, corpus.genre_of, MiningConfig(300, 300))
    assert label_purity(man, corpus.identity_of) == (1.0, 1.0)
