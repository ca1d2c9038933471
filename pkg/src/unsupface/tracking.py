"""Tracking-by-detection: turn a per-frame face detection stream into tracks.

Association is purely geometric. Each detection in a sampled frame joins the
active track whose most recent box overlaps it most (IoU strictly above
``min_overlap``); a track stays active while its last member is at most
``patience`` sampled frames behind. Tracks shorter than ``min_track_len`` are
dropped once finalised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import groupby

import numpy as np

from . import kernels


class StreamOrderError(ValueError):
    """Raised when a detection stream is not sorted by (video_id, frame_index)."""

    def __init__(self, index, prev, cur):
        self.index = index
        self.prev = (prev.video_id, prev.frame_index)
        self.cur = (cur.video_id, cur.frame_index)
        super().__init__(
            f"record {index} out of order: ({cur.video_id!r}, {cur.frame_index}) "
            f"follows ({prev.video_id!r}, {prev.frame_index})"
        )


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")

    @property
    def side(self):
        """Side of the enclosing square box."""
        return max(self.w, self.h)

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    video_id: str
    frame_index: int
    box: BBox
    face_ref: str

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"negative frame_index {self.frame_index}")
        if not self.face_ref:
            raise ValueError("empty face_ref")

    def to_record(self):
        return {
            "video_id": self.video_id,
            "frame_index": self.frame_index,
            "x": self.box.x,
            "y": self.box.y,
            "w": self.box.w,
            "h": self.box.h,
            "face_ref": self.face_ref,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            video_id=str(rec["video_id"]),
            frame_index=int(rec["frame_index"]),
            box=BBox(float(rec["x"]), float(rec["y"]), float(rec["w"]), float(rec["h"])),
            face_ref=str(rec["face_ref"]),
        )


@dataclass
class FaceTrack:
    track_id: int
    video_id: str
    members: list = field(default_factory=list)

    def __len__(self):
        return len(self.members)

    @property
    def last(self):
        return self.members[-1]

    def to_record(self):
        return {
            "track_id": self.track_id,
            "video_id": self.video_id,
            "members": [
                {k: v for k, v in d.to_record().items() if k != "video_id"} for d in self.members
            ],
        }

    @classmethod
    def from_record(cls, rec):
        vid = str(rec["video_id"])
        members = [Detection.from_record({"video_id": vid, **m}) for m in rec["members"]]
        return cls(int(rec["track_id"]), vid, members)


@dataclass(frozen=True)
class TrackerConfig:
    sample_stride: int = 10
    patience: int = 5
    min_track_len: int = 5
    min_overlap: float = 0.0

    def __post_init__(self):
        if self.sample_stride < 1:
            raise ValueError("sample_stride must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.min_track_len < 1:
            raise ValueError("min_track_len must be >= 1")
        if not 0.0 <= self.min_overlap < 1.0:
            raise ValueError("min_overlap must lie in [0, 1)")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes."""
    return float(kernels.iou_matrix(a.as_array(), b.as_array())[0, 0])


def associate(active_tracks, detections, cfg: TrackerConfig):
    """Assign one frame's detections to active tracks.

    Returns a list parallel to ``detections`` holding the chosen track id, or
    ``None`` where the detection should start a new track. Candidate
    (detection, track) edges are taken greedily by decreasing IoU, ties going
    to the lower track id and then the earlier detection, so no track gets two
    detections from one frame and a losing detection falls back to its next
    best track.
    """
    if not detections:
        return []
    frames = {(d.video_id, d.frame_index) for d in detections}
    if len(frames) != 1:
        raise ValueError(f"associate() needs detections from one frame, got {sorted(frames)}")
    (video_id, frame), = frames
    eligible = [
        t for t in active_tracks
        if t.video_id == video_id and 0 < frame - t.last.frame_index <= cfg.patience
    ]
    for t in active_tracks:
        if t.video_id == video_id and t.last.frame_index >= frame:
            raise ValueError(f"track {t.track_id} already has frame {t.last.frame_index} >= {frame}")
    result = [None] * len(detections)
    if not eligible:
        return result

    det_boxes = np.stack([d.box.as_array() for d in detections])
    trk_boxes = np.stack([t.last.box.as_array() for t in eligible])
    overlaps = kernels.iou_matrix(det_boxes, trk_boxes)
    di, ti = np.nonzero(overlaps > cfg.min_overlap)
    if di.size == 0:
        return result
    track_ids = np.array([t.track_id for t in eligible])
    order = np.lexsort((di, track_ids[ti], -overlaps[di, ti]))
    taken = set()
    for k in order:
        d, t = int(di[k]), int(ti[k])
        if result[d] is not None or t in taken:
            continue
        result[d] = int(track_ids[t])
        taken.add(t)
    return result


def check_sorted(stream):
    """Raise :class:`StreamOrderError` at the first out-of-order record."""
    prev = None
    for i, det in enumerate(stream):
        if prev is not None and (det.video_id, det.frame_index) < (prev.video_id, prev.frame_index):
            raise StreamOrderError(i, prev, det)
        prev = det


def run_tracker(stream, cfg: TrackerConfig = TrackerConfig()):
    """Track a sorted detection stream; returns finalised tracks ordered by id."""
    stream = list(stream)
    check_sorted(stream)
    finished = []
    next_id = 0
    for _, video_dets in groupby(stream, key=lambda d: d.video_id):
        active = []
        for frame, frame_dets in groupby(video_dets, key=lambda d: d.frame_index):
            frame_dets = list(frame_dets)
            still = []
            for t in active:
                (still if frame - t.last.frame_index <= cfg.patience else finished).append(t)
            active = still
            by_id = {t.track_id: t for t in active}
            for det, tid in zip(frame_dets, associate(active, frame_dets, cfg)):
                if tid is None:
                    trk = FaceTrack(next_id, det.video_id, [det])
                    next_id += 1
                    active.append(trk)
                else:
                    by_id[tid].members.append(det)
        finished.extend(active)
    return sorted(
        (t for t in finished if len(t) >= cfg.min_track_len), key=lambda t: t.track_id
    )


def _histogram(values, bin_width):
    if not values:
        return []
    hi = max(values)
    nbins = int(hi // bin_width) + 1
    counts = [0] * nbins
    for v in values:
        counts[int(v // bin_width)] += 1
    return [(i * bin_width, c) for i, c in enumerate(counts)]


def track_stats(tracks, length_bin=5, size_bin=10):
    """Track-length and face-size (square side) statistics.

    Histograms are lists of ``(bin_start, count)``.
    """
    lengths = [len(t) for t in tracks]
    sizes = [d.box.side for t in tracks for d in t.members]
    if not lengths:
        return {
            "n_tracks": 0,
            "n_faces": 0,
            "n_videos": 0,
            "mean_track_length": 0.0,
            "median_track_length": 0.0,
            "mean_face_size": 0.0,
            "median_face_size": 0.0,
            "track_length_histogram": [],
            "face_size_histogram": [],
        }
    return {
        "n_tracks": len(lengths),
        "n_faces": len(sizes),
        "n_videos": len({t.video_id for t in tracks}),
        "mean_track_length": float(np.mean(lengths)),
        "median_track_length": float(np.median(lengths)),
        "mean_face_size": float(np.mean(sizes)),
        "median_face_size": float(np.median(sizes)),
        "track_length_histogram": _histogram(lengths, length_bin),
        "face_size_histogram": _histogram(sizes, size_bin),
    }
