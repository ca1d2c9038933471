"""Image I/O, the ten-view augmentation and synthetic data generators.

Images are ``float32`` arrays of shape ``(H, W, C)`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, PngImagePlugin

from .tracking import BBox, Detection

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
DEFAULT_SCALE = 8.0 / 7.0
N_VIEWS = 10


def check_image(img):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    if min(img.shape[:2]) < 8:
        raise ValueError(f"image too small: {img.shape[:2]}")
    return img


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(path, img, meta=None):
    """8-bit PNG; ``meta`` entries become text chunks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    info = None
    if meta:
        info = PngImagePlugin.PngInfo()
        for k, v in meta.items():
            info.add_text(str(k), str(v))
    Image.fromarray(arr).save(path, format="PNG", pnginfo=info)


def to_gray(img):
    img = check_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0].astype(np.float32)
    return (img.astype(np.float32) @ LUMA).astype(np.float32)


def rescaled_size(h, w, target, scale=DEFAULT_SCALE):
    """Output size when the shorter side is scaled to ``round(scale * target)``."""
    short = int(round(target * scale))
    if h <= w:
        return short, int(round(w * short / h))
    return int(round(h * short / w)), short


def rescale(img, target, scale=DEFAULT_SCALE):
    """Bilinear, aspect-preserving rescale of the shorter side to ``scale * target``."""
    img = check_image(img)
    h, w = img.shape[:2]
    oh, ow = rescaled_size(h, w, target, scale)
    if (oh, ow) == (h, w):
        return img.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(oh, ow), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy().clip(0.0, 1.0)


def view_offsets(h, w, target):
    """Top-left offsets of the four corner crops and the centre crop."""
    if target > h or target > w:
        raise ValueError(f"target {target} larger than rescaled image {h}x{w}")
    dy, dx = h - target, w - target
    return [(0, 0), (0, dx), (dy, 0), (dy, dx), (dy // 2, dx // 2)]


def crop_view(rescaled, target, k):
    """View ``k`` in ``0..9`` of an already rescaled image; 5..9 mirror 0..4."""
    h, w = rescaled.shape[:2]
    oy, ox = view_offsets(h, w, target)[k % 5]
    crop = rescaled[oy : oy + target, ox : ox + target]
    if k >= 5:
        crop = crop[:, ::-1]
    return np.ascontiguousarray(crop)


def ten_views(img, target, scale=DEFAULT_SCALE):
    """Four corner crops, the centre crop, then the mirror of each: shape ``(10, t, t, C)``."""
    r = rescale(img, target, scale)
    return np.stack([crop_view(r, target, k) for k in range(N_VIEWS)])


def random_view(img, target, rng, scale=DEFAULT_SCALE):
    return crop_view(rescale(img, target, scale), target, int(rng.integers(N_VIEWS)))


# ---------------------------------------------------------------------------
# synthetic identities


@dataclass(frozen=True)
class Prototype:
    """Procedural face-like appearance shared by every image of one identity."""

    skin: tuple
    hair: tuple
    eye: tuple
    mouth: tuple
    mark: tuple
    face_w: float
    face_h: float
    eye_y: float
    eye_dx: float
    eye_r: float
    mouth_y: float
    mouth_w: float
    hair_h: float
    mark_xy: tuple
    mark_r: float

    def vector(self):
        return np.array(
            [*self.skin, *self.hair, *self.eye, *self.mouth, *self.mark,
             self.face_w * 3, self.face_h * 3, self.eye_y * 3, self.eye_dx * 4, self.eye_r * 8,
             self.mouth_y * 3, self.mouth_w * 3, self.hair_h * 3,
             self.mark_xy[0] * 2, self.mark_xy[1] * 2, self.mark_r * 6],
            dtype=np.float64,
        )


def random_prototype(rng):
    def color(lo=0.05, hi=0.95):
        return tuple(float(v) for v in rng.uniform(lo, hi, 3))

    return Prototype(
        skin=color(0.25, 0.95),
        hair=color(0.0, 0.8),
        eye=color(0.0, 1.0),
        mouth=color(0.1, 0.9),
        mark=color(0.0, 1.0),
        face_w=float(rng.uniform(0.26, 0.40)),
        face_h=float(rng.uniform(0.34, 0.46)),
        eye_y=float(rng.uniform(0.36, 0.48)),
        eye_dx=float(rng.uniform(0.09, 0.17)),
        eye_r=float(rng.uniform(0.035, 0.075)),
        mouth_y=float(rng.uniform(0.64, 0.76)),
        mouth_w=float(rng.uniform(0.08, 0.2)),
        hair_h=float(rng.uniform(0.08, 0.28)),
        mark_xy=(float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.45, 0.65))),
        mark_r=float(rng.uniform(0.03, 0.08)),
    )


def make_prototypes(n, rng, min_dist=1.0, max_tries=10000):
    """``n`` prototypes whose parameter vectors are at least ``min_dist`` apart."""
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {n} prototypes at distance {min_dist}")
        p = random_prototype(rng)
        v = p.vector()
        if all(np.linalg.norm(v - q.vector()) >= min_dist for q in out):
            out.append(p)
    return out


def _ellipse(yy, xx, cy, cx, ry, rx, side):
    # ~1.5 px soft edge
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    soft = 1.5 / (side * min(ry, rx))
    return np.clip((1.0 - d) / soft + 0.5, 0.0, 1.0)[..., None]


def render_face(proto: Prototype, side, rng=None, shift=(0.0, 0.0), brightness=1.0, noise=0.0,
                background=(0.5, 0.5, 0.5), zoom=1.0, color_gain=(1.0, 1.0, 1.0), clutter=()):
    """Render ``proto`` into a ``side x side`` RGB image.

    ``shift`` is a fractional (dy, dx) translation of the face, ``zoom`` its
    scale, ``brightness`` a global gain, ``color_gain`` a per-channel cast and
    ``noise`` the std of additive Gaussian pixel noise. ``clutter`` is a list of
    ``(cy, cx, r, color)`` background blobs painted behind the face.
    """
    ys = ((np.arange(side, dtype=np.float64) + 0.5) / side - 0.5 - shift[0]) / zoom + 0.5
    xs = ((np.arange(side, dtype=np.float64) + 0.5) / side - 0.5 - shift[1]) / zoom + 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    img = np.empty((side, side, 3), dtype=np.float64)
    img[:] = background
    p = proto

    def paint(mask, col):
        img[:] = img * (1 - mask) + mask * np.asarray(col)

    for cy, cx, r, col in clutter:
        paint(_ellipse(yy, xx, cy, cx, r, r, side), col)
    paint(_ellipse(yy, xx, 0.52, 0.5, p.face_h, p.face_w, side), p.skin)
    top = 0.52 - p.face_h
    paint(_ellipse(yy, xx, top + p.hair_h * 0.5, 0.5, p.hair_h, p.face_w * 1.05, side), p.hair)
    for sx in (-1, 1):
        paint(_ellipse(yy, xx, p.eye_y, 0.5 + sx * p.eye_dx, p.eye_r, p.eye_r * 1.3, side), p.eye)
    paint(_ellipse(yy, xx, p.mouth_y, 0.5, 0.025, p.mouth_w, side), p.mouth)
    paint(_ellipse(yy, xx, p.mark_xy[1], p.mark_xy[0], p.mark_r, p.mark_r, side), p.mark)
    img *= brightness * np.asarray(color_gain)
    if noise > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class Jitter:
    """Per-image nuisance. Shift and zoom are fractions of the image side.

    Colour cast, background and clutter keep raw pixel similarity from being
    a good identity cue, so a random-weight network stays well below a
    trained one.
    """

    max_shift: float = 0.10
    brightness: float = 0.20
    noise: float = 0.03
    zoom: float = 0.10
    color_cast: float = 0.50
    background: float = 0.50
    clutter: int = 12


def render_jittered(proto, side, rng, jitter=Jitter()):
    shift = tuple(rng.uniform(-jitter.max_shift, jitter.max_shift, 2))
    gain = 1.0 + rng.uniform(-jitter.brightness, jitter.brightness)
    zoom = 1.0 + rng.uniform(-jitter.zoom, jitter.zoom)
    cast = tuple(1.0 + rng.uniform(-jitter.color_cast, jitter.color_cast, 3))
    bg = tuple(np.clip(0.5 + rng.uniform(-jitter.background, jitter.background, 3), 0, 1))
    clutter = [
        (float(rng.uniform(0, 1)), float(rng.choice([rng.uniform(-0.1, 0.2), rng.uniform(0.8, 1.1)])),
         float(rng.uniform(0.05, 0.2)), tuple(rng.uniform(0, 1, 3)))
        for _ in range(jitter.clutter)
    ]
    return render_face(proto, side, rng, shift=shift, brightness=gain, noise=jitter.noise,
                       background=bg, zoom=zoom, color_gain=cast, clutter=clutter)


@dataclass
class IdentityDataset:
    images: np.ndarray  # (N, side, side, 3)
    labels: np.ndarray  # (N,) identity index
    prototypes: list

    def __len__(self):
        return len(self.labels)

    def write(self, root, prefix="", header=None):
        """Write ``{id}/{index}.png`` plus ``labels.csv``; returns the face refs."""
        from .records import dumps

        root = Path(root)
        meta = {"provenance": dumps(header)} if header is not None else None
        refs = []
        counts = {}
        for img, lab in zip(self.images, self.labels):
            k = counts.get(int(lab), 0)
            counts[int(lab)] = k + 1
            ref = f"{prefix}id{int(lab):04d}/{k:04d}.png"
            save_image(root / ref, img, meta)
            refs.append(ref)
        lines = [] if header is None else ["# provenance: " + dumps(header)]
        lines += ["face_ref,identity"] + [f"{r},{int(l)}" for r, l in zip(refs, self.labels)]
        (root / f"{prefix}labels.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        return refs


def synth_identity_dataset(n_ids, imgs_per_id, side, rng, jitter=Jitter(), prototypes=None):
    """Labelled images of ``n_ids`` procedural identities with per-image jitter."""
    if n_ids < 2:
        raise ValueError("need at least 2 identities")
    protos = prototypes if prototypes is not None else make_prototypes(n_ids, rng)
    images = np.empty((n_ids * imgs_per_id, side, side, 3), dtype=np.float32)
    labels = np.repeat(np.arange(n_ids), imgs_per_id)
    for i, lab in enumerate(labels):
        images[i] = render_jittered(protos[lab], side, rng, jitter)
    return IdentityDataset(images, labels, list(protos))


# ---------------------------------------------------------------------------
# scripted detection streams


class ScriptError(ValueError):
    pass


@dataclass
class SyntheticStream:
    detections: list
    entity_of: dict  # face_ref -> entity name
    segment_of: dict  # face_ref -> (entity name, visible-interval index)

    @property
    def n_entities(self):
        return len(set(self.entity_of.values()))

    @property
    def n_segments(self):
        return len(set(self.segment_of.values()))


def _entity_box(ent, frame):
    x, y, w, h = ent["box"]
    vx, vy = ent.get("velocity", (0.0, 0.0))
    dt = frame - ent["visible"][0][0]
    return BBox(float(x + vx * dt), float(y + vy * dt), float(w), float(h))


def synth_detection_stream(script):
    """Expand a declarative scenario into a sorted detection stream.

    ``script`` is a mapping (or list of mappings, one per video)::

        {"video_id": "v0", "frame_size": [W, H],
         "entities": [{"name": "a", "box": [x, y, w, h], "velocity": [vx, vy],
                       "visible": [[first, last], ...]}]}

    Frame ranges are inclusive and in sampled-frame units. Within a frame,
    detections follow entity order.
    """
    videos = script if isinstance(script, (list, tuple)) else [script]
    dets, entity_of, segment_of = [], {}, {}
    for vi, video in enumerate(sorted(videos, key=lambda v: str(v.get("video_id", "")))):
        try:
            vid = str(video["video_id"])
            fw, fh = video["frame_size"]
            entities = video["entities"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ScriptError(f"video {vi}: missing or malformed field ({exc})") from exc
        rows = []
        names = set()
        for ei, ent in enumerate(entities):
            name = ent.get("name", f"e{ei}")
            if name in names:
                raise ScriptError(f"video {vid}: duplicate entity name {name!r}")
            names.add(name)
            if "box" not in ent or len(ent["box"]) != 4 or not ent.get("visible"):
                raise ScriptError(f"video {vid}, entity {name!r}: needs 'box' [x,y,w,h] and 'visible'")
            prev_last = -1
            for si, (a, b) in enumerate(ent["visible"]):
                if a > b or a <= prev_last:
                    raise ScriptError(f"video {vid}, entity {name!r}: bad interval [{a}, {b}]")
                prev_last = b
                for f in range(a, b + 1):
                    box = _entity_box(ent, f)
                    if box.x < 0 or box.y < 0 or box.x + box.w > fw or box.y + box.h > fh:
                        raise ScriptError(
                            f"video {vid}, entity {name!r}: box {box} leaves the frame at {f}"
                        )
                    ref = f"{vid}/{f:05d}_{name}"
                    rows.append((f, ei, Detection(vid, f, box, ref)))
                    entity_of[ref] = f"{vid}:{name}"
                    segment_of[ref] = (f"{vid}:{name}", si)
        rows.sort(key=lambda r: (r[0], r[1]))
        dets.extend(r[2] for r in rows)
    return SyntheticStream(dets, entity_of, segment_of)


def random_script(rng, video_id, n_frames, n_entities, frame_size=(640, 360), crossing=False,
                  max_gap=8, size_range=(30, 90)):
    """A random scenario for oracle tests; entities may overlap when ``crossing``."""
    fw, fh = frame_size
    entities = []
    lane_w = fw / max(n_entities, 1)
    for e in range(n_entities):
        side = float(rng.integers(size_range[0], size_range[1] + 1))
        intervals = []
        f = int(rng.integers(0, max(1, n_frames // 4)))
        while f < n_frames:
            length = int(rng.integers(1, max(2, n_frames // 3)))
            last = min(n_frames - 1, f + length - 1)
            intervals.append([f, last])
            f = last + 1 + int(rng.integers(1, max_gap + 1))
        if crossing:
            start = intervals[0][0]
            span = max(1, n_frames - start)
            x0 = float(rng.uniform(0, fw - side))
            x1 = float(rng.uniform(0, fw - side))
            y0 = float(rng.uniform(0, fh - side))
            y1 = float(rng.uniform(0, fh - side))
            vel = ((x1 - x0) / span, (y1 - y0) / span)
        else:
            lo = e * lane_w
            side = min(side, lane_w * 0.5)
            x0 = float(rng.uniform(lo, lo + lane_w * 0.5 - side * 0.5))
            y0 = float(rng.uniform(0, fh - side))
            vel = (0.0, 0.0)
        entities.append({"name": f"e{e}", "box": [x0, y0, side, side], "velocity": list(vel),
                         "visible": intervals})
    return {"video_id": video_id, "frame_size": [fw, fh], "entities": entities}


# ---------------------------------------------------------------------------
# synthetic video corpus (stream + rendered faces + genres + withheld identities)


@dataclass
class VideoCorpus:
    stream: SyntheticStream
    identity_of: dict  # face_ref -> identity index (ground truth, withheld from mining)
    genre_of: dict  # video_id -> genre
    prototypes: list
    images: dict  # face_ref -> image


def synth_video_corpus(rng, n_ids=32, n_genres=4, videos_per_genre=4, per_video=3,
                       n_frames=80, size_range=(40, 96), jitter=Jitter(), patience=5):
    """Videos whose entities are drawn from genre-exclusive identity pools.

    Entities of one video are distinct identities kept in separate horizontal
    lanes, so tracks are identity-pure. Every identity appears in at least one
    video; each entity is visible in one or two intervals.
    """
    if n_ids % n_genres:
        raise ValueError("n_ids must be divisible by n_genres")
    per_genre = n_ids // n_genres
    if per_video > per_genre:
        raise ValueError("per_video exceeds identities per genre")
    protos = make_prototypes(n_ids, rng)
    scripts, who, genre_of = [], {}, {}
    for g in range(n_genres):
        pool = list(range(g * per_genre, (g + 1) * per_genre))
        cycle = [int(i) for i in rng.permutation(pool)]
        for v in range(videos_per_genre):
            vid = f"g{g}v{v:02d}"
            genre_of[vid] = f"genre{g}"
            ids = []
            while len(ids) < per_video:
                if not cycle:
                    cycle = [int(i) for i in rng.permutation(pool)]
                cand = cycle.pop()
                if cand not in ids:
                    ids.append(cand)
            fw, fh = 200 * per_video, 240
            ents = []
            for k, ident in enumerate(ids):
                side = float(rng.integers(size_range[0], size_range[1] + 1))
                # drift bounded by the slack so the box never leaves its lane
                mx = min(0.2 * n_frames, (200 - side) / 3)
                my = min(0.2 * n_frames, (fh - side) / 3)
                x0 = k * 200 + float(rng.uniform(mx, 200 - side - mx))
                y0 = float(rng.uniform(my, fh - side - my))
                a = int(rng.integers(0, n_frames // 4))
                b = int(rng.integers(a + n_frames // 3, n_frames))
                if rng.random() < 0.4 and b - a > 20:
                    cut = int(rng.integers(a + 8, b - 8))
                    gap = int(rng.integers(1, 2 * patience))
                    vis = [[a, cut], [min(cut + gap, b - 1), b]]
                else:
                    vis = [[a, b]]
                vel = [float(rng.uniform(-mx, mx)) / n_frames, float(rng.uniform(-my, my)) / n_frames]
                name = f"e{k}"
                ents.append({"name": name, "box": [x0, y0, side, side], "velocity": vel, "visible": vis})
                who[f"{vid}:{name}"] = ident
            scripts.append({"video_id": vid, "frame_size": [fw, fh], "entities": ents})
    stream = synth_detection_stream(scripts)
    identity_of, images = {}, {}
    for det in stream.detections:
        ident = who[stream.entity_of[det.face_ref]]
        ref = det.face_ref + ".png"
        identity_of[ref] = ident
        images[ref] = render_jittered(protos[ident], int(round(det.box.side)), rng, jitter)
    dets = [Detection(d.video_id, d.frame_index, d.box, d.face_ref + ".png") for d in stream.detections]
    stream = SyntheticStream(
        dets,
        {k + ".png": v for k, v in stream.entity_of.items()},
        {k + ".png": v for k, v in stream.segment_of.items()},
    )
    return VideoCorpus(stream, identity_of, genre_of, protos, images)


def mean_pixel_distances(dataset: IdentityDataset):
    """Mean squared pixel distance within and across identities."""
    flat = dataset.images.reshape(len(dataset), -1).astype(np.float64)
    sq = (flat**2).sum(1)
    d2 = (sq[:, None] + sq[None, :] - 2 * flat @ flat.T) / flat.shape[1]
    same = dataset.labels[:, None] == dataset.labels[None, :]
    off = ~np.eye(len(dataset), dtype=bool)
    return float(d2[same & off].mean()), float(d2[~same].mean())


def derive_rng(seed, stage):
    """Stage-labelled child generator of a global seed."""
    tag = int.from_bytes(hashlib.sha256(stage.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([int(seed), tag])
