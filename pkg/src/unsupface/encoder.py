"""The embedding network, descriptors, the LBP baseline and activation maps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import dataio, kernels

CHECKPOINT_VERSION = 1

VGG16_STAGES = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the embedding network.

    ``stages`` is a sequence of ``(channels, n_convs)``; each stage is a stack
    of 3x3 conv + batch-norm + ReLU followed by 2x2 max pooling. Two fully
    connected layers of width ``fc_dim`` follow; the last one is the linear
    embedding.
    """

    input_side: int = 64
    stages: tuple = ((16, 1), (32, 1), (64, 2), (128, 1))
    fc_dim: int = 1024
    n_fc: int = 2
    batchnorm: bool = True
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        if self.fc_dim < 8:
            raise ValueError("fc_dim must be >= 8")
        if self.n_fc < 1:
            raise ValueError("n_fc must be >= 1")
        if not self.stages:
            raise ValueError("need at least one conv stage")
        if any(c < 1 or k < 1 for c, k in self.stages):
            raise ValueError(f"bad stage spec {self.stages}")
        if self.final_side < 1:
            raise ValueError(
                f"input_side {self.input_side} too small for {len(self.stages)} pooling stages"
            )

    @property
    def final_side(self):
        return self.input_side >> len(self.stages)

    @property
    def paper_parity(self):
        return self.input_side in (64, 128) and self.fc_dim == 1024

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "stages": tuple(tuple(s) for s in d["stages"])})


PRESETS = {
    "reference-small": EncoderConfig(64, ((16, 1), (32, 1), (64, 2), (128, 1))),
    "paper-64": EncoderConfig(64, VGG16_STAGES),
    "paper-128": EncoderConfig(128, VGG16_STAGES),
}


def preset(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return EncoderConfig.from_dict({**base.to_dict(), **overrides})


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.step = 0
        layers = []
        self.conv_layers = []  # indices into ``features`` of each conv block's output
        c_in = cfg.in_channels
        for width, n in cfg.stages:
            for _ in range(n):
                layers.append(nn.Conv2d(c_in, width, 3, padding=1))
                if cfg.batchnorm:
                    layers.append(nn.BatchNorm2d(width))
                layers.append(nn.ReLU(inplace=False))
                self.conv_layers.append(len(layers) - 1)
                c_in = width
            layers.append(nn.MaxPool2d(2))
        self.features = nn.Sequential(*layers)
        head = []
        n_in = c_in * cfg.final_side**2
        for i in range(cfg.n_fc):
            head.append(nn.Linear(n_in, cfg.fc_dim))
            if cfg.batchnorm:
                head.append(nn.BatchNorm1d(cfg.fc_dim))
            if i < cfg.n_fc - 1:
                head.append(nn.ReLU(inplace=False))
            n_in = cfg.fc_dim
        self.head = nn.Sequential(*head)

    def forward(self, x):
        return self.head(torch.flatten(self.features(x), 1))

    @property
    def dtype(self):
        return next(self.parameters()).dtype


def init_parameters(enc: Encoder, seed):
    """Seeded zero-mean Gaussian weights (He scale), zero biases.

    The gain of the embedding's batch-norm starts at ``1/sqrt(fc_dim)`` so the
    squared distance between unrelated inputs is about 2, on the scale of the
    loss bias rather than ``2 * fc_dim``.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in enc.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype)
                               * (2.0 / fan_in) ** 0.5)
                m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
                m.reset_parameters()
                m.reset_running_stats()
        last = enc.head[-1]
        if isinstance(last, nn.BatchNorm1d):
            last.weight.fill_(enc.cfg.fc_dim**-0.5)


def build_encoder(cfg: EncoderConfig, dtype=torch.float32):
    enc = Encoder(cfg)
    init_parameters(enc, cfg.seed)
    return enc.to(dtype).eval()


def parameter_count(enc):
    return sum(p.numel() for p in enc.parameters())


def to_tensor(imgs, dtype=torch.float32):
    """``(N, H, W, C)`` or ``(H, W, C)`` arrays to an NCHW tensor."""
    arr = np.asarray(imgs, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def _check_side(enc, imgs):
    side = enc.cfg.input_side
    shape = np.shape(imgs)
    if shape[-3] != side or shape[-2] != side:
        raise ValueError(f"encoder expects {side}x{side} input, got {shape[-3]}x{shape[-2]}")
    if shape[-1] != enc.cfg.in_channels:
        raise ValueError(f"encoder expects {enc.cfg.in_channels} channels, got {shape[-1]}")


@torch.no_grad()
def embed(enc, imgs, batch_size=256):
    """Raw embeddings in inference mode; ``(N, fc_dim)`` float64."""
    _check_side(enc, imgs)
    arr = np.asarray(imgs, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    was_training = enc.training
    enc.eval()
    out = [enc(to_tensor(arr[i : i + batch_size], enc.dtype)).double().numpy()
           for i in range(0, len(arr), batch_size)]
    enc.train(was_training)
    res = np.concatenate(out) if out else np.zeros((0, enc.cfg.fc_dim))
    return res[0] if single else res


def descriptor(enc, img):
    """Unit-norm mean of the ten view embeddings of ``img``."""
    return descriptors(enc, [img])[0]


def descriptors(enc, imgs, batch_images=25):
    side = enc.cfg.input_side
    out = np.empty((len(imgs), enc.cfg.fc_dim))
    for s in range(0, len(imgs), batch_images):
        chunk = imgs[s : s + batch_images]
        views = np.concatenate([dataio.ten_views(im, side) for im in chunk])
        e = embed(enc, views).reshape(len(chunk), dataio.N_VIEWS, -1).mean(axis=1)
        out[s : s + len(chunk)] = e / np.linalg.norm(e, axis=1, keepdims=True)
    return out


def lbp_descriptor(gray, cell_side=16):
    """Concatenated per-cell 58-bin uniform LBP histograms (non-uniform codes dropped)."""
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError(f"expected a square grayscale image, got shape {g.shape}")
    if g.shape[0] % cell_side:
        raise ValueError(f"side {g.shape[0]} not divisible by cell size {cell_side}")
    return kernels.lbp_histograms(g, cell_side)


def lbp_descriptors(imgs, side, cell_side=16):
    """L2-normalised LBP descriptors of images resized to ``side``."""
    out = []
    for im in imgs:
        gray = dataio.to_gray(dataio.rescale(im, side, scale=1.0))
        v = lbp_descriptor(gray, cell_side)
        out.append(v / max(np.linalg.norm(v), 1e-12))
    return np.array(out)


@torch.no_grad()
def activation_maps(enc, img, layer_indices):
    """First-channel activation of the requested conv layers (0-based)."""
    _check_side(enc, img)
    n = len(enc.conv_layers)
    for i in layer_indices:
        if not 0 <= i < n:
            raise IndexError(f"conv layer index {i} out of range (encoder has {n})")
    wanted = {enc.conv_layers[i]: i for i in layer_indices}
    maps = {}
    was_training = enc.training
    enc.eval()
    x = to_tensor(img, enc.dtype)
    for pos, layer in enumerate(enc.features):
        x = layer(x)
        if pos in wanted:
            maps[wanted[pos]] = x[0, 0].double().numpy().copy()
        if len(maps) == len(wanted):
            break
    enc.train(was_training)
    return [maps[i] for i in layer_indices]


def normalize_map(m):
    lo, hi = float(m.min()), float(m.max())
    if hi - lo < 1e-12:
        return np.zeros_like(m, dtype=np.float32)
    return ((m - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(path, enc, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": "unsupface-encoder",
            "version": CHECKPOINT_VERSION,
            "config": enc.cfg.to_dict(),
            "step": enc.step,
            "dtype": str(enc.dtype).replace("torch.", ""),
            "state_dict": enc.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path):
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != "unsupface-encoder":
        raise ValueError(f"{path} is not an encoder checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    enc = Encoder(EncoderConfig.from_dict(blob["config"]))
    enc = enc.to(getattr(torch, blob.get("dtype", "float32")))
    enc.load_state_dict(blob["state_dict"])
    enc.step = int(blob["step"])
    return enc.eval()


def save_descriptors(path, refs, matrix, header=None):
    """Little-endian float32 matrix at ``path`` with a JSON sidecar ``path.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = np.ascontiguousarray(matrix, dtype="<f4")
    path.write_bytes(m.tobytes())
    side = {"rows": len(refs), "dim": int(m.shape[1]) if m.ndim == 2 else 0,
            "dtype": "float32-le", "refs": list(refs)}
    if header is not None:
        side["provenance"] = header
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")


def load_descriptors(path):
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    m = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(side["rows"], side["dim"])
    return side["refs"], m.astype(np.float64)


__all__ = [
    "EncoderConfig", "Encoder", "PRESETS", "preset", "build_encoder", "parameter_count", "embed",
    "descriptor", "descriptors", "lbp_descriptor", "lbp_descriptors", "activation_maps",
    "save_checkpoint", "load_checkpoint", "save_descriptors", "load_descriptors",
]
