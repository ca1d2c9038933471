"""Pipeline configuration: one YAML file with a section per stage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataio import Jitter
from .encoder import PRESETS, preset
from .metriclearn import FineTuneConfig
from .pairminer import MiningConfig
from .tracking import TrackerConfig
from .trainer import LossConfig, TrainConfig


@dataclass(frozen=True)
class SynthConfig:
    n_ids: int = 32
    n_genres: int = 4
    videos_per_genre: int = 4
    per_video: int = 3
    n_frames: int = 80
    min_face: int = 40
    max_face: int = 96
    eval_ids: int = 100
    eval_images_per_id: int = 10
    eval_side: int = 64
    jitter: Jitter = Jitter()


@dataclass(frozen=True)
class MineConfig:
    n_similar: int = 4000
    n_dissimilar: int = 4000
    cap: int | None = None
    same_frame_fraction: float | None = None
    n_val: int = 200


@dataclass(frozen=True)
class EncoderSection:
    preset: str = "reference-small"
    overrides: dict = field(default_factory=dict)

    def build_config(self, seed):
        return preset(self.preset, **{"seed": seed, **self.overrides})


@dataclass(frozen=True)
class FineTuneSection:
    p: int = 256
    config: FineTuneConfig = FineTuneConfig()


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    pos_per_fold: int = 300
    neg_per_fold: int = 300
    p_grid: tuple = (128, 256, 512, 1000)
    pair_grid: tuple = (1000, 2000, 5000, 10000, 20000)
    activation_layers: tuple = (0, 1, 2, 3, 4)
    activation_images: int = 4


SECTIONS = {
    "synth": SynthConfig,
    "tracker": TrackerConfig,
    "mining": MineConfig,
    "encoder": EncoderSection,
    "loss": LossConfig,
    "train": TrainConfig,
    "finetune": FineTuneSection,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = SynthConfig()
    tracker: TrackerConfig = TrackerConfig()
    mining: MineConfig = MineConfig()
    encoder: EncoderSection = EncoderSection()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig(max_iterations=1200, val_every=300, momentum=0.9,
                                     max_hard_iterations=300)
    finetune: FineTuneSection = FineTuneSection()
    eval: EvalConfig = EvalConfig()

    def stage_seed(self, cfg):
        """Copy of a stage config whose ``seed`` field follows the global seed."""
        if any(f.name == "seed" for f in dataclasses.fields(cfg)):
            return dataclasses.replace(cfg, seed=self.seed)
        return cfg

    def mining_config(self):
        m = self.mining
        return MiningConfig(m.n_similar, m.n_dissimilar, m.cap, m.same_frame_fraction, self.seed)

    def train_config(self):
        return self.stage_seed(self.train)

    def finetune_config(self):
        return self.stage_seed(self.finetune.config)

    def encoder_config(self):
        return self.encoder.build_config(self.seed)

    def to_dict(self):
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in data.items():
        default = getattr(cls(), k)
        if dataclasses.is_dataclass(default):
            v = _build(type(default), v, f"{where}.{k}")
        elif isinstance(default, tuple) and isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"{where}: {exc}") from exc


def from_dict(data):
    data = dict(data or {})
    unknown = sorted(set(data) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ValueError(f"unknown config sections {unknown}")
    kwargs = {"seed": int(data.get("seed", 0))}
    for name, cls in SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data[name], name)
    cfg = PipelineConfig(**kwargs)
    if cfg.encoder.preset not in PRESETS:
        raise ValueError(f"unknown encoder preset {cfg.encoder.preset!r}")
    return cfg


def load(path=None, overrides=()):
    """Read a YAML config and apply ``section.key=value`` overrides."""
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    merged = _plain(dataclasses.asdict(from_dict(data)))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        node = merged
        *parents, leaf = key.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise ValueError(f"override {key!r}: no section {p!r}")
            node = node[p]
        if leaf not in node:
            raise ValueError(f"override {key!r}: unknown key {leaf!r}")
        node[leaf] = yaml.safe_load(raw)
    return from_dict(merged)


def dump(cfg: PipelineConfig):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
