"""Command line: ``unsupface <stage> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import sys
from pathlib import Path

import click
import yaml

from . import config as config_mod
from . import pipeline
from .metriclearn import FineTuneConfig
from .trainer import LossConfig, TrainConfig, TrainingDiverged

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("unsupface")


class _Group(click.Group):
    """Maps exceptions onto the documented exit codes."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.exceptions.Abort:
            click.echo("aborted", err=True)
            sys.exit(EXIT_USAGE)
        except click.UsageError as exc:
            exc.show()
            sys.exit(EXIT_USAGE)
        except (TrainingDiverged, FloatingPointError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except (ValueError, KeyError, OSError, yaml.YAMLError) as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        sys.exit(rv if isinstance(rv, int) else 0)


def common(fn):
    @click.option("--config", "config_path", type=click.Path(dir_okay=False),
                  help="YAML pipeline config.")
    @click.option("--seed", type=int, help="Global seed (overrides the config).")
    @click.option("--strict", is_flag=True, help="Single-threaded deterministic execution.")
    @click.option("--out-dir", type=click.Path(file_okay=False), default="runs/default",
                  show_default=True)
    @click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                  help="Override any config value; repeatable.")
    @click.option("-v", "--verbose", count=True)
    @functools.wraps(fn)
    def wrapper(config_path, seed, strict, out_dir, overrides, verbose, **kw):
        logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        if config_path is not None and not Path(config_path).is_file():
            raise click.BadParameter(f"no such file {config_path}", param_hint="--config")
        overrides = list(overrides)
        if seed is not None:
            overrides.append(f"seed={seed}")
        try:
            cfg = config_mod.load(config_path, overrides)
        except (ValueError, TypeError, yaml.YAMLError) as exc:
            raise click.BadParameter(str(exc), param_hint="--config/--set") from exc
        pipeline.set_strict(strict)
        return fn(cfg, Path(out_dir), **kw)

    return wrapper


def dataclass_options(section, cls, skip=("seed",)):
    """One ``--field-name`` option per dataclass field, applied as an override."""
    fields = [f for f in dataclasses.fields(cls) if f.name not in skip]

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(cfg, out, **kw):
            updates = {}
            for f in fields:
                v = kw.pop(f.name, None)
                if v is not None:
                    updates[f.name] = v
            if updates:
                cfg = _apply(cfg, section, updates)
            return fn(cfg, out, **kw)

        for f in reversed(fields):
            opt = "--" + f.name.replace("_", "-")
            if f.type in ("bool", bool):
                wrapper = click.option(f"{opt}/--no-{f.name.replace('_', '-')}", f.name,
                                       default=None)(wrapper)
            else:
                typ = {"int": int, "float": float}.get(str(f.type), float)
                wrapper = click.option(opt, f.name, type=typ, default=None,
                                       help=f"{section}.{f.name}")(wrapper)
        return wrapper

    return deco


def _apply(cfg, section, updates):
    if section == "finetune.config":
        ft = dataclasses.replace(cfg.finetune.config, **updates)
        return dataclasses.replace(cfg, finetune=dataclasses.replace(cfg.finetune, config=ft))
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section),
                                                                    **updates)})


def _echo(obj):
    click.echo(json.dumps(obj, indent=2, sort_keys=True, default=str))


@click.group(cls=_Group)
def main():
    """Unsupervised face representations from detection streams."""


@main.command()
@common
def synth(cfg, out):
    """Generate a synthetic video corpus and a labelled evaluation set."""
    _echo(pipeline.run_synth(cfg, out))


@main.command()
@click.option("--detections", type=click.Path(dir_okay=False), help="Detection stream (JSONL).")
@common
def track(cfg, out, detections):
    """Associate detections into face tracks."""
    stats = pipeline.run_track(cfg, out, detections)
    _echo({k: v for k, v in stats.items() if not k.endswith("histogram")})


@main.command()
@click.option("--tracks", type=click.Path(dir_okay=False))
@common
def stats(cfg, out, tracks):
    """Track-length and face-size statistics."""
    s = pipeline.run_stats(cfg, out, tracks)
    _echo({k: v for k, v in s.items() if not k.endswith("histogram")})


@main.command()
@click.option("--tracks", type=click.Path(dir_okay=False))
@click.option("--genres", type=click.Path(dir_okay=False), help="JSON map video_id -> genre.")
@common
def mine(cfg, out, tracks, genres):
    """Mine similar and dissimilar pairs and split off validation pairs."""
    _echo(pipeline.run_mine(cfg, out, tracks, genres))


@main.command()
@click.option("--train-pairs", type=click.Path(dir_okay=False))
@click.option("--val-pairs", type=click.Path(dir_okay=False))
@click.option("--faces", type=click.Path(file_okay=False), help="Root of face images.")
@common
@dataclass_options("train", TrainConfig)
@dataclass_options("loss", LossConfig)
def train(cfg, out, train_pairs, val_pairs, faces):
    """Train the Siamese encoder on a pair manifest."""
    _echo(pipeline.run_train(cfg, out, train_pairs, val_pairs, faces))


@main.command(name="eval")
@click.option("--encoder", "encoders", multiple=True, metavar="NAME=CHECKPOINT",
              help="Descriptor name and checkpoint; default: trained and random-init.")
@click.option("--eval-images", type=click.Path(file_okay=False))
@click.option("--activations/--no-activations", default=True)
@common
def eval_cmd(cfg, out, encoders, eval_images, activations):
    """k-fold verification for learned, random-init and LBP descriptors."""
    enc = None
    if encoders:
        enc = {}
        for item in encoders:
            name, sep, path = item.partition("=")
            if not sep or not name or name == "lbp":
                raise click.BadParameter(f"expected NAME=CHECKPOINT, got {item!r}",
                                         param_hint="--encoder")
            enc[name] = path
    reports = pipeline.run_eval(cfg, out, enc, eval_images, activations)
    _echo({k: v.summary() for k, v in reports.items()})


@main.command()
@click.option("--p", "p", type=int, help="Projection dimension.")
@click.option("--ablation/--no-ablation", default=True, help="Run the p and pair-count grids.")
@common
@dataclass_options("finetune.config", FineTuneConfig)
def finetune(cfg, out, p, ablation):
    """Metric-learning fine-tuning with k-fold evaluation and ablations."""
    if p is not None:
        cfg = dataclasses.replace(cfg, finetune=dataclasses.replace(cfg.finetune, p=p))
    reports = pipeline.run_finetune(cfg, out, ablation=ablation)
    _echo({k: v.summary() for k, v in reports.items()})


@main.command()
@click.option("--ablation/--no-ablation", default=False)
@common
def run(cfg, out, ablation):
    """All stages in order."""
    res = pipeline.run_all(cfg, out, ablation=ablation)
    _echo({"eval": {k: v.summary() for k, v in res["eval"].items()},
           "finetune": {k: v.summary() for k, v in res["finetune"].items()}})


@main.command(name="config")
@common
def show_config(cfg, out):
    """Print the effective configuration as YAML."""
    click.echo(config_mod.dump(cfg), nl=False)


if __name__ == "__main__":
    main()
