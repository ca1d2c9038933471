"""Stage runners: synth -> track -> mine -> train -> eval -> finetune.

Each stage reads and writes files under one output directory, so stages can
be rerun independently. Every file carries a provenance header (stage, seed,
config hash).
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from pathlib import Path

import numpy as np
import torch

from . import dataio, encoder, evaluation, metriclearn, pairminer, records, tracking, trainer
from .config import PipelineConfig

log = logging.getLogger(__name__)

DESCRIPTOR_NAMES = ("trained", "random", "lbp")


class Layout:
    """File locations under an output directory."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)

    def __getattr__(self, name):
        paths = {
            "detections": "synth/detections.jsonl",
            "genres": "synth/genres.json",
            "identities": "synth/identities.csv",
            "faces": "synth/faces",
            "eval_images": "synth/eval",
            "tracks": "track/tracks.jsonl",
            "track_stats": "track/stats.json",
            "manifest": "mine/manifest.jsonl",
            "train_pairs": "mine/train.jsonl",
            "val_pairs": "mine/val.jsonl",
            "encoder": "train/encoder.pt",
            "encoder_init": "train/encoder_init.pt",
            "history": "train/history.csv",
            "train_summary": "train/summary.json",
            "eval_pairs": "eval/pairs.csv",
            "eval_report": "eval/report.json",
            "activations": "eval/activations",
            "finetune_report": "finetune/report.json",
            "ablation_p": "finetune/ablation_p.csv",
            "ablation_pairs": "finetune/ablation_pairs.csv",
        }
        if name not in paths:
            raise AttributeError(name)
        return self.root / paths[name]

    def descriptors(self, name):
        return self.root / "eval" / f"descriptors_{name}.f32"

    def roc(self, stage, name):
        return self.root / stage / f"roc_{name}.csv"


def header(cfg: PipelineConfig, stage):
    return records.provenance(stage, cfg.seed, cfg.to_dict())


def set_strict(strict):
    """Single-threaded, deterministic kernels."""
    if strict:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(bool(strict))


# ---------------------------------------------------------------------------
# synth


def run_synth(cfg: PipelineConfig, out):
    lay = Layout(out)
    s = cfg.synth
    hdr = header(cfg, "synth")
    corpus = dataio.synth_video_corpus(
        dataio.derive_rng(cfg.seed, "synth-videos"), n_ids=s.n_ids, n_genres=s.n_genres,
        videos_per_genre=s.videos_per_genre, per_video=s.per_video, n_frames=s.n_frames,
        size_range=(s.min_face, s.max_face), jitter=s.jitter, patience=cfg.tracker.patience)
    records.write_jsonl(lay.detections, (d.to_record() for d in corpus.stream.detections), hdr)
    records.write_json(lay.genres, {"genres": corpus.genre_of}, hdr)
    # ground truth, for purity checks only; the miner never reads it
    records.write_csv(lay.identities, ["face_ref", "identity"],
                      sorted(corpus.identity_of.items()), hdr)
    meta = {"provenance": records.dumps(hdr)}
    for ref in sorted(corpus.images):
        dataio.save_image(lay.faces / ref, corpus.images[ref], meta)
    test = dataio.synth_identity_dataset(s.eval_ids, s.eval_images_per_id, s.eval_side,
                                         dataio.derive_rng(cfg.seed, "synth-eval"), s.jitter)
    test.write(lay.eval_images, header=hdr)
    summary = {"n_detections": len(corpus.stream.detections), "n_videos": len(corpus.genre_of),
               "n_identities": s.n_ids, "n_eval_images": len(test)}
    log.info("synth: %s", summary)
    return summary


# ---------------------------------------------------------------------------
# track / stats


def read_detections(path):
    """Detections in file order; errors name the offending line."""
    out, lines = [], []
    for lineno, rec in records.iter_jsonl(path):
        try:
            out.append(tracking.Detection.from_record(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad detection record ({exc})") from exc
        lines.append(lineno)
    return out, lines


def read_tracks(path):
    return [tracking.FaceTrack.from_record(rec) for _, rec in records.iter_jsonl(path)]


def write_stats(cfg, stats, out_dir, stage):
    out_dir = Path(out_dir)
    hdr = header(cfg, stage)
    records.write_json(out_dir / "stats.json", stats, hdr)
    records.write_csv(out_dir / "track_length_hist.csv", ["bin_start", "count"],
                      stats["track_length_histogram"], hdr)
    records.write_csv(out_dir / "face_size_hist.csv", ["bin_start", "count"],
                      stats["face_size_histogram"], hdr)


def run_track(cfg: PipelineConfig, out, detections=None):
    lay = Layout(out)
    dets, lines = read_detections(detections or lay.detections)
    try:
        tracks = tracking.run_tracker(dets, cfg.tracker)
    except tracking.StreamOrderError as exc:
        raise ValueError(f"{detections or lay.detections}:{lines[exc.index]}: detection out of "
                         f"order ({exc.prev} then {exc.cur})") from exc
    records.write_jsonl(lay.tracks, (t.to_record() for t in tracks), header(cfg, "track"))
    stats = tracking.track_stats(tracks)
    write_stats(cfg, stats, lay.tracks.parent, "track")
    log.info("track: %d detections -> %d tracks", len(dets), len(tracks))
    return stats


def run_stats(cfg: PipelineConfig, out, tracks=None):
    lay = Layout(out)
    stats = tracking.track_stats(read_tracks(tracks or lay.tracks))
    write_stats(cfg, stats, lay.root / "stats", "stats")
    return stats


# ---------------------------------------------------------------------------
# mine


def read_genres(path):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return data.get("genres", data)


def run_mine(cfg: PipelineConfig, out, tracks=None, genres=None):
    lay = Layout(out)
    tr = read_tracks(tracks or lay.tracks)
    genre_map = read_genres(genres or lay.genres)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", pairminer.MiningWarning)
        manifest = pairminer.build_manifest(tr, genre_map, cfg.mining_config())
    for w in caught:
        log.warning("mine: %s", w.message)
    hdr = header(cfg, "mine")
    manifest.provenance = {**manifest.provenance, **hdr}
    train, val = pairminer.split_validation(manifest, cfg.mining.n_val, cfg.seed)
    pairminer.write_manifest(lay.manifest, manifest)
    pairminer.write_manifest(lay.train_pairs, train)
    pairminer.write_manifest(lay.val_pairs, val)
    summary = {"counts": manifest.counts, "n_train": len(train), "n_val": len(val)}
    log.info("mine: %s", summary)
    return summary


# ---------------------------------------------------------------------------
# train


def image_loader(root):
    root = Path(root)

    def load(ref):
        return dataio.load_image(root / ref)

    return load


def run_train(cfg: PipelineConfig, out, train_pairs=None, val_pairs=None, faces=None):
    lay = Layout(out)
    hdr = header(cfg, "train")
    train_m = pairminer.read_manifest(train_pairs or lay.train_pairs)
    val_m = pairminer.read_manifest(val_pairs or lay.val_pairs)
    enc_cfg = cfg.encoder_config()
    enc = encoder.build_encoder(enc_cfg)
    encoder.save_checkpoint(lay.encoder_init, enc, extra=hdr)
    bank = trainer.ImageBank(image_loader(faces or lay.faces), enc_cfg.input_side)
    t0 = time.perf_counter()
    try:
        enc, hist = trainer.train(enc, bank, train_m.tuples(), val_m.tuples(), cfg.loss,
                                  cfg.train_config())
    finally:
        elapsed = time.perf_counter() - t0
    encoder.save_checkpoint(lay.encoder, enc, extra=hdr)
    records.write_csv(lay.history, ["iteration", "loss", "val_accuracy"], hist.rows(), hdr)
    summary = {"iterations": enc.step, "hard_mining": hist.hard_mining,
               "final_val_accuracy": hist.validations[-1][1] if hist.validations else None,
               "parameters": encoder.parameter_count(enc)}
    records.write_json(lay.train_summary, summary, hdr)
    log.info("train: %d iterations in %.0f s, val %.3f", enc.step, elapsed,
             summary["final_val_accuracy"] or float("nan"))
    return summary


# ---------------------------------------------------------------------------
# eval


def read_labelled_images(root):
    root = Path(root)
    rows = records.read_csv(root / "labels.csv")
    refs = [r["face_ref"] for r in rows]
    labels = np.array([int(r["identity"]) for r in rows])
    imgs = [dataio.load_image(root / r) for r in refs]
    return refs, labels, imgs


def read_eval_pairs(path):
    return [(int(r["i"]), int(r["j"]), int(r["y"]), int(r["fold"])) for r in records.read_csv(path)]


def compute_descriptors(name, imgs, side, enc=None):
    if name == "lbp":
        return encoder.lbp_descriptors(imgs, side)
    return encoder.descriptors(enc, imgs)


def write_roc(path, report, hdr):
    records.write_csv(path, ["fold", "fpr", "tpr", "threshold"], report.roc_rows(), hdr)


def dump_activations(cfg, enc, name, imgs, labels, out_dir, hdr):
    """First-filter activation maps for two images of each of two identities."""
    ec = cfg.eval
    ids = sorted(set(labels.tolist()))[:2]
    picks = [i for ident in ids for i in np.flatnonzero(labels == ident)[:2]]
    picks = picks[: ec.activation_images]
    layers = [i for i in ec.activation_layers if i < len(enc.conv_layers)]
    side = enc.cfg.input_side
    meta = {"provenance": records.dumps(hdr)}
    for k in picks:
        view = dataio.ten_views(imgs[k], side)[4]
        for layer, m in zip(layers, encoder.activation_maps(enc, view, layers)):
            dataio.save_image(Path(out_dir) / f"{name}_img{k:03d}_conv{layer}.png",
                              encoder.normalize_map(m), meta)


def run_eval(cfg: PipelineConfig, out, encoders=None, eval_images=None, activations=True):
    """k-fold verification for each descriptor.

    ``encoders`` maps a descriptor name to a checkpoint; the default is the
    trained and the random-init encoder from the train stage. LBP is always
    included.
    """
    lay = Layout(out)
    hdr = header(cfg, "eval")
    refs, labels, imgs = read_labelled_images(eval_images or lay.eval_images)
    ec = cfg.eval
    pairs = evaluation.identity_folds(labels, ec.k, ec.pos_per_fold, ec.neg_per_fold,
                                      dataio.derive_rng(cfg.seed, "eval-pairs"))
    records.write_csv(lay.eval_pairs, ["i", "j", "y", "fold"], pairs, hdr)
    encoders = dict(encoders or {"trained": lay.encoder, "random": lay.encoder_init})
    side = cfg.encoder_config().input_side
    reports = {}
    for name in list(encoders) + ["lbp"]:
        enc = encoder.load_checkpoint(encoders[name]) if name in encoders else None
        if enc is not None:
            side = enc.cfg.input_side
        desc = compute_descriptors(name, imgs, side, enc)
        encoder.save_descriptors(lay.descriptors(name), refs, desc, header=hdr)
        rep = evaluation.kfold_eval(evaluation.score_pairs(desc, pairs), ec.k, name)
        write_roc(lay.roc("eval", name), rep, hdr)
        reports[name] = rep
        if enc is not None and activations:
            dump_activations(cfg, enc, name, imgs, labels, lay.activations, hdr)
        log.info("eval %s: acc %.4f eer %.4f auc %.4f", name, rep.mean_accuracy, rep.mean_eer,
                 rep.mean_auc)
    doc = {"reports": {k: v.to_dict() for k, v in reports.items()}, "n_pairs": len(pairs)}
    records.write_json(lay.eval_report, doc, hdr)
    return reports


# ---------------------------------------------------------------------------
# finetune


def _finetuned_report(desc, pairs, p, ft_cfg, k, name, max_train=None, seed=0):
    def fit(train):
        if max_train is not None and len(train) > max_train:
            idx = np.sort(np.random.default_rng([seed, len(train), max_train]).choice(
                len(train), max_train, replace=False))
            train = [train[i] for i in idx]
        model, _ = metriclearn.fit_metric(desc, [(t[0], t[1], t[2]) for t in train], p, ft_cfg)
        return model

    def score(model, ps):
        i = np.array([q[0] for q in ps])
        j = np.array([q[1] for q in ps])
        d2 = metriclearn.projected_distance(model, desc[i], desc[j])
        return [evaluation.ScoredPair(float(d), int(q[2]), int(q[3])) for d, q in zip(d2, ps)]

    return evaluation.kfold_refit_eval(pairs, k, fit, score, name)


def run_finetune(cfg: PipelineConfig, out, names=DESCRIPTOR_NAMES, ablation=True):
    """Metric learning on the training folds of every split, per descriptor."""
    lay = Layout(out)
    hdr = header(cfg, "finetune")
    pairs = read_eval_pairs(lay.eval_pairs)
    ft = cfg.finetune_config()
    k = cfg.eval.k
    reports, descs = {}, {}
    for name in names:
        path = lay.descriptors(name)
        if not path.exists():
            continue
        _, descs[name] = encoder.load_descriptors(path)
        p = min(cfg.finetune.p, descs[name].shape[1])
        rep = _finetuned_report(descs[name], pairs, p, ft, k, name)
        write_roc(lay.roc("finetune", name), rep, hdr)
        reports[name] = rep
        log.info("finetune %s (p=%d): acc %.4f auc %.4f", name, p, rep.mean_accuracy, rep.mean_auc)
    if not reports:
        raise ValueError(f"no descriptor files under {lay.root / 'eval'}; run eval first")
    doc = {"p": cfg.finetune.p, "reports": {k_: v.to_dict() for k_, v in reports.items()}}
    records.write_json(lay.finetune_report, doc, hdr)
    if ablation and "trained" in descs:
        run_ablation(cfg, lay, descs["trained"], pairs, hdr)
    return reports


def run_ablation(cfg, lay, desc, pairs, hdr):
    ft = cfg.finetune_config()
    k = cfg.eval.k
    rows = []
    for p in cfg.eval.p_grid:
        if p > desc.shape[1]:
            log.warning("ablation: p=%d exceeds descriptor size %d, skipped", p, desc.shape[1])
            continue
        rep = _finetuned_report(desc, pairs, p, ft, k, f"p={p}")
        rows.append((p, rep.mean_accuracy, rep.mean_auc, rep.mean_eer))
    records.write_csv(lay.ablation_p, ["p", "accuracy", "auc", "eer"], rows, hdr)
    available = min(sum(1 for q in pairs if q[3] != f) for f in range(k))
    rows = []
    for n in cfg.eval.pair_grid:
        if n > available:
            log.warning("ablation: %d supervised pairs requested, %d available", n, available)
            rows.append((n, available, None, None, None, "not enough labelled pairs"))
            continue
        rep = _finetuned_report(desc, pairs, min(cfg.finetune.p, desc.shape[1]), ft, k,
                                f"n={n}", max_train=n, seed=cfg.seed)
        rows.append((n, n, rep.mean_accuracy, rep.mean_auc, rep.mean_eer, ""))
    records.write_csv(lay.ablation_pairs, ["n_pairs", "n_used", "accuracy", "auc", "eer", "note"],
                      rows, hdr)


# ---------------------------------------------------------------------------


def run_all(cfg: PipelineConfig, out, ablation=False):
    """Every stage in order; returns a dict of per-stage results."""
    out = Path(out)
    res = {"synth": run_synth(cfg, out), "track": run_track(cfg, out),
           "mine": run_mine(cfg, out), "train": run_train(cfg, out)}
    res["eval"] = run_eval(cfg, out)
    res["finetune"] = run_finetune(cfg, out, ablation=ablation)
    return res
