"""Command-line pipeline: synth -> preprocess -> featurize -> train ->
predict -> evaluate -> fuse.

Stages communicate only through files (manifests, feature containers,
checkpoints, prediction tables), every output is written atomically, and
each run appends a provenance line (stage, config hash, seed, wall time)
to a run log. A JSON config file supplies per-stage defaults; command-line
flags win over file values.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data_model, embeddings, fusion, metrics, model, preprocess, synth
from .audio_io import read_wav, write_wav
from .features import (FeatureSequence, apply_gmvn, fit_gmvn, log_mel,
                       read_feature_file, read_gmvn_file, stft,
                       write_feature_file, write_gmvn_file)
from .util import atomic_write_text

ENV_OUT_ROOT = "VBURST_OUT_ROOT"


def _load_config(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _section(config: dict, name: str) -> dict:
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ValueError(f"config section {name!r} must be an object")
    return dict(value)


def _resolve(section: dict, overrides: dict) -> dict:
    resolved = dict(section)
    resolved.update({k: v for k, v in overrides.items() if v is not None})
    return resolved


def _out_root(args) -> Path:
    root = getattr(args, "out_root", None) or os.environ.get(ENV_OUT_ROOT) or "."
    return Path(root)


def _log_provenance(args, stage: str, resolved: dict, seed, elapsed: float) -> None:
    blob = json.dumps(resolved, sort_keys=True, default=str).encode("utf-8")
    digest = hashlib.sha256(blob).hexdigest()[:16]
    root = _out_root(args)
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    with open(root / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{stamp} stage={stage} config={digest} seed={seed} wall={elapsed:.3f}s\n")


def _corpus_settings(config: dict, args) -> tuple[tuple[str, ...], int]:
    countries = tuple(getattr(args, "countries", None) or config.get("countries")
                      or data_model.DEFAULT_COUNTRIES)
    n_emotions = int(getattr(args, "emotions", None) or config.get("n_emotions")
                     or data_model.DEFAULT_N_EMOTIONS)
    return countries, n_emotions


# --- stages ---


def cmd_synth(args, config):
    section = _resolve(_section(config, "synth"), {
        "n_train": args.train, "n_val": args.val, "n_test": args.test,
        "seed": args.seed,
    })
    countries, n_emotions = _corpus_settings(config, args)
    synth_config = synth.SynthConfig(
        n_train=int(section.get("n_train", 64)),
        n_val=int(section.get("n_val", 32)),
        n_test=int(section.get("n_test", 32)),
        n_emotions=n_emotions,
        countries=countries,
        seed=int(section.get("seed", 0)),
    )
    manifest = synth.generate_corpus(args.out, synth_config)
    print(f"wrote {manifest}")
    return section


def cmd_preprocess(args, config):
    section = _resolve(_section(config, "preprocess"), {
        "highpass": args.highpass or None, "normalize": args.normalize or None,
        "denoise": args.denoise or None, "vad_trim": args.vad_trim or None,
        "speed": args.speed,
    })
    countries, n_emotions = _corpus_settings(config, args)
    records = data_model.load_manifest(args.manifest, countries, n_emotions)
    out_dir = Path(args.out)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    fir = None
    if section.get("highpass"):
        fir = preprocess.design_highpass_fir(
            stopband_hz=float(section.get("stopband_hz", 20.0)),
            sample_rate=int(section.get("sample_rate", 16000)),
            num_taps=int(section.get("num_taps", 2047)),
        )
    denoise_config = preprocess.DenoiseConfig()
    vad_config = preprocess.VadConfig()

    new_records = []
    for rec in records:
        audio = read_wav(rec.audio_path)
        if fir is not None:
            audio = preprocess.apply_fir(fir, audio)
        if section.get("normalize"):
            audio = preprocess.gain_normalize(audio, float(section.get("target_peak", 0.95)))
        if section.get("denoise"):
            audio = preprocess.mmse_stsa_denoise(audio, denoise_config)
        if section.get("vad_trim"):
            segments = preprocess.energy_vad(audio, vad_config)
            audio = preprocess.trim_to_voiced(audio, segments)
        speed = section.get("speed")
        if speed is not None and float(speed) != 1.0:
            audio = preprocess.speed_perturb(audio, float(speed))
        out_path = audio_dir / f"{rec.id}.wav"
        write_wav(audio, out_path, bit_depth="16")
        new_records.append(data_model.UtteranceRecord(
            id=rec.id, audio_path=str(out_path), split=rec.split, labels=rec.labels))
    manifest_path = out_dir / "manifest.csv"
    data_model.save_manifest(manifest_path, new_records, countries, n_emotions)
    print(f"wrote {manifest_path}")
    return section


def _compute_logmel(path) -> FeatureSequence:
    audio = read_wav(path)
    return log_mel(stft(audio.samples, audio.sample_rate))


def cmd_featurize(args, config):
    section = _resolve(_section(config, "features"), {
        "frontend": args.frontend, "pseudo_dim": args.pseudo_dim,
        "embeddings_dir": args.embeddings_dir, "gmvn_stats": args.gmvn_stats,
        "seed": args.seed,
    })
    frontend = section.get("frontend", "logmel")
    countries, n_emotions = _corpus_settings(config, args)
    records = data_model.load_manifest(args.manifest, countries, n_emotions)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if frontend == "embedding":
        emb_dir = section.get("embeddings_dir")
        pseudo_dim = section.get("pseudo_dim")
        for rec in records:
            if emb_dir:
                seq = embeddings.read_embeddings(Path(emb_dir) / f"{rec.id}.vbft")
                frames, rate = seq.frames, seq.frame_rate
            elif pseudo_dim:
                lm = _compute_logmel(rec.audio_path)
                frames = embeddings.pseudo_embeddings(
                    lm.data, int(pseudo_dim), int(section.get("seed", 0) or 0))
                rate = lm.frame_rate
            else:
                raise ValueError("embedding frontend needs --embeddings-dir or --pseudo-dim")
            write_feature_file(out_dir / f"{rec.id}.vbft", frames, "embedding", rate)
    elif frontend in ("logmel", "strf"):
        # the strf frontend trains its kernels in-model, so it consumes
        # the same normalized log-mel files as the logmel frontend
        sequences = {rec.id: _compute_logmel(rec.audio_path) for rec in records}
        stats_path = section.get("gmvn_stats")
        if stats_path:
            stats = read_gmvn_file(stats_path)
        else:
            train_seqs = [sequences[r.id] for r in records if r.split == "train"]
            if not train_seqs:
                train_seqs = list(sequences.values())
            stats = fit_gmvn(train_seqs)
        write_gmvn_file(out_dir / "gmvn.vbft", stats)
        for rec in records:
            seq = apply_gmvn(sequences[rec.id], stats)
            write_feature_file(out_dir / f"{rec.id}.vbft", seq.data, "logmel", seq.frame_rate)
    else:
        raise ValueError(f"unknown frontend {frontend!r}")
    print(f"wrote features for {len(records)} utterances to {out_dir}")
    return section


_FRONTEND_KINDS = {"logmel": "logmel", "strf": "logmel", "embedding": "embedding"}


def _load_examples(records, features_dir, frontend):
    examples = []
    for rec in records:
        seq = read_feature_file(Path(features_dir) / f"{rec.id}.vbft")
        expected = _FRONTEND_KINDS[frontend]
        if seq.kind != expected:
            raise ValueError(
                f"{rec.id}: feature kind {seq.kind!r} does not match frontend "
                f"{frontend!r} (expected {expected!r})"
            )
        examples.append(model.TrainExample(id=rec.id, features=seq.data, label=rec.labels))
    return examples


def cmd_train(args, config):
    section = _resolve(_section(config, "train"), {
        "steps": args.steps, "batch_size": args.batch, "lr": args.lr, "seed": args.seed,
    })
    model_section = _resolve(_section(config, "model"), {
        "frontend": args.frontend,
        "tasks": tuple(args.tasks.split(",")) if args.tasks else None,
        "seed": args.seed,
    })
    countries, n_emotions = _corpus_settings(config, args)
    records = data_model.load_manifest(args.manifest, countries, n_emotions)
    frontend = model_section.get("frontend", "logmel")
    train_examples = _load_examples([r for r in records if r.split == "train"],
                                    args.features, frontend)
    val_examples = _load_examples([r for r in records if r.split == "val"],
                                  args.features, frontend)
    if not train_examples:
        raise ValueError("manifest has no train rows")

    feat_dim = train_examples[0].features.shape[-1]
    seed = int(model_section.get("seed", 0) or 0)
    tasks = tuple(model_section.get("tasks", model.TASKS))
    age_prior = 1.0
    if "age" in tasks:
        age_prior = float(np.mean([ex.label.age for ex in train_examples]))
    model_config = model.ModelConfig(
        frontend=frontend,
        feat_dim=int(feat_dim),
        conv_channels=tuple(model_section.get("conv_channels", (8, 16))),
        hidden_dim=int(model_section.get("hidden_dim", 64)),
        att_dim=int(model_section.get("att_dim", 32)),
        head_hidden=int(model_section.get("head_hidden", 32)),
        head_layers=int(model_section.get("head_layers", 2)),
        tasks=tasks,
        n_emotions=n_emotions,
        n_countries=len(countries),
        n_strf=int(model_section.get("n_strf", 8)),
        age_prior=age_prior,
        seed=seed,
    )
    weights_section = _section(config, "loss_weights")
    weights = model.LossWeights(
        age=float(weights_section.get("age", 1.0)),
        emotion=float(weights_section.get("emotion", 80.0)),
        country=float(weights_section.get("country", 8.0)),
    )
    train_config = model.TrainConfig(
        steps=int(section.get("steps", 200)),
        batch_size=int(section.get("batch_size", 16)),
        lr=float(section.get("lr", 1e-3)),
        seed=seed,
    )
    result = model.train(train_examples, val_examples, model_config, train_config, weights)

    gmvn_ref = str(Path(args.features) / "gmvn.vbft") if frontend != "embedding" else ""
    model.save_checkpoint(args.out, result.params, result.config, gmvn_ref)
    log_path = args.log or f"{args.out}.log"
    atomic_write_text(log_path, model.history_text(result.history))
    first, last = result.history[0][4], result.history[-1][4]
    print(f"train loss {first:.4f} -> {last:.4f} over {len(result.history)} steps")
    if result.val_report is not None:
        print(result.val_report.as_text().rstrip())
    return section


def cmd_predict(args, config):
    params, model_config, _ = model.load_checkpoint(args.ckpt)
    countries, n_emotions = _corpus_settings(config, args)
    records = data_model.load_manifest(args.manifest, countries, n_emotions)
    rows = [r for r in records if r.split == args.split]
    if not rows:
        raise ValueError(f"manifest has no {args.split} rows")
    examples = _load_examples(rows, args.features, model_config.frontend)
    preds = model.predict_many(params, model_config, examples)
    data_model.save_predictions(args.out, preds)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return {"split": args.split}


def _labels_for_split(records, split):
    labels = {}
    for rec in records:
        if rec.split == split:
            if rec.labels is None:
                raise ValueError(f"{rec.id} ({split}) carries no labels")
            labels[rec.id] = rec.labels
    if not labels:
        raise ValueError(f"manifest has no labeled {split} rows")
    return labels


def cmd_evaluate(args, config):
    countries, n_emotions = _corpus_settings(config, args)
    records = data_model.load_manifest(args.manifest, countries, n_emotions)
    labels = _labels_for_split(records, args.split)
    preds = data_model.load_predictions(args.pred)
    report = metrics.evaluate(preds, labels)
    text = report.as_text(per_dim=args.per_dim)
    if args.out:
        atomic_write_text(args.out, text)
    print(text.rstrip())
    return {"split": args.split}


def _parse_weight_spec(spec: str, n_models: int) -> fusion.FusionWeights:
    parts = {}
    for chunk in spec.split(";"):
        name, _, values = chunk.partition("=")
        name = name.strip()
        if name not in fusion.TASK_ORDER:
            raise ValueError(f"unknown task {name!r} in weight spec")
        parts[name] = np.array([float(v) for v in values.split(",")])
    missing = [t for t in fusion.TASK_ORDER if t not in parts]
    if missing:
        raise ValueError(f"weight spec missing tasks {missing}")
    for task, vec in parts.items():
        if vec.size != n_models:
            raise ValueError(f"{task} weights cover {vec.size} models, expected {n_models}")
    return fusion.FusionWeights(**parts)


def cmd_fuse(args, config):
    model_preds = [data_model.load_predictions(p) for p in args.pred]
    if args.search:
        countries, n_emotions = _corpus_settings(config, args)
        records = data_model.load_manifest(args.manifest, countries, n_emotions)
        labels = _labels_for_split(records, args.split)
        weights, report = fusion.grid_search_weights(model_preds, labels,
                                                     step=float(args.step))
        fused = fusion.fuse(model_preds, weights)
        print("chosen weights: " + "; ".join(
            f"{t}=" + ",".join(f"{w:.3f}" for w in getattr(weights, t))
            for t in fusion.TASK_ORDER))
        print(report.as_text().rstrip())
        if args.report:
            atomic_write_text(args.report, report.as_text(per_dim=True))
    else:
        if not args.weights:
            raise ValueError("fuse needs --weights or --search")
        weights = _parse_weight_spec(args.weights, len(model_preds))
        fused = fusion.fuse(model_preds, weights)
    data_model.save_predictions(args.out, fused)
    print(f"wrote fused predictions to {args.out}")
    return {"models": len(model_preds), "search": bool(args.search)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vburst",
                                     description="vocal-burst multitask pipeline")
    parser.add_argument("--config", help="JSON config file with per-stage sections")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out-root", help=f"run-log root (or ${ENV_OUT_ROOT})")
    parser.add_argument("--countries", type=lambda s: tuple(s.split(",")),
                        help="comma-separated country vocabulary")
    parser.add_argument("--emotions", type=int, help="emotion dimensionality")
    sub = parser.add_subparsers(dest="stage", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int)
    p.add_argument("--val", type=int)
    p.add_argument("--test", type=int)

    p = sub.add_parser("preprocess", help="run the waveform cleanup chain")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--highpass", action="store_true")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--denoise", action="store_true")
    p.add_argument("--vad-trim", dest="vad_trim", action="store_true")
    p.add_argument("--speed", type=float)

    p = sub.add_parser("featurize", help="extract features to VBFT containers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frontend", choices=("logmel", "strf", "embedding"))
    p.add_argument("--gmvn-stats", dest="gmvn_stats")
    p.add_argument("--pseudo-dim", dest="pseudo_dim", type=int)
    p.add_argument("--embeddings-dir", dest="embeddings_dir")

    p = sub.add_parser("train", help="train the multitask model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frontend", choices=("logmel", "strf", "embedding"))
    p.add_argument("--tasks")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--log")

    p = sub.add_parser("predict", help="run inference from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score predictions against labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--out")
    p.add_argument("--per-dim", dest="per_dim", action="store_true")

    p = sub.add_parser("fuse", help="late score fusion over prediction files")
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--weights")
    p.add_argument("--search", action="store_true")
    p.add_argument("--manifest")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--step", default=0.1, type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--report")

    return parser


_STAGES = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "fuse": cmd_fuse,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = _load_config(args.config)
    if args.seed is not None:
        config = dict(config)
        for key in ("synth", "features", "model", "train"):
            config[key] = {**_section(config, key), "seed": args.seed}
    started = time.monotonic()
    try:
        resolved = _STAGES[args.stage](args, config)
    except (ValueError, OSError, model.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    elapsed = time.monotonic() - started
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    _log_provenance(args, args.stage, resolved or {}, seed, elapsed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
