"""Command-line entry points.

Subcommands:

* ``synth``    generate the procedural synthetic corpus (WAVs + manifest)
* ``features`` extract log-Mel features for a manifest into cache files
* ``train``    run one training configuration on one fold split
* ``cv``       cross-validate over every fold
* ``eval``     evaluate a checkpoint on a test fold
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..audio import FeatureConfig, read_manifest
from ..nn import build_wideresnet
from ..trainers import TrainerConfig
from ..verify import (
    DESK_MODEL_REPEATS,
    DESK_MODEL_WIDTHS,
    SyntheticCorpusSpec,
    desk_feature_config,
    desk_trainer_overrides,
    gen_synthetic_corpus,
)
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, ModelConfig, read_ini
from .experiment import cross_validate, evaluate, load_corpus, export_feature_cache, run_experiment


def _add_common_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    p.add_argument("--method", choices=["supervised", "mt", "dct", "mm", "fm"],
                   default="supervised")
    mix = p.add_mutually_exclusive_group()
    mix.add_argument("--mixup", dest="mixup", action="store_true", default=None)
    mix.add_argument("--no-mixup", dest="mixup", action="store_false")
    p.add_argument("--labeled-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--policy", default=None,
                   help="supervised augmentation policy (none/mixup/weak/weak+mixup/strong/strong+mixup)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--config", default=None, help="INI config file (flags override it)")
    p.add_argument("--desk", action="store_true",
                   help="desk-scale preset: small features, reduced-width model, short ramps")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = read_ini(args.config)
    else:
        cfg = ExperimentConfig()
    use_mixup = args.mixup
    if use_mixup is None:
        use_mixup = args.method == "mm"  # mixup is built into plain MixMatch
    trainer = TrainerConfig.defaults_for(args.method, use_mixup=use_mixup)
    if args.config:
        # keep any trainer options the INI set explicitly for this method
        ini_trainer = cfg.trainer
        if ini_trainer.method == args.method:
            trainer = ini_trainer
    if args.desk:
        cfg.features = desk_feature_config()
        cfg.model = ModelConfig(widths=DESK_MODEL_WIDTHS, repeats=DESK_MODEL_REPEATS)
        overrides = desk_trainer_overrides()
        trainer = trainer.replace(epochs=overrides["epochs"], **overrides[args.method])
    if args.epochs is not None:
        trainer = trainer.replace(epochs=args.epochs)
    if args.batch_size is not None:
        trainer = trainer.replace(batch_size=args.batch_size)
    if args.lr is not None:
        trainer = trainer.replace(lr=args.lr)
    if args.policy is not None:
        trainer = trainer.replace(supervised_policy=args.policy)
    cfg.trainer = trainer
    cfg.manifest_path = Path(args.manifest)
    cfg.labeled_fraction = args.labeled_fraction
    cfg.seed = args.seed
    if args.out:
        cfg.output_dir = Path(args.out)
    if args.resume:
        cfg.resume_from = Path(args.resume)
    return cfg


def cmd_synth(args) -> int:
    spec = SyntheticCorpusSpec(n_classes=args.classes, clips_per_class=args.clips_per_class,
                               seed=args.seed)
    manifest = gen_synthetic_corpus(spec, args.out)
    print(f"wrote {len(manifest)} clips ({manifest.n_classes} classes) to {args.out}")
    return 0


def cmd_features(args) -> int:
    feat = desk_feature_config() if args.desk else FeatureConfig(
        n_mels=args.n_mels, window_size=args.window, hop_length=args.hop,
        target_sample_rate=args.sample_rate, target_duration=args.duration)
    manifest = read_manifest(args.manifest)
    corpus = load_corpus(manifest, feat)
    paths = export_feature_cache(corpus, args.out)
    print(f"cached {len(paths)} spectrograms "
          f"({corpus.specs.shape[1]}x{corpus.specs.shape[2]}) in {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    report = run_experiment(cfg)
    print(json.dumps({"method": report.method, "seed": report.seed,
                      "final_er": report.final_er, "best_er": report.best_er,
                      "wall_clock_s": round(report.wall_clock_s, 1)}, indent=2))
    return 0


def cmd_cv(args) -> int:
    cfg = _config_from_args(args)
    report = cross_validate(cfg, n_workers=args.workers)
    print(json.dumps({"method": report.method, "fold_ers": report.fold_ers,
                      "mean_er": report.mean_er, "std_er": report.std_er}, indent=2))
    return 0


def cmd_eval(args) -> int:
    feat = desk_feature_config() if args.desk else FeatureConfig(
        n_mels=args.n_mels, window_size=args.window, hop_length=args.hop,
        target_sample_rate=args.sample_rate, target_duration=args.duration)
    manifest = read_manifest(args.manifest)
    corpus = load_corpus(manifest, feat)
    arrays, meta = load_checkpoint(args.checkpoint)
    model_cfg = meta["config"]["model"]
    model_key = "teacher" if (args.teacher and any(k.startswith("teacher/") for k in arrays)) \
        else ("model" if any(k.startswith("model/") for k in arrays) else "model_f")
    model = build_wideresnet(corpus.n_classes, corpus.specs.shape[1:],
                             widths=tuple(model_cfg["widths"]), repeats=model_cfg["repeats"])
    state = {k[len(model_key) + 1:]: v for k, v in arrays.items()
             if k.startswith(model_key + "/")}
    model.load_state_dict(state)
    fold = args.fold if args.fold is not None else sorted(set(corpus.folds.tolist()))[-1]
    mask = corpus.folds == fold
    er, _, _ = evaluate(model, corpus.specs[mask], corpus.labels[mask], feat.db_floor)
    print(json.dumps({"checkpoint": str(args.checkpoint), "fold": int(fold),
                      "weights": model_key, "er": er}, indent=2))
    return 0


def _add_feature_args(p) -> None:
    p.add_argument("--n-mels", type=int, default=64)
    p.add_argument("--window", type=int, default=2048)
    p.add_argument("--hop", type=int, default=512)
    p.add_argument("--sample-rate", type=int, default=44100)
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--desk", action="store_true")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sslaudio",
                                     description="semi-supervised audio tagging experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--clips-per-class", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("features", help="manifest -> feature cache files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_feature_args(p)
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("train", help="single training run")
    _add_common_train_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("cv", help="cross-validation over all folds")
    _add_common_train_args(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_cv)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--teacher", action="store_true", help="use EMA weights when present")
    _add_feature_args(p)
    p.set_defaults(fn=cmd_eval)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
