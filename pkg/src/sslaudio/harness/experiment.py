"""Experiment runner: data loading, training loops, evaluation, CV.

Determinism contract: every random decision derives from (seed, purpose,
integer indices), so a single-worker run is bit-reproducible and a
checkpoint resume continues the exact step stream of an uninterrupted
run.  Checkpoints capture parameters, optimizer moments, the EMA shadow
where applicable, and the loop counters.
"""

from __future__ import annotations

import copy
import json
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..audio import (
    DatasetManifest,
    FoldPlan,
    log_mel_batch,
    make_folds,
    pad_or_crop,
    read_manifest,
    resample,
    load_waveform,
    split_labeled_unlabeled,
    write_feature_cache,
)
from ..errors import ConfigurationError, ContractError, ExperimentAbort
from ..nn import build_wideresnet, no_grad, softmax_np, one_hot
from ..rng import derive_rng
from ..trainers import (
    DeepCoTrainingTrainer,
    FixMatchTrainer,
    MeanTeacherTrainer,
    MixMatchTrainer,
    SupervisedTrainer,
    TaggedBatch,
    UnlabeledBatch,
    normalize_db,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig


# ---------------------------------------------------------------------------
# data loading


@dataclass
class CorpusData:
    """All clips of one manifest, loaded and featurized once."""

    ids: list
    waveforms: np.ndarray        # [N, samples] float32
    specs: np.ndarray            # [N, frames, mels] float32 dB
    labels: np.ndarray           # [N] int64
    folds: np.ndarray            # [N] int64
    n_classes: int
    id_index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.id_index:
            self.id_index = {cid: i for i, cid in enumerate(self.ids)}


def load_corpus(manifest: DatasetManifest, feat, chunk: int = 256) -> CorpusData:
    """Load, resample, pad/crop and featurize every clip in the manifest."""
    n = len(manifest)
    target_len = feat.target_length
    waves = np.zeros((n, target_len), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    folds = np.zeros(n, dtype=np.int64)
    ids = []
    for i, entry in enumerate(manifest.entries):
        w = load_waveform(manifest.resolve_path(entry))
        if w.sample_rate != feat.target_sample_rate:
            w = resample(w, feat.target_sample_rate)
        w = pad_or_crop(w, target_len)
        waves[i] = w.samples.astype(np.float32)
        labels[i] = entry.label
        folds[i] = entry.fold
        ids.append(entry.clip_id)
    frames = feat.frame_count(target_len)
    specs = np.zeros((n, frames, feat.n_mels), dtype=np.float32)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        specs[start:stop] = log_mel_batch(waves[start:stop], feat.target_sample_rate, feat)
    return CorpusData(ids, waves, specs, labels, folds, manifest.n_classes)


def export_feature_cache(corpus: CorpusData, out_dir) -> list:
    """One cache file per clip (documented binary layout); returns paths."""
    out_dir = Path(out_dir)
    paths = []
    for i, cid in enumerate(corpus.ids):
        path = out_dir / f"{cid}.lms"
        write_feature_cache(path, corpus.specs[i])
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# batch planning (stateless in the step/epoch indices)


def _cyclic_indices(seed: int, label: str, pool: np.ndarray, start: int, count: int) -> np.ndarray:
    """``count`` indices from an endless shuffled cycling of ``pool``."""
    n = pool.size
    out = np.empty(count, dtype=np.int64)
    pos = start
    for k in range(count):
        cycle, offset = divmod(pos, n)
        perm = derive_rng(seed, label, cycle).permutation(n)
        out[k] = pool[perm[offset]]
        pos += 1
    return out


class BatchPlanner:
    """Derives batch index sets for any (epoch, step) without mutable state."""

    def __init__(self, labeled_idx: np.ndarray, unlabeled_idx: np.ndarray,
                 method: str, batch_size: int, seed: int):
        self.labeled = np.sort(labeled_idx)
        self.unlabeled = np.sort(unlabeled_idx)
        self.method = method
        self.seed = seed
        if method == "supervised":
            self.batch_labeled = min(batch_size, self.labeled.size)
            self.steps_per_epoch = max(1, self.labeled.size // self.batch_labeled)
            self.batch_unlabeled = 0
        else:
            if self.unlabeled.size == 0:
                raise ConfigurationError(f"method {method} needs unlabeled data")
            # tiny-corpus rule: both halves shrink to the labeled pool size
            half = min(batch_size // 2, self.labeled.size)
            self.batch_labeled = half
            self.batch_unlabeled = min(half, self.unlabeled.size)
            self.steps_per_epoch = max(1, self.unlabeled.size // self.batch_unlabeled)

    def labeled_batch(self, global_step: int, stream: str = "labeled-order") -> np.ndarray:
        start = global_step * self.batch_labeled
        return _cyclic_indices(self.seed, stream, self.labeled, start, self.batch_labeled)

    def unlabeled_batch(self, epoch: int, step_in_epoch: int) -> np.ndarray:
        if not (0 <= step_in_epoch < self.steps_per_epoch):
            raise ContractError(f"step {step_in_epoch} outside epoch of {self.steps_per_epoch}")
        perm = derive_rng(self.seed, "unlabeled-order", epoch).permutation(self.unlabeled.size)
        lo = step_in_epoch * self.batch_unlabeled
        return self.unlabeled[perm[lo : lo + self.batch_unlabeled]]

    def supervised_batch(self, epoch: int, step_in_epoch: int) -> np.ndarray:
        if not (0 <= step_in_epoch < self.steps_per_epoch):
            raise ContractError(f"step {step_in_epoch} outside epoch of {self.steps_per_epoch}")
        perm = derive_rng(self.seed, "labeled-order", epoch).permutation(self.labeled.size)
        lo = step_in_epoch * self.batch_labeled
        return self.labeled[perm[lo : lo + self.batch_labeled]]


def _tagged(corpus: CorpusData, idx: np.ndarray) -> TaggedBatch:
    return TaggedBatch(corpus.waveforms[idx], corpus.specs[idx],
                       one_hot(corpus.labels[idx], corpus.n_classes), idx)


def _untagged(corpus: CorpusData, idx: np.ndarray) -> UnlabeledBatch:
    return UnlabeledBatch(corpus.waveforms[idx], corpus.specs[idx], idx)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, specs: np.ndarray, labels: np.ndarray, db_floor: float = -80.0,
             batch: int = 256):
    """Error rate (%) under the argmax rule, plus per-clip predictions."""
    if specs.shape[0] == 0:
        raise ContractError("cannot evaluate on an empty set")
    model.eval()
    preds = np.empty(specs.shape[0], dtype=np.int64)
    confs = np.empty(specs.shape[0], dtype=np.float64)
    with no_grad():
        for lo in range(0, specs.shape[0], batch):
            hi = min(lo + batch, specs.shape[0])
            probs = softmax_np(model(normalize_db(specs[lo:hi], db_floor)).data)
            preds[lo:hi] = probs.argmax(axis=1)
            confs[lo:hi] = probs.max(axis=1)
    er = 100.0 * float(np.mean(preds != labels))
    return er, preds, confs


# ---------------------------------------------------------------------------
# reports


@dataclass
class ExperimentReport:
    method: str
    seed: int
    final_er: float
    best_er: float
    best_epoch: int
    epoch_ers: list
    n_params: int
    wall_clock_s: float
    config: dict
    fold_ers: list = field(default_factory=list)
    mean_er: float | None = None
    std_er: float | None = None
    final_mask_rate: float | None = None

    def to_json_dict(self) -> dict:
        out = dict(self.__dict__)
        return out


# ---------------------------------------------------------------------------
# trainer assembly


def _build_models(cfg: ExperimentConfig, n_classes: int, input_shape, dtype=np.float32):
    def fresh(stream: str):
        rng = derive_rng(cfg.seed, stream)
        return build_wideresnet(n_classes, input_shape, widths=cfg.model.widths,
                                repeats=cfg.model.repeats, rng=rng, dtype=dtype)

    method = cfg.trainer.method
    if method == "dct":
        return {"model_f": fresh("init-f"), "model_g": fresh("init-g")}
    return {"model": fresh("init")}


def build_trainer(cfg: ExperimentConfig, n_classes: int, input_shape,
                  steps_per_epoch: int, models: dict):
    t = cfg.trainer
    common = (t, cfg.features, n_classes, cfg.seed, steps_per_epoch)
    if t.method == "supervised":
        return SupervisedTrainer(*common, models["model"])
    if t.method == "mt":
        return MeanTeacherTrainer(*common, models["model"])
    if t.method == "dct":
        return DeepCoTrainingTrainer(*common, models["model_f"], models["model_g"])
    if t.method == "mm":
        return MixMatchTrainer(*common, models["model"])
    if t.method == "fm":
        return FixMatchTrainer(*common, models["model"])
    raise ConfigurationError(f"unknown method {t.method!r}")


def _checkpoint_arrays(trainer) -> dict:
    arrays = {}
    for mname, model in trainer.models().items():
        for key, value in model.state_dict().items():
            arrays[f"{mname}/{key}"] = value
    for oname, opt in trainer.optimizers().items():
        for key, value in opt.state_dict().items():
            if key == "t":
                continue
            arrays[f"opt:{oname}/{key}"] = value
    return arrays


def _restore_from_arrays(trainer, arrays: dict, meta: dict):
    for mname, model in trainer.models().items():
        prefix = f"{mname}/"
        state = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        model.load_state_dict(state)
    for oname, opt in trainer.optimizers().items():
        prefix = f"opt:{oname}/"
        state = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        state["t"] = meta["opt_t"][oname]
        opt.load_state_dict(state)


# ---------------------------------------------------------------------------
# the runner


def run_experiment(cfg: ExperimentConfig, corpus: CorpusData | None = None) -> ExperimentReport:
    """Train one configuration on one fold split and report error rates.

    ``corpus`` short-circuits manifest loading when the caller already
    holds the featurized clips (the acceptance suite reuses one corpus
    across many runs).
    """
    t_start = time.perf_counter()
    if corpus is None:
        if cfg.manifest_path is None:
            raise ConfigurationError("need a manifest path or a preloaded corpus")
        manifest = read_manifest(cfg.manifest_path)
        corpus = load_corpus(manifest, cfg.features)

    fold_ids = sorted(set(int(f) for f in corpus.folds))
    test_fold = cfg.test_fold if cfg.test_fold is not None else fold_ids[-1]
    if test_fold not in fold_ids:
        raise ConfigurationError(f"test fold {test_fold} not present in manifest")
    train_mask = corpus.folds != test_fold
    test_mask = ~train_mask
    train_idx = np.nonzero(train_mask)[0]

    # stratified labeled/unlabeled split over the training folds
    labeled_idx, unlabeled_idx = _stratified_split(
        corpus.labels[train_idx], train_idx, cfg.labeled_fraction, cfg.seed)

    method = cfg.trainer.method
    input_shape = corpus.specs.shape[1:]
    planner = BatchPlanner(labeled_idx, unlabeled_idx, method,
                           cfg.trainer.batch_size, cfg.seed)
    models = _build_models(cfg, corpus.n_classes, input_shape)
    trainer = build_trainer(cfg, corpus.n_classes, input_shape,
                            planner.steps_per_epoch, models)
    n_params = sum(m.param_count() for m in models.values())

    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    steps_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        steps_fh = open(out_dir / "steps.jsonl", "a")

    start_epoch = 0
    start_step = 0
    best_er, best_epoch = float("inf"), -1
    if cfg.resume_from is not None:
        arrays, meta = load_checkpoint(cfg.resume_from)
        if meta["method"] != method or meta["seed"] != cfg.seed:
            raise ConfigurationError("checkpoint does not match this configuration")
        _restore_from_arrays(trainer, arrays, meta)
        start_step = int(meta["global_step"])
        start_epoch = start_step // planner.steps_per_epoch
        best_er = float(meta.get("best_er", best_er))

    def eval_model():
        model = trainer.models().get("model") or trainer.models()["model_f"]
        if method == "mt" and cfg.eval_teacher:
            model = trainer.teacher.model
        return model

    epoch_ers = []
    last_mask_rates = []
    global_step = start_step
    stop = False

    try:
        for epoch in range(start_epoch, cfg.trainer.epochs):
            step0 = epoch * planner.steps_per_epoch
            for sie in range(planner.steps_per_epoch):
                if global_step > step0 + sie:
                    continue  # resumed past this step
                report = _one_step(trainer, planner, corpus, method, epoch, sie, global_step)
                if steps_fh:
                    steps_fh.write(json.dumps(report.to_json_dict()) + "\n")
                if method == "fm":
                    last_mask_rates.append(report.mask_rate)
                global_step += 1
                if cfg.stop_after_steps is not None and global_step >= cfg.stop_after_steps:
                    stop = True
                    break

            do_eval = ((epoch + 1) % cfg.eval_every == 0) or epoch == cfg.trainer.epochs - 1
            if do_eval or stop:
                er, _, _ = evaluate(eval_model(), corpus.specs[test_mask],
                                    corpus.labels[test_mask], cfg.features.db_floor)
                epoch_ers.append({"epoch": epoch, "er": er})
                if er < best_er:
                    best_er, best_epoch = er, epoch
            if out_dir and (((epoch + 1) % cfg.checkpoint_every == 0) or stop):
                _save_rotating(out_dir, trainer, cfg, epoch, global_step,
                               best_er=best_er, current_er=epoch_ers[-1]["er"] if epoch_ers else None)
            if stop:
                break
    except ExperimentAbort as abort:
        if out_dir:
            (out_dir / "abort.json").write_text(json.dumps(abort.snapshot, indent=2))
        raise
    finally:
        if steps_fh:
            steps_fh.close()

    if cfg.trainer.epochs == 0 or not epoch_ers:
        er, preds, confs = evaluate(eval_model(), corpus.specs[test_mask],
                                    corpus.labels[test_mask], cfg.features.db_floor)
        epoch_ers.append({"epoch": -1, "er": er})
        if er < best_er:
            best_er, best_epoch = er, -1
    final_er, preds, confs = evaluate(eval_model(), corpus.specs[test_mask],
                                      corpus.labels[test_mask], cfg.features.db_floor)

    report = ExperimentReport(
        method=method, seed=cfg.seed, final_er=final_er, best_er=min(best_er, final_er),
        best_epoch=best_epoch, epoch_ers=epoch_ers, n_params=n_params,
        wall_clock_s=time.perf_counter() - t_start, config=cfg.echo(),
        final_mask_rate=(float(np.mean(last_mask_rates[-planner.steps_per_epoch:]))
                         if last_mask_rates else None),
    )
    if out_dir:
        (out_dir / "report.json").write_text(json.dumps(report.to_json_dict(), indent=2))
        _write_predictions(out_dir / "predictions.csv", corpus, test_mask, preds, confs)
    return report


def _stratified_split(train_labels: np.ndarray, train_idx: np.ndarray,
                      fraction: float, seed: int):
    """Index-level stratified split mirroring audio.split_labeled_unlabeled."""
    labeled = []
    unlabeled = []
    for label in np.unique(train_labels):
        pool = train_idx[train_labels == label]
        pool = np.sort(pool)
        n_lab = int(np.floor(fraction * pool.size + 0.5))
        if n_lab == 0:
            raise ConfigurationError(
                f"class {label}: fraction {fraction} rounds to zero labeled clips")
        order = derive_rng(seed, "label-split", int(label)).permutation(pool.size)
        labeled.append(pool[order[:n_lab]])
        unlabeled.append(pool[order[n_lab:]])
    return np.concatenate(labeled), np.concatenate(unlabeled)


def _one_step(trainer, planner: BatchPlanner, corpus: CorpusData, method: str,
              epoch: int, step_in_epoch: int, global_step: int):
    if method == "supervised":
        idx = planner.supervised_batch(epoch, step_in_epoch)
        args = (_tagged(corpus, idx),)
        lead_ids = idx
    elif method == "dct":
        lab_f = _tagged(corpus, planner.labeled_batch(global_step, "labeled-order"))
        lab_g = _tagged(corpus, planner.labeled_batch(global_step, "labeled-order-g"))
        unlabeled = _untagged(corpus, planner.unlabeled_batch(epoch, step_in_epoch))
        args = (lab_f, lab_g, unlabeled)
        lead_ids = lab_f.ids
    else:
        labeled = _tagged(corpus, planner.labeled_batch(global_step))
        unlabeled = _untagged(corpus, planner.unlabeled_batch(epoch, step_in_epoch))
        args = (labeled, unlabeled)
        lead_ids = labeled.ids
    batch_ids = [corpus.ids[i] for i in lead_ids[:8]]
    try:
        report = trainer.step(*args, step=global_step)
    except (ContractError, FloatingPointError) as exc:
        # diagnostic snapshot: what was running when the loss went non-finite
        raise ExperimentAbort(str(exc), {
            "step": global_step,
            "lr": trainer.current_lr(global_step),
            "batch_ids": batch_ids,
        }) from exc
    report.extras["batch_ids"] = batch_ids
    return report


def _save_rotating(out_dir: Path, trainer, cfg: ExperimentConfig, epoch: int,
                   global_step: int, best_er: float, current_er):
    meta = {
        "method": cfg.trainer.method,
        "seed": cfg.seed,
        "epoch": epoch + 1,
        "global_step": global_step,
        "best_er": best_er,
        "opt_t": {name: opt.t for name, opt in trainer.optimizers().items()},
        "config": cfg.echo(),
    }
    arrays = _checkpoint_arrays(trainer)
    last = out_dir / "ckpt_last.bin"
    if last.exists():  # keep the previous one around as well
        shutil.copyfile(last, out_dir / "ckpt_prev.bin")
    save_checkpoint(last, arrays, meta)
    if current_er is not None and current_er <= best_er:
        save_checkpoint(out_dir / "ckpt_best.bin", arrays, meta)


def _write_predictions(path: Path, corpus: CorpusData, test_mask: np.ndarray,
                       preds: np.ndarray, confs: np.ndarray) -> None:
    test_ids = [corpus.ids[i] for i in np.nonzero(test_mask)[0]]
    true = corpus.labels[test_mask]
    with open(path, "w") as fh:
        fh.write("id,true,pred,confidence\n")
        for cid, t, p, c in zip(test_ids, true, preds, confs):
            fh.write(f"{cid},{int(t)},{int(p)},{c:.6f}\n")


# ---------------------------------------------------------------------------
# cross-validation


def cross_validate(cfg: ExperimentConfig, corpus: CorpusData | None = None,
                   n_workers: int = 1) -> ExperimentReport:
    """run_experiment once per fold; aggregates mean and population std.

    ``n_workers > 1`` runs folds as independent processes (each loads its
    own corpus from the manifest); results are identical to serial runs.
    """
    if corpus is None:
        if cfg.manifest_path is None:
            raise ConfigurationError("need a manifest path or a preloaded corpus")
        if n_workers <= 1:
            manifest = read_manifest(cfg.manifest_path)
            corpus = load_corpus(manifest, cfg.features)
            plans = make_folds(manifest)
        else:
            plans = make_folds(read_manifest(cfg.manifest_path))
    else:
        fold_ids = sorted(set(int(f) for f in corpus.folds))
        plans = [FoldPlan(tuple(f for f in fold_ids if f != t), t) for t in fold_ids]

    fold_configs = [_with_fold(cfg, plan.test_fold) for plan in plans]
    if corpus is None and n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            fold_reports = list(pool.map(run_experiment, fold_configs))
    else:
        fold_reports = [run_experiment(fc, corpus=corpus) for fc in fold_configs]
    ers = [r.final_er for r in fold_reports]
    mean = float(np.mean(ers))
    std = float(np.std(ers))  # population convention
    agg = ExperimentReport(
        method=cfg.trainer.method, seed=cfg.seed, final_er=mean, best_er=min(ers),
        best_epoch=-1, epoch_ers=[], n_params=fold_reports[0].n_params,
        wall_clock_s=sum(r.wall_clock_s for r in fold_reports), config=cfg.echo(),
        fold_ers=ers, mean_er=mean, std_er=std,
    )
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cv_report.json").write_text(json.dumps(agg.to_json_dict(), indent=2))
    return agg


def _with_fold(cfg: ExperimentConfig, test_fold: int) -> ExperimentConfig:
    fold_cfg = copy.copy(cfg)
    fold_cfg.test_fold = test_fold
    if cfg.output_dir:
        fold_cfg.output_dir = Path(cfg.output_dir) / f"fold{test_fold}"
    return fold_cfg
