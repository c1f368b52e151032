"""Training-step algorithms: supervised, Mean Teacher, Deep Co-Training,
MixMatch, FixMatch, and their mixup variants.

Every trainer splits one step into two stages:

* ``prepare`` draws all randomness (augmentations, mixup coefficients,
  partners), runs the gradient-free passes (teacher predictions,
  pseudo-labels, adversarial examples) and freezes the results into a
  ``StepInputs`` record;
* ``losses`` builds the differentiable loss graph from the frozen record.

The split keeps each loss a pure function of the parameters given the
record, which is what both the optimizer step and the finite-difference
oracle differentiate.  All random streams derive from (seed, purpose,
step, clip id), so augmentations of the labeled batch are bit-identical
across trainers that share a policy; with the unsupervised weight forced
to zero every SSL step reduces exactly to its supervised counterpart.

Default hyperparameters per method (batch size, learning rate, warm-up
length in epochs, total epochs, mixup alpha):

    supervised        256  0.001    -  300     -
    supervised+mixup  256  0.001    -  300  0.40
    mt                 64  0.001   50  200     -    (+mixup 0.40)
    dct                64  0.0005 160  300     -    (+mixup 0.40)
    mm                256  0.001    -  300  0.75    (mixup built in)
    fm                256  0.001    -  300     -    (+mixup 0.75)

MT and DCT decay the learning rate with the cosine rule and ramp their
auxiliary weights with the exponential sigmoid ramp; MixMatch ramps
linearly over the first 16k iterations; FixMatch uses a constant weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .augment import AugmentPolicy, MixupParams, _cut_bounds, _draw_signal_stage, gaussian_snr, mixup
from .audio import FeatureConfig, log_mel_batch
from .errors import ConfigurationError, ContractError
from .nn import (
    Adam,
    EmaWeights,
    backward,
    cosine_lr,
    cross_entropy,
    fgsm,
    js_divergence,
    mse,
    no_grad,
    one_hot,
    softmax,
    softmax_np,
)
from .nn.functional import PROB_EPS
from .nn.layers import frozen_bn_stats
from .nn.tensor import clamp_min, log, mul, tmean, tsum
from .rng import derive_rng

METHODS = ("supervised", "mt", "dct", "mm", "fm")
SUPERVISED_POLICIES = ("none", "mixup", "weak", "weak+mixup", "strong", "strong+mixup")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainerConfig:
    method: str = "supervised"
    use_mixup: bool = False
    batch_size: int = 256
    lr: float = 0.001
    warmup_len: int = 0           # epochs; 0 = no ramped auxiliary terms
    epochs: int = 300
    mixup_alpha: float = 0.0      # 0 when mixup is unused
    lambda_cc_max: float = 1.0
    lambda_cot_max: float = 1.0
    lambda_diff_max: float = 0.5
    lambda_u_max: float = 1.0
    k_augments: int = 2
    temperature: float = 0.5
    threshold: float = 0.8
    alpha_ema: float = 0.999
    snr_db: float = 15.0
    fgsm_epsilon: float = 0.02
    linear_ramp_len: int = 16000  # iterations, MixMatch lambda_u ramp
    lr_schedule: str = "constant"  # "constant" | "cosine"
    printed_ramp: bool = False    # paper-fidelity variant of the ramp formula
    supervised_policy: str = "none"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.supervised_policy not in SUPERVISED_POLICIES:
            raise ConfigurationError(f"unknown supervised policy {self.supervised_policy!r}")
        if not (0.0 < self.temperature <= 1.0):
            raise ConfigurationError("temperature must be in (0, 1]")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigurationError("threshold must be in (0, 1)")
        if not (0.0 <= self.alpha_ema < 1.0):
            raise ConfigurationError("alpha_ema must be in [0, 1)")
        if self.use_mixup and self.mixup_alpha <= 0:
            raise ConfigurationError("mixup requires a positive alpha")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}")

    @classmethod
    def defaults_for(cls, method: str, use_mixup: bool = False) -> "TrainerConfig":
        """Per-method default hyperparameters (see module docstring table)."""
        if method == "supervised":
            return cls(method=method, use_mixup=use_mixup, batch_size=256, lr=0.001,
                       epochs=300, mixup_alpha=0.4 if use_mixup else 0.0,
                       supervised_policy="mixup" if use_mixup else "none")
        if method == "mt":
            return cls(method=method, use_mixup=use_mixup, batch_size=64, lr=0.001,
                       warmup_len=50, epochs=200, lr_schedule="cosine",
                       mixup_alpha=0.40 if use_mixup else 0.0)
        if method == "dct":
            return cls(method=method, use_mixup=use_mixup, batch_size=64, lr=0.0005,
                       warmup_len=160, epochs=300, lr_schedule="cosine",
                       mixup_alpha=0.40 if use_mixup else 0.0)
        if method == "mm":
            return cls(method=method, use_mixup=use_mixup, batch_size=256, lr=0.001,
                       epochs=300, mixup_alpha=0.75 if use_mixup else 0.0)
        if method == "fm":
            return cls(method=method, use_mixup=use_mixup, batch_size=256, lr=0.001,
                       epochs=300, mixup_alpha=0.75 if use_mixup else 0.0)
        raise ConfigurationError(f"unknown method {method!r}")

    def replace(self, **kw) -> "TrainerConfig":
        current = {f.name: getattr(self, f.name) for f in fields(self)}
        current.update(kw)
        return TrainerConfig(**current)


@dataclass
class StepReport:
    step: int
    method: str
    losses: dict
    lambdas: dict
    lr: float
    mask_rate: float | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.losses.items():
            if not math.isfinite(value):
                raise ContractError(f"non-finite loss {name}={value}")
        if self.mask_rate is not None and not (0.0 <= self.mask_rate <= 1.0):
            raise ContractError(f"mask rate {self.mask_rate} outside [0, 1]")

    def to_json_dict(self) -> dict:
        out = {"step": self.step, "method": self.method, "losses": self.losses,
               "lambdas": self.lambdas, "lr": self.lr}
        if self.mask_rate is not None:
            out["mask_rate"] = self.mask_rate
        out.update(self.extras)
        return out


# ---------------------------------------------------------------------------
# schedules


def ramp_up(t: float, warmup_len: float, lambda_max: float, printed: bool = False) -> float:
    """Exponential sigmoid ramp: lambda_max * exp(-5 (1 - min(t/wl, 1))^2).

    Starts at lambda_max * e^-5, saturates exactly at lambda_max for
    t >= warmup_len, and never decreases.  ``printed=True`` selects the
    complementary form lambda_max * (1 - exp(-5 (1 - t/wl)^2)) for
    fidelity experiments; note that variant is maximal at t = 0.
    """
    if warmup_len <= 0:
        raise ContractError("warmup_len must be positive")
    if t < 0:
        raise ContractError("t must be >= 0")
    frac = min(t / warmup_len, 1.0)
    core = math.exp(-5.0 * (1.0 - frac) ** 2)
    return lambda_max * (1.0 - core) if printed else lambda_max * core


def linear_ramp(iteration: int, ramp_len: int, lambda_max: float) -> float:
    """lambda_max * min(iteration / ramp_len, 1)."""
    if ramp_len <= 0:
        raise ContractError("ramp_len must be positive")
    return lambda_max * min(iteration / ramp_len, 1.0)


def sharpen(p: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature sharpening: p_i^(1/T) / sum_j p_j^(1/T) (row-wise)."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    p = np.asarray(p, dtype=np.float64)
    powered = np.power(np.maximum(p, 0.0), 1.0 / temperature)
    return (powered / powered.sum(axis=-1, keepdims=True)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# batches


@dataclass
class TaggedBatch:
    """Labeled minibatch: waveforms, clean spectrograms, one-hot targets."""

    waveforms: np.ndarray   # [B, n_samples] float32
    specs: np.ndarray       # [B, frames, mels] float32, dB
    targets: np.ndarray     # [B, n_classes] float32 one-hot (or soft)
    ids: np.ndarray         # [B] int64 manifest indices

    def __len__(self):
        return self.waveforms.shape[0]


@dataclass
class UnlabeledBatch:
    waveforms: np.ndarray
    specs: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return self.waveforms.shape[0]


# ---------------------------------------------------------------------------
# shared helpers


def normalize_db(spec: np.ndarray, db_floor: float = -80.0) -> np.ndarray:
    """Map dB values in [db_floor, 0] onto [0, 1] for the network input."""
    return ((spec - db_floor) / -db_floor).astype(np.float32, copy=False)


def augment_batch(waveforms: np.ndarray, ids: np.ndarray, policy: AugmentPolicy,
                  feat: FeatureConfig, seed: int, purpose: str, step: int,
                  variant: int = 0) -> np.ndarray:
    """Apply one policy augmentation per clip; returns dB spectrograms.

    Per-clip rng streams are keyed by (seed, purpose, step, clip id,
    variant), so results do not depend on batch composition and are
    bit-identical to calling ``augment.apply_policy`` clip by clip.
    """
    out_waves = np.empty_like(waveforms)
    deferred = []
    rngs = []
    for i in range(waveforms.shape[0]):
        rng = derive_rng(seed, purpose, step, int(ids[i]), variant)
        aug, cut = _draw_signal_stage(waveforms[i], policy, rng)
        out_waves[i] = aug
        deferred.append(cut)
        rngs.append(rng)
    specs = log_mel_batch(out_waves, feat.target_sample_rate, feat)
    for i, cut in enumerate(deferred):
        if cut is not None:
            t0, t1, m0, m1 = _cut_bounds(specs[i].shape, cut, rngs[i])
            specs[i, t0:t1, m0:m1] = feat.db_floor
    return specs


def shuffled_pair(x: np.ndarray, y: np.ndarray, rng: np.random.Generator):
    perm = rng.permutation(x.shape[0])
    return x[perm], y[perm]


def batch_mixup(x: np.ndarray, y: np.ndarray, x2: np.ndarray, y2: np.ndarray,
                params: MixupParams, rng: np.random.Generator):
    return mixup(x, x2, y, y2, params, rng)


# ---------------------------------------------------------------------------
# trainers


class TrainerBase:
    """Owns the model(s), optimizer and schedule state for one method."""

    method = "base"

    def __init__(self, cfg: TrainerConfig, feat: FeatureConfig, n_classes: int,
                 seed: int, steps_per_epoch: int):
        self.cfg = cfg
        self.feat = feat
        self.n_classes = n_classes
        self.seed = seed
        self.steps_per_epoch = max(1, steps_per_epoch)

    # subclasses define: prepare(...), losses(prep), models(), apply(...)

    def models(self) -> dict:
        raise NotImplementedError

    def optimizers(self) -> dict:
        raise NotImplementedError

    def current_lr(self, step: int) -> float:
        if self.cfg.lr_schedule == "cosine":
            epoch = min(step // self.steps_per_epoch + 1, self.cfg.epochs)
            return cosine_lr(epoch, self.cfg.epochs, self.cfg.lr)
        return self.cfg.lr

    def epoch_frac(self, step: int) -> float:
        return step / self.steps_per_epoch

    def _norm(self, spec: np.ndarray) -> np.ndarray:
        return normalize_db(spec, self.feat.db_floor)


class SupervisedTrainer(TrainerBase):
    """Plain cross-entropy training with a configurable augmentation policy.

    Policies: none, mixup, weak, weak+mixup, strong, strong+mixup.  Mixup
    (symmetric, alpha 0.4 by default) pairs the batch with its own seeded
    shuffle after the weak/strong augmentation when combined.
    """

    method = "supervised"

    def __init__(self, cfg, feat, n_classes, seed, steps_per_epoch, model):
        super().__init__(cfg, feat, n_classes, seed, steps_per_epoch)
        self.model = model
        self.optimizer = Adam(list(model.named_parameters()), lr=cfg.lr,
                              weight_decay=cfg.weight_decay)

    def models(self):
        return {"model": self.model}

    def optimizers(self):
        return {"model": self.optimizer}

    def prepare(self, labeled: TaggedBatch, step: int) -> dict:
        policy_name = self.cfg.supervised_policy
        x = labeled.specs
        if "weak" in policy_name:
            x = augment_batch(labeled.waveforms, labeled.ids, AugmentPolicy.weak(),
                              self.feat, self.seed, "aug-labeled", step)
        elif "strong" in policy_name:
            x = augment_batch(labeled.waveforms, labeled.ids, AugmentPolicy.strong(),
                              self.feat, self.seed, "aug-labeled", step)
        x = self._norm(x)
        y = labeled.targets
        lam = None
        if "mixup" in policy_name:
            alpha = self.cfg.mixup_alpha if self.cfg.mixup_alpha > 0 else 0.4
            rng = derive_rng(self.seed, "mixup-labeled", step)
            x2, y2 = shuffled_pair(x, y, rng)
            x, y, lam = mixup(x, x2, y, y2, MixupParams(alpha), rng)
        return {"x": x, "y": y, "lambda_mix": lam}

    def losses(self, prep: dict) -> dict:
        sup = cross_entropy(softmax(self.model(prep["x"])), prep["y"])
        return {"sup": sup, "total": sup}

    def step(self, labeled: TaggedBatch, unlabeled=None, step: int = 0) -> StepReport:
        prep = self.prepare(labeled, step)
        self.model.train()
        self.model.zero_grad()
        parts = self.losses(prep)
        backward(parts["total"])
        self.optimizer.lr = self.current_lr(step)
        self.optimizer.step()
        return StepReport(step, self.method,
                          {k: v.item() for k, v in parts.items()},
                          {}, self.optimizer.lr)


class MeanTeacherTrainer(TrainerBase):
    """Student/teacher consistency training.

    The student minimizes CE on labeled data plus an MSE consistency term
    against an EMA teacher evaluated on perturbed inputs: Gaussian noise
    at a fixed SNR in the base variant, teacher-side mixup (labeled and
    unlabeled mixed separately, noise disabled) in the mixup variant.
    The consistency weight follows the sigmoid ramp; after each optimizer
    step the teacher tracks the student with smoothing ``alpha_ema``.
    """

    method = "mt"

    def __init__(self, cfg, feat, n_classes, seed, steps_per_epoch, model):
        super().__init__(cfg, feat, n_classes, seed, steps_per_epoch)
        self.model = model
        self.teacher = EmaWeights(model, cfg.alpha_ema)
        self.optimizer = Adam(list(model.named_parameters()), lr=cfg.lr,
                              weight_decay=cfg.weight_decay)

    def models(self):
        return {"model": self.model, "teacher": self.teacher.model}

    def optimizers(self):
        return {"model": self.optimizer}

    def lambda_cc(self, step: int) -> float:
        if self.cfg.warmup_len <= 0:
            return self.cfg.lambda_cc_max
        return ramp_up(self.epoch_frac(step), self.cfg.warmup_len,
                       self.cfg.lambda_cc_max, self.cfg.printed_ramp)

    def prepare(self, labeled: TaggedBatch, unlabeled: UnlabeledBatch, step: int) -> dict:
        x_s = self._norm(labeled.specs)
        x_u = self._norm(unlabeled.specs)
        if self.cfg.use_mixup:
            # Teacher-side mixup, applied separately per batch; the
            # consistency targets stay aligned with the unmixed student
            # inputs, so both batches join the consistency term.
            params = MixupParams(self.cfg.mixup_alpha, asymmetric=False)
            rng_s = derive_rng(self.seed, "mt-mix-labeled", step)
            rng_u = derive_rng(self.seed, "mt-mix-unlabeled", step)
            t_in_s = mt_mixup_perturb(x_s, params, rng_s)
            t_in_u = mt_mixup_perturb(x_u, params, rng_u)
            teacher_in = np.concatenate([t_in_s, t_in_u], axis=0)
            student_cons_in = np.concatenate([x_s, x_u], axis=0)
        else:
            noisy = np.empty_like(unlabeled.waveforms)
            for i in range(len(unlabeled)):
                rng = derive_rng(self.seed, "mt-noise", step, int(unlabeled.ids[i]))
                noisy[i] = gaussian_snr(unlabeled.waveforms[i], self.cfg.snr_db, rng)
            teacher_in = self._norm(
                log_mel_batch(noisy, self.feat.target_sample_rate, self.feat))
            student_cons_in = x_u
        self.teacher.model.train()
        with no_grad(), frozen_bn_stats():
            teacher_probs = softmax_np(self.teacher.model(teacher_in).data)
        return {"x_s": x_s, "y_s": labeled.targets, "cons_in": student_cons_in,
                "teacher_probs": teacher_probs, "lambda_cc": self.lambda_cc(step)}

    def losses(self, prep: dict) -> dict:
        sup = cross_entropy(softmax(self.model(prep["x_s"])), prep["y_s"])
        cons = mse(softmax(self.model(prep["cons_in"])), prep["teacher_probs"])
        total = sup + prep["lambda_cc"] * cons
        return {"sup": sup, "cons": cons, "total": total}

    def step(self, labeled: TaggedBatch, unlabeled: UnlabeledBatch, step: int) -> StepReport:
        prep = self.prepare(labeled, unlabeled, step)
        self.model.train()
        self.model.zero_grad()
        parts = self.losses(prep)
        backward(parts["total"])
        self.optimizer.lr = self.current_lr(step)
        self.optimizer.step()
        self.teacher.update(self.model)
        return StepReport(step, self.method,
                          {k: v.item() for k, v in parts.items()},
                          {"lambda_cc": prep["lambda_cc"]}, self.optimizer.lr)


def mt_mixup_perturb(x: np.ndarray, params: MixupParams, rng: np.random.Generator) -> np.ndarray:
    """Teacher input for MT+mixup: the batch mixed with its own shuffle.

    A single-sample batch passes through unchanged (no partner exists).
    """
    if x.shape[0] < 2:
        return np.array(x, copy=True)
    perm = rng.permutation(x.shape[0])
    dummy = np.zeros((x.shape[0], 1), dtype=x.dtype)
    mixed, _, _ = mixup(x, x[perm], dummy, dummy, params, rng)
    return mixed


class DeepCoTrainingTrainer(TrainerBase):
    """Two collaborating networks trained jointly.

    Each model gets its own independently sampled labeled batch; both see
    the same unlabeled batch.  The loss adds (1) per-model supervised CE,
    (2) the Jensen-Shannon divergence between their unlabeled predictions
    and (3) a view-difference term built from FGSM adversarial examples:
    each model generates adversarial variants of its own labeled batch
    plus the shared unlabeled batch (targets: its own predictions), which
    are then classified by the other model.  Both auxiliary weights ramp
    with the sigmoid rule.  In the mixup variant the shared unlabeled
    batch is replaced by a mix with its own shuffle before any use.
    """

    method = "dct"

    def __init__(self, cfg, feat, n_classes, seed, steps_per_epoch, model_f, model_g):
        super().__init__(cfg, feat, n_classes, seed, steps_per_epoch)
        self.model_f = model_f
        self.model_g = model_g
        named = [(f"f.{n}", p) for n, p in model_f.named_parameters()]
        named += [(f"g.{n}", p) for n, p in model_g.named_parameters()]
        self.optimizer = Adam(named, lr=cfg.lr, weight_decay=cfg.weight_decay)

    def models(self):
        return {"model_f": self.model_f, "model_g": self.model_g}

    def optimizers(self):
        return {"joint": self.optimizer}

    def lambdas(self, step: int) -> dict:
        t = self.epoch_frac(step)
        if self.cfg.warmup_len <= 0:
            return {"lambda_cot": self.cfg.lambda_cot_max,
                    "lambda_diff": self.cfg.lambda_diff_max}
        return {
            "lambda_cot": ramp_up(t, self.cfg.warmup_len, self.cfg.lambda_cot_max,
                                  self.cfg.printed_ramp),
            "lambda_diff": ramp_up(t, self.cfg.warmup_len, self.cfg.lambda_diff_max,
                                   self.cfg.printed_ramp),
        }

    def prepare(self, labeled_f: TaggedBatch, labeled_g: TaggedBatch,
                unlabeled: UnlabeledBatch, step: int) -> dict:
        x1 = self._norm(labeled_f.specs)
        x2 = self._norm(labeled_g.specs)
        x_u = self._norm(unlabeled.specs)
        if self.cfg.use_mixup:
            rng = derive_rng(self.seed, "dct-mix-unlabeled", step)
            x_u = dct_mixup(x_u, MixupParams(self.cfg.mixup_alpha, asymmetric=False), rng)
        big1 = np.concatenate([x1, x_u], axis=0)
        big2 = np.concatenate([x2, x_u], axis=0)
        self.model_f.train()
        self.model_g.train()
        with no_grad(), frozen_bn_stats():
            tgt1 = softmax_np(self.model_f(big1).data)
            tgt2 = softmax_np(self.model_g(big2).data)
        with frozen_bn_stats():
            adv1 = fgsm(self.model_f, big1, tgt1, self.cfg.fgsm_epsilon)
            adv2 = fgsm(self.model_g, big2, tgt2, self.cfg.fgsm_epsilon)
        return {"x1": x1, "y1": labeled_f.targets, "x2": x2, "y2": labeled_g.targets,
                "x_u": x_u, "big1": big1, "big2": big2, "adv1": adv1, "adv2": adv2,
                **self.lambdas(step)}

    def losses(self, prep: dict) -> dict:
        f, g = self.model_f, self.model_g
        sup = cross_entropy(softmax(f(prep["x1"])), prep["y1"]) + \
            cross_entropy(softmax(g(prep["x2"])), prep["y2"])
        cot = js_divergence(softmax(f(prep["x_u"])), softmax(g(prep["x_u"])))
        diff = cross_entropy(softmax(f(prep["big1"])), softmax(g(prep["adv1"]))) + \
            cross_entropy(softmax(g(prep["big2"])), softmax(f(prep["adv2"])))
        total = sup + prep["lambda_cot"] * cot + prep["lambda_diff"] * diff
        return {"sup": sup, "cot": cot, "diff": diff, "total": total}

    def step(self, labeled_f: TaggedBatch, labeled_g: TaggedBatch,
             unlabeled: UnlabeledBatch, step: int) -> StepReport:
        prep = self.prepare(labeled_f, labeled_g, unlabeled, step)
        self.model_f.train()
        self.model_g.train()
        self.model_f.zero_grad()
        self.model_g.zero_grad()
        parts = self.losses(prep)
        backward(parts["total"])
        self.optimizer.lr = self.current_lr(step)
        self.optimizer.step()
        return StepReport(step, self.method,
                          {k: v.item() for k, v in parts.items()},
                          {"lambda_cot": prep["lambda_cot"],
                           "lambda_diff": prep["lambda_diff"]}, self.optimizer.lr)


def dct_mixup(x_u: np.ndarray, params: MixupParams, rng: np.random.Generator) -> np.ndarray:
    """Mix the shared unlabeled batch with its own shuffle (both models
    must then receive this identical mixed batch)."""
    if x_u.shape[0] < 2:
        return np.array(x_u, copy=True)
    perm = rng.permutation(x_u.shape[0])
    dummy = np.zeros((x_u.shape[0], 1), dtype=x_u.dtype)
    mixed, _, _ = mixup(x_u, x_u[perm], dummy, dummy, params, rng)
    return mixed


class MixMatchTrainer(TrainerBase):
    """MixMatch: averaged-and-sharpened pseudo-labels plus W-set mixup.

    Per step: weak-augment the labeled batch once and the unlabeled batch
    k times; pseudo-labels are the softmax predictions averaged over the
    k variants and sharpened at temperature T.  All augmented samples are
    concatenated and shuffled into a W set; labeled and unlabeled parts
    are then mixed (asymmetric mixup, so each sample stays dominant over
    its W partner) against consecutive W slices, labels mixed likewise.
    Loss: CE on the mixed labeled batch plus a linearly ramped CE between
    mixed unlabeled predictions and mixed pseudo-labels.  Without
    ``use_mixup`` the W step is skipped (targets stay sharp).
    """

    method = "mm"

    def __init__(self, cfg, feat, n_classes, seed, steps_per_epoch, model):
        super().__init__(cfg, feat, n_classes, seed, steps_per_epoch)
        self.model = model
        self.optimizer = Adam(list(model.named_parameters()), lr=cfg.lr,
                              weight_decay=cfg.weight_decay)

    def models(self):
        return {"model": self.model}

    def optimizers(self):
        return {"model": self.optimizer}

    def lambda_u(self, step: int) -> float:
        return linear_ramp(step, self.cfg.linear_ramp_len, self.cfg.lambda_u_max)

    def prepare(self, labeled: TaggedBatch, unlabeled: UnlabeledBatch, step: int) -> dict:
        if len(labeled) != len(unlabeled):
            raise ContractError(
                f"mixmatch requires equal batch halves, got {len(labeled)}/{len(unlabeled)}")
        k = self.cfg.k_augments
        weak = AugmentPolicy.weak()
        x_s = self._norm(augment_batch(labeled.waveforms, labeled.ids, weak,
                                       self.feat, self.seed, "aug-labeled", step))
        variants = [
            self._norm(augment_batch(unlabeled.waveforms, unlabeled.ids, weak,
                                     self.feat, self.seed, "aug-unlabeled", step, variant=v))
            for v in range(k)
        ]
        x_u_all = np.concatenate(variants, axis=0)
        self.model.train()
        with no_grad(), frozen_bn_stats():
            probs = softmax_np(self.model(x_u_all).data)
        guessed = probs.reshape(k, len(unlabeled), -1).mean(axis=0)
        pseudo = sharpen(guessed, self.cfg.temperature)
        pseudo_all = np.tile(pseudo, (k, 1))
        y_s = labeled.targets

        if self.cfg.use_mixup:
            w_x = np.concatenate([x_s, x_u_all], axis=0)
            w_y = np.concatenate([y_s, pseudo_all], axis=0)
            rng = derive_rng(self.seed, "mm-wset", step)
            perm = rng.permutation(w_x.shape[0])
            w_x, w_y = w_x[perm], w_y[perm]
            params = MixupParams(self.cfg.mixup_alpha, asymmetric=True)
            n_s = x_s.shape[0]
            x_s_mix, y_s_mix, lam_s = mixup(x_s, w_x[:n_s], y_s, w_y[:n_s], params, rng)
            x_u_mix, y_u_mix, lam_u = mixup(x_u_all, w_x[n_s:], pseudo_all, w_y[n_s:],
                                            params, rng)
            lambdas = {"lambda_mix_s": lam_s, "lambda_mix_u": lam_u}
        else:
            x_s_mix, y_s_mix = x_s, y_s
            x_u_mix, y_u_mix = x_u_all, pseudo_all
            lambdas = {}
        return {"x_s": x_s_mix, "y_s": y_s_mix, "x_u": x_u_mix, "y_u": y_u_mix,
                "lambda_u": self.lambda_u(step), "mix": lambdas}

    def losses(self, prep: dict) -> dict:
        sup = cross_entropy(softmax(self.model(prep["x_s"])), prep["y_s"])
        unsup = cross_entropy(softmax(self.model(prep["x_u"])), prep["y_u"])
        total = sup + prep["lambda_u"] * unsup
        return {"sup": sup, "unsup": unsup, "total": total}

    def step(self, labeled: TaggedBatch, unlabeled: UnlabeledBatch, step: int) -> StepReport:
        prep = self.prepare(labeled, unlabeled, step)
        self.model.train()
        self.model.zero_grad()
        parts = self.losses(prep)
        backward(parts["total"])
        self.optimizer.lr = self.current_lr(step)
        self.optimizer.step()
        return StepReport(step, self.method,
                          {k: v.item() for k, v in parts.items()},
                          {"lambda_u": prep["lambda_u"], **prep["mix"]},
                          self.optimizer.lr)


class FixMatchTrainer(TrainerBase):
    """FixMatch: confidence-masked pseudo-labels from weak augmentations.

    Per step: CE on the weakly augmented labeled batch; pseudo-labels are
    the argmax of a gradient-free pass over the weakly augmented
    unlabeled batch, kept only where the max confidence exceeds the
    threshold.  The masked CE is evaluated on a strongly augmented
    variant and added with constant weight (no warm-up).  The mixup
    variant shuffles weak-labeled and strong-unlabeled samples into one W
    set and mixes both parts asymmetrically, MixMatch style; pseudo-label
    decisions and the mask always come from the unmixed weak pass.
    """

    method = "fm"

    def __init__(self, cfg, feat, n_classes, seed, steps_per_epoch, model):
        super().__init__(cfg, feat, n_classes, seed, steps_per_epoch)
        self.model = model
        self.optimizer = Adam(list(model.named_parameters()), lr=cfg.lr,
                              weight_decay=cfg.weight_decay)

    def models(self):
        return {"model": self.model}

    def optimizers(self):
        return {"model": self.optimizer}

    def prepare(self, labeled: TaggedBatch, unlabeled: UnlabeledBatch, step: int) -> dict:
        weak = AugmentPolicy.weak()
        strong = AugmentPolicy.strong()
        x_s = self._norm(augment_batch(labeled.waveforms, labeled.ids, weak,
                                       self.feat, self.seed, "aug-labeled", step))
        x_u_weak = self._norm(augment_batch(unlabeled.waveforms, unlabeled.ids, weak,
                                            self.feat, self.seed, "aug-unlabeled", step))
        x_u_strong = self._norm(augment_batch(unlabeled.waveforms, unlabeled.ids, strong,
                                              self.feat, self.seed, "aug-unlabeled-strong",
                                              step))
        self.model.train()
        with no_grad(), frozen_bn_stats():
            conf = softmax_np(self.model(x_u_weak).data)
        max_conf = conf.max(axis=1)
        mask = (max_conf > self.cfg.threshold).astype(np.float32)
        pseudo = one_hot(conf.argmax(axis=1), self.n_classes)
        y_s = labeled.targets

        mix_lambdas = {}
        if self.cfg.use_mixup:
            w_x = np.concatenate([x_s, x_u_strong], axis=0)
            w_y = np.concatenate([y_s, pseudo], axis=0)
            rng = derive_rng(self.seed, "fm-wset", step)
            perm = rng.permutation(w_x.shape[0])
            w_x, w_y = w_x[perm], w_y[perm]
            params = MixupParams(self.cfg.mixup_alpha, asymmetric=True)
            n_s = x_s.shape[0]
            x_s, y_s, lam_s = mixup(x_s, w_x[:n_s], y_s, w_y[:n_s], params, rng)
            x_u_strong, pseudo, lam_u = mixup(x_u_strong, w_x[n_s:], pseudo, w_y[n_s:],
                                              params, rng)
            mix_lambdas = {"lambda_mix_s": lam_s, "lambda_mix_u": lam_u}
        return {"x_s": x_s, "y_s": y_s, "x_u": x_u_strong, "y_u": pseudo,
                "mask": mask, "max_conf": max_conf, "mix": mix_lambdas,
                "lambda_u": self.cfg.lambda_u_max}

    def losses(self, prep: dict) -> dict:
        sup = cross_entropy(softmax(self.model(prep["x_s"])), prep["y_s"])
        probs_u = softmax(self.model(prep["x_u"]))
        per_sample = -tsum(mul(prep["y_u"], log(clamp_min(probs_u, PROB_EPS))), axis=-1)
        unsup = tmean(mul(per_sample, prep["mask"]))
        total = sup + prep["lambda_u"] * unsup
        return {"sup": sup, "unsup": unsup, "total": total}

    def step(self, labeled: TaggedBatch, unlabeled: UnlabeledBatch, step: int) -> StepReport:
        prep = self.prepare(labeled, unlabeled, step)
        self.model.train()
        self.model.zero_grad()
        parts = self.losses(prep)
        backward(parts["total"])
        self.optimizer.lr = self.current_lr(step)
        self.optimizer.step()
        mask_rate = float(prep["mask"].mean())
        return StepReport(step, self.method,
                          {k: v.item() for k, v in parts.items()},
                          {"lambda_u": prep["lambda_u"], **prep["mix"]},
                          self.optimizer.lr, mask_rate=mask_rate,
                          extras={"max_conf": [float(c) for c in prep["max_conf"]]})
