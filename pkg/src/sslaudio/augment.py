"""Signal- and spectrogram-level augmentations, policies, and mixup.

Three augmentations are used during training: Occlusion and
StretchPadCrop act on the raw waveform, CutOutSpec acts on the log-Mel
spectrogram.  A policy bundles the parameter ranges for the "weak" and
"strong" flavors:

    name            parameter   weak            strong
    Occlusion       max_size    [0.25, 0.25]    [0.75, 0.75]
    StretchPadCrop  rate        [0.50, 1.50]    [0.25, 1.75]
    CutOutSpec      scale       [0.10, 0.50]    [0.50, 1.00]

``apply_policy`` picks exactly one of the three uniformly at random,
applying waveform-level ones before feature extraction and CutOutSpec
after.  All functions are deterministic given (input, rng seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .audio import FeatureConfig, LogMelSpectrogram, Waveform, log_mel_batch, stretch_signal
from .errors import ContractError, DegenerateInputError

WEAK = "weak"
STRONG = "strong"

_POLICY_RANGES = {
    WEAK: {"occlusion_max_size": (0.25, 0.25), "stretch_rate": (0.50, 1.50), "cutout_scale": (0.10, 0.50)},
    STRONG: {"occlusion_max_size": (0.75, 0.75), "stretch_rate": (0.25, 1.75), "cutout_scale": (0.50, 1.00)},
}


def _check_interval(lo, hi, name, lo_bound=None, hi_bound=None):
    if lo > hi:
        raise ContractError(f"{name}: interval low {lo} > high {hi}")
    if lo_bound is not None and lo < lo_bound:
        raise ContractError(f"{name}: {lo} below {lo_bound}")
    if hi_bound is not None and hi > hi_bound:
        raise ContractError(f"{name}: {hi} above {hi_bound}")


@dataclass(frozen=True)
class AugmentPolicy:
    """Parameter ranges for one augmentation strength."""

    strength: str = WEAK
    occlusion_max_size: tuple = (0.25, 0.25)
    stretch_rate: tuple = (0.50, 1.50)
    cutout_scale: tuple = (0.10, 0.50)

    def __post_init__(self):
        if self.strength not in (WEAK, STRONG):
            raise ContractError(f"unknown policy strength {self.strength!r}")
        _check_interval(*self.occlusion_max_size, "occlusion_max_size", 0.0, 1.0)
        _check_interval(*self.stretch_rate, "stretch_rate", 1e-6, None)
        _check_interval(*self.cutout_scale, "cutout_scale", 0.0, 1.0)

    @classmethod
    def weak(cls) -> "AugmentPolicy":
        return cls(strength=WEAK, **_POLICY_RANGES[WEAK])

    @classmethod
    def strong(cls) -> "AugmentPolicy":
        return cls(strength=STRONG, **_POLICY_RANGES[STRONG])


@dataclass(frozen=True)
class MixupParams:
    """Beta(alpha, alpha) mixing; asymmetric keeps the first input dominant."""

    alpha: float
    asymmetric: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ContractError("mixup alpha must be positive")


# ---------------------------------------------------------------------------
# waveform-level augmentations


def occlusion_params(n: int, max_size: float, rng: np.random.Generator) -> tuple:
    """(start, length) of the zeroed segment, drawn as occlusion() draws it."""
    frac = rng.uniform(0.0, max_size)
    seg_len = int(round(frac * n))
    start = int(rng.integers(0, n - seg_len + 1))
    return start, seg_len


def occlusion(samples: np.ndarray, max_size: float, rng: np.random.Generator) -> np.ndarray:
    """Zero a random contiguous segment of at most ``max_size * len`` samples."""
    if not (0.0 <= max_size <= 1.0):
        raise ContractError("occlusion max_size must be in [0, 1]")
    out = np.array(samples, copy=True)
    if max_size == 0.0 or out.size == 0:
        return out
    start, seg_len = occlusion_params(out.size, max_size, rng)
    out[start : start + seg_len] = 0.0
    return out


def stretch_pad_crop(samples: np.ndarray, rate_range: tuple, rng: np.random.Generator) -> np.ndarray:
    """Resample by a random rate, then zero-pad or crop back to the input length.

    Rates below 1 shorten the content (tail zero-padded); rates above 1
    lengthen it (cropped to the original length).
    """
    lo, hi = rate_range
    if lo <= 0:
        raise ContractError("stretch rates must be positive")
    rate = float(rng.uniform(lo, hi))
    stretched = stretch_signal(np.asarray(samples, dtype=np.float64), rate)
    n = len(samples)
    out = np.zeros(n, dtype=np.asarray(samples).dtype)
    m = min(n, stretched.size)
    out[:m] = stretched[:m]
    return out


def gaussian_snr(samples: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise at the requested signal-to-noise ratio.

    ``snr_db = inf`` is the documented no-noise sentinel.
    """
    x = np.asarray(samples)
    if math.isinf(snr_db) and snr_db > 0:
        return np.array(x, copy=True)
    p_signal = float(np.mean(np.square(x, dtype=np.float64)))
    if p_signal == 0.0:
        raise DegenerateInputError("cannot set an SNR against an all-zero signal")
    p_noise = p_signal / (10.0 ** (snr_db / 10.0))
    noise = rng.normal(0.0, math.sqrt(p_noise), size=x.shape)
    return (x + noise).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# spectrogram-level augmentation


def cutout_params(shape: tuple, scale_range: tuple, rng: np.random.Generator) -> tuple:
    """(t0, t1, m0, m1) rectangle bounds as cutout_spec() draws them."""
    frames, mels = shape
    lo, hi = scale_range
    h_frac = rng.uniform(lo, hi)
    w_frac = rng.uniform(lo, hi)
    h = int(round(h_frac * frames))
    w = int(round(w_frac * mels))
    t0 = int(rng.integers(0, frames - h + 1))
    m0 = int(rng.integers(0, mels - w + 1))
    return t0, t0 + h, m0, m0 + w


def cutout_spec(values: np.ndarray, scale_range: tuple, rng: np.random.Generator,
                fill_db: float = -80.0) -> np.ndarray:
    """Fill one random rectangle of the spectrogram with the silence level.

    Width and height fractions are drawn independently from scale_range.
    """
    lo, hi = scale_range
    if lo < 0.0 or hi > 1.0:
        raise ContractError("cutout scale range must be within [0, 1]")
    out = np.array(values, copy=True)
    t0, t1, m0, m1 = cutout_params(out.shape, scale_range, rng)
    out[t0:t1, m0:m1] = fill_db
    return out


# ---------------------------------------------------------------------------
# policy application

_AUG_NAMES = ("occlusion", "stretch_pad_crop", "cutout_spec")


def apply_policy(w: Waveform, cfg: FeatureConfig, policy: AugmentPolicy,
                 rng: np.random.Generator) -> LogMelSpectrogram:
    """Apply exactly one policy augmentation (uniform choice) to one clip.

    Waveform-level augmentations run before feature extraction, CutOutSpec
    on the extracted spectrogram.
    """
    samples, cut = _draw_signal_stage(w.samples, policy, rng)
    values = log_mel_batch(samples, w.sample_rate, cfg)
    if cut is not None:
        t0, t1, m0, m1 = _cut_bounds(values.shape, cut, rng)
        values[t0:t1, m0:m1] = cfg.db_floor
    return LogMelSpectrogram(values, cfg.hop_length, w.sample_rate)


def _draw_signal_stage(samples: np.ndarray, policy: AugmentPolicy,
                       rng: np.random.Generator):
    """Draw the augmentation choice; run it now if it is waveform-level.

    Returns (possibly augmented samples, cutout scale range or None); the
    spectrogram stage is deferred so batched feature extraction can run in
    between.
    """
    choice = int(rng.integers(0, len(_AUG_NAMES)))
    if choice == 0:
        return occlusion(samples, policy.occlusion_max_size[1], rng), None
    if choice == 1:
        return stretch_pad_crop(samples, policy.stretch_rate, rng), None
    return samples, policy.cutout_scale


def _cut_bounds(shape: tuple, scale_range: tuple, rng: np.random.Generator) -> tuple:
    return cutout_params(shape, scale_range, rng)


# ---------------------------------------------------------------------------
# mixup


def draw_mixup_lambda(params: MixupParams, rng: np.random.Generator) -> float:
    lam = float(rng.beta(params.alpha, params.alpha))
    if params.asymmetric:
        lam = max(lam, 1.0 - lam)
    return lam


def mixup(x1: np.ndarray, x2: np.ndarray, y1: np.ndarray, y2: np.ndarray,
          params: MixupParams, rng: np.random.Generator,
          lam: float | None = None) -> tuple:
    """Convex combination of two samples (or stacked batches) and their labels.

    One lambda ~ Beta(alpha, alpha) is drawn per call; the asymmetric
    variant replaces it with max(lambda, 1 - lambda) so the first argument
    stays the dominant component.  Returns (x_mix, y_mix, lambda).
    """
    x1 = np.asarray(x1)
    x2 = np.asarray(x2)
    if x1.shape != x2.shape:
        raise ContractError(f"mixup shape mismatch: {x1.shape} vs {x2.shape}")
    y1 = np.asarray(y1)
    y2 = np.asarray(y2)
    if y1.shape != y2.shape:
        raise ContractError(f"mixup label shape mismatch: {y1.shape} vs {y2.shape}")
    if lam is None:
        lam = draw_mixup_lambda(params, rng)
    x_mix = lam * x1 + (1.0 - lam) * x2
    y_mix = lam * y1 + (1.0 - lam) * y2
    return x_mix.astype(x1.dtype, copy=False), y_mix.astype(y1.dtype, copy=False), lam
