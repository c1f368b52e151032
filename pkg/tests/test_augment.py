"""Augmentations: occlusion, stretch, cutout, noise, policies, mixup."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sslaudio.audio import FeatureConfig, Waveform, log_mel, stretch_signal
from sslaudio.augment import (
    AugmentPolicy,
    MixupParams,
    apply_policy,
    cutout_params,
    cutout_spec,
    draw_mixup_lambda,
    gaussian_snr,
    mixup,
    occlusion,
    occlusion_params,
    stretch_pad_crop,
)
from sslaudio.errors import ContractError, DegenerateInputError
from sslaudio.rng import derive_rng


def tone(n=16000, freq=440.0, rate=16000, amp=0.5):
    return (amp * np.sin(2 * np.pi * freq * np.arange(n) / rate)).astype(np.float64)


FEAT = FeatureConfig(n_mels=32, window_size=512, hop_length=512,
                     target_sample_rate=16000, target_duration=1.0)


class TestOcclusion:
    def test_zero_max_size_is_identity(self):
        x = tone()
        out = occlusion(x, 0.0, derive_rng(0, "t"))
        np.testing.assert_array_equal(out, x)

    def test_full_span_zeroes_everything(self):
        class ForcedRng:
            def uniform(self, lo, hi):
                return hi

            def integers(self, lo, hi):
                return lo

        out = occlusion(tone(), 1.0, ForcedRng())
        np.testing.assert_array_equal(out, 0.0)

    def test_mask_reconstructable_from_rng_trace(self):
        """Re-deriving (start, length) with the same seed explains exactly
        which samples were zeroed."""
        x = tone()
        for seed in range(5):
            out = occlusion(x, 0.4, derive_rng(seed, "occ"))
            start, seg = occlusion_params(x.size, 0.4, derive_rng(seed, "occ"))
            assert seg <= 0.4 * x.size
            np.testing.assert_array_equal(out[start : start + seg], 0.0)
            mask = np.ones(x.size, bool)
            mask[start : start + seg] = False
            np.testing.assert_array_equal(out[mask], x[mask])

    def test_bad_max_size(self):
        with pytest.raises(ContractError):
            occlusion(tone(), 1.5, derive_rng(0, "t"))


class TestStretchPadCrop:
    def test_unit_rate_preserves_content(self):
        x = tone()
        out = stretch_pad_crop(x, (1.0, 1.0), derive_rng(0, "s"))
        assert out.shape == x.shape
        np.testing.assert_allclose(out, x, atol=1e-3)

    def test_down_rate_pads_tail_with_zeros(self):
        """Rate 0.5 halves the content; the remainder is exact zero padding."""
        class HalfRng:
            def uniform(self, lo, hi):
                return 0.5

        x = tone()
        out = stretch_pad_crop(x, (0.5, 0.5), HalfRng())
        assert out.shape == x.shape
        np.testing.assert_array_equal(out[8000:], 0.0)
        assert np.abs(out[:8000]).max() > 0.1

    def test_up_rate_crops_to_original_length(self):
        """Rate 1.5 output equals the first n samples of the stretched signal."""
        class RngAt:
            def __init__(self, v):
                self.v = v

            def uniform(self, lo, hi):
                return self.v

        x = tone()
        out = stretch_pad_crop(x, (1.5, 1.5), RngAt(1.5))
        full = stretch_signal(x, 1.5)
        assert full.size > x.size
        np.testing.assert_array_equal(out, full[: x.size])

    def test_shape_always_preserved(self):
        x = tone(12345)
        for seed in range(8):
            out = stretch_pad_crop(x, (0.25, 1.75), derive_rng(seed, "s"))
            assert out.shape == x.shape


class TestGaussianSnr:
    def test_infinite_snr_is_identity(self):
        x = tone()
        np.testing.assert_array_equal(gaussian_snr(x, np.inf, derive_rng(0, "n")), x)

    def test_measured_snr_within_half_db(self):
        """Unit sine at 15 dB SNR measures 15 +/- 0.5 dB over 16k samples."""
        x = tone(16000, amp=1.0)
        out = gaussian_snr(x, 15.0, derive_rng(3, "n"))
        noise = out - x
        measured = 10 * np.log10(np.mean(x**2) / np.mean(noise**2))
        assert abs(measured - 15.0) < 0.5

    def test_shape_and_rate_preserved(self):
        x = tone(8000)
        assert gaussian_snr(x, 20.0, derive_rng(0, "n")).shape == x.shape

    def test_all_zero_signal_rejected(self):
        with pytest.raises(DegenerateInputError):
            gaussian_snr(np.zeros(100), 15.0, derive_rng(0, "n"))


class TestCutoutSpec:
    def _spec(self):
        return log_mel(Waveform(tone(), 16000), FEAT).values

    def test_zero_scale_is_identity(self):
        s = self._spec()
        np.testing.assert_array_equal(cutout_spec(s, (0.0, 0.0), derive_rng(0, "c")), s)

    def test_full_scale_fills_everything(self):
        s = self._spec()
        out = cutout_spec(s, (1.0, 1.0), derive_rng(0, "c"))
        np.testing.assert_array_equal(out, -80.0)

    def test_weak_range_fill_fraction(self):
        """Scales in [0.1, 0.5] fill about 1% to 25% of all cells (exact
        bounds account for rounding side lengths to whole cells)."""
        s = self._spec()
        s[:] = 0.0  # no pre-existing floor cells
        frames, mels = s.shape
        lo = round(0.1 * frames) * round(0.1 * mels) / s.size
        hi = round(0.5 * frames) * round(0.5 * mels) / s.size
        for seed in range(20):
            out = cutout_spec(s, (0.1, 0.5), derive_rng(seed, "c"))
            frac = np.mean(out == -80.0)
            assert lo <= frac <= hi

    def test_rectangle_reconstructable(self):
        s = self._spec()
        s[:] = 0.0
        out = cutout_spec(s, (0.2, 0.6), derive_rng(11, "c"))
        t0, t1, m0, m1 = cutout_params(s.shape, (0.2, 0.6), derive_rng(11, "c"))
        np.testing.assert_array_equal(out[t0:t1, m0:m1], -80.0)
        mask = np.ones_like(s, bool)
        mask[t0:t1, m0:m1] = False
        np.testing.assert_array_equal(out[mask], s[mask])

    def test_bad_scale(self):
        with pytest.raises(ContractError):
            cutout_spec(self._spec(), (0.5, 1.2), derive_rng(0, "c"))


class TestApplyPolicy:
    def test_table_ranges(self):
        weak, strong = AugmentPolicy.weak(), AugmentPolicy.strong()
        assert weak.occlusion_max_size == (0.25, 0.25)
        assert strong.occlusion_max_size == (0.75, 0.75)
        assert weak.stretch_rate == (0.50, 1.50)
        assert strong.stretch_rate == (0.25, 1.75)
        assert weak.cutout_scale == (0.10, 0.50)
        assert strong.cutout_scale == (0.50, 1.00)

    def test_shape_preserved_and_deterministic(self):
        w = Waveform(tone(), 16000)
        for seed in range(6):
            a = apply_policy(w, FEAT, AugmentPolicy.weak(), derive_rng(seed, "p"))
            b = apply_policy(w, FEAT, AugmentPolicy.weak(), derive_rng(seed, "p"))
            assert a.values.shape == (32, 32)
            np.testing.assert_array_equal(a.values, b.values)

    def test_uniform_choice_frequency(self):
        """Each of the three augmentations is chosen 1/3 +/- 0.03 of the time."""
        counts = np.zeros(3, int)
        for seed in range(3000):
            rng = derive_rng(seed, "choice-freq")
            counts[int(rng.integers(0, 3))] += 1
        freqs = counts / 3000
        np.testing.assert_allclose(freqs, 1 / 3, atol=0.03)

    def test_cutout_choice_with_zero_scale_is_identity(self):
        w = Waveform(tone(), 16000)
        policy = AugmentPolicy(strength="weak", occlusion_max_size=(0.25, 0.25),
                               stretch_rate=(0.5, 1.5), cutout_scale=(0.0, 0.0))
        # find a seed whose first draw selects the cutout branch
        for seed in range(50):
            probe = derive_rng(seed, "p")
            if int(probe.integers(0, 3)) == 2:
                out = apply_policy(w, FEAT, policy, derive_rng(seed, "p"))
                clean = log_mel(w, FEAT)
                np.testing.assert_array_equal(out.values, clean.values)
                return
        pytest.fail("no cutout-selecting seed found in 50 tries")

    def test_weak_vs_strong_same_seed_draw_from_their_ranges(self):
        """With the same seed and a stretch choice, the strong rate comes
        from the wider interval."""
        for seed in range(60):
            probe = derive_rng(seed, "p")
            if int(probe.integers(0, 3)) == 1:
                r_weak = derive_rng(seed, "p")
                r_weak.integers(0, 3)
                rate_weak = r_weak.uniform(*AugmentPolicy.weak().stretch_rate)
                r_strong = derive_rng(seed, "p")
                r_strong.integers(0, 3)
                rate_strong = r_strong.uniform(*AugmentPolicy.strong().stretch_rate)
                assert 0.5 <= rate_weak <= 1.5
                assert 0.25 <= rate_strong <= 1.75
                return
        pytest.fail("no stretch-selecting seed found")


class TestMixup:
    def test_lambda_one_returns_first(self):
        x1, x2 = np.ones((3, 4)), np.zeros((3, 4))
        y1, y2 = np.array([[1.0, 0.0]] * 3), np.array([[0.0, 1.0]] * 3)
        xm, ym, lam = mixup(x1, x2, y1, y2, MixupParams(0.4), derive_rng(0, "m"), lam=1.0)
        assert lam == 1.0
        np.testing.assert_array_equal(xm, x1)
        np.testing.assert_array_equal(ym, y1)

    def test_lambda_half_is_midpoint(self):
        x1, x2 = np.full((2, 2), 2.0), np.zeros((2, 2))
        y1, y2 = np.array([[1.0, 0.0]] * 2), np.array([[0.0, 1.0]] * 2)
        xm, ym, _ = mixup(x1, x2, y1, y2, MixupParams(0.4), derive_rng(0, "m"), lam=0.5)
        np.testing.assert_array_equal(xm, 1.0)
        np.testing.assert_array_equal(ym, 0.5)

    def test_equal_inputs_fixed_point(self):
        x = np.random.default_rng(0).normal(size=(4, 5))
        y = np.full((4, 2), 0.5)
        xm, ym, _ = mixup(x, x, y, y, MixupParams(0.4), derive_rng(1, "m"))
        np.testing.assert_allclose(xm, x, rtol=1e-12)
        np.testing.assert_allclose(ym, y, rtol=1e-12)

    def test_convexity_and_label_normalization(self):
        rng = np.random.default_rng(2)
        x1, x2 = rng.normal(size=(6, 7)), rng.normal(size=(6, 7))
        y1 = rng.dirichlet(np.ones(3), size=6)
        y2 = rng.dirichlet(np.ones(3), size=6)
        for seed in range(10):
            xm, ym, lam = mixup(x1, x2, y1, y2, MixupParams(0.75), derive_rng(seed, "m"))
            assert 0.0 <= lam <= 1.0
            assert np.all(xm <= np.maximum(x1, x2) + 1e-12)
            assert np.all(xm >= np.minimum(x1, x2) - 1e-12)
            np.testing.assert_allclose(ym.sum(axis=1), 1.0, atol=1e-9)

    def test_asymmetric_lambda_at_least_half(self):
        for seed in range(200):
            lam = draw_mixup_lambda(MixupParams(0.75, asymmetric=True), derive_rng(seed, "m"))
            assert lam >= 0.5

    def test_beta_mean(self):
        """Beta(alpha, alpha) draws average to 0.5 +/- 0.01 over 1e5 samples."""
        rng = derive_rng(0, "beta-mean")
        draws = rng.beta(0.4, 0.4, size=100_000)
        assert abs(draws.mean() - 0.5) < 0.01

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            mixup(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 1)), np.ones((2, 1)),
                  MixupParams(0.4), derive_rng(0, "m"))

    def test_alpha_positive(self):
        with pytest.raises(ContractError):
            MixupParams(0.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_deterministic_per_seed(self, seed):
        x1 = np.arange(12.0).reshape(3, 4)
        x2 = x1[::-1].copy()
        y = np.full((3, 2), 0.5)
        a = mixup(x1, x2, y, y, MixupParams(0.4), derive_rng(seed, "m"))
        b = mixup(x1, x2, y, y, MixupParams(0.4), derive_rng(seed, "m"))
        np.testing.assert_array_equal(a[0], b[0])
        assert a[2] == b[2]
