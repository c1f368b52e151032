"""Audio pipeline: loading, resampling, framing, splits, folds, caches."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sslaudio.audio import (
    DatasetManifest,
    FeatureConfig,
    ManifestEntry,
    Waveform,
    load_waveform,
    log_mel,
    log_mel_batch,
    make_folds,
    mel_filterbank,
    pad_or_crop,
    read_feature_cache,
    read_manifest,
    resample,
    save_waveform,
    split_labeled_unlabeled,
    write_feature_cache,
    write_manifest,
)
from sslaudio.errors import AudioFormatError, ConfigurationError, ContractError


def sine(freq, duration, rate, amp=0.5):
    t = np.arange(int(duration * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


class TestLoadWaveform:
    def test_silence_roundtrip(self, tmp_path):
        """1 s of silence at 16 kHz loads as 16000 zero samples."""
        path = tmp_path / "silence.wav"
        save_waveform(path, Waveform(np.zeros(16000) + 1e-9, 16000))
        w = load_waveform(path)
        assert w.sample_rate == 16000
        assert len(w) == 16000
        np.testing.assert_array_equal(w.samples, 0.0)

    def test_stereo_averaged_to_mono(self, tmp_path):
        """Stereo channels are averaged; length is preserved."""
        from scipy.io import wavfile

        left = (sine(440, 0.5, 8000) * 32767).astype(np.int16)
        right = (sine(220, 0.5, 8000) * 32767).astype(np.int16)
        wavfile.write(tmp_path / "st.wav", 8000, np.stack([left, right], axis=1))
        w = load_waveform(tmp_path / "st.wav")
        assert len(w) == left.size
        expected = (left.astype(np.float64) + right) / 2 / 32768.0
        np.testing.assert_allclose(w.samples, expected, atol=1e-9)

    def test_sine_fixture_matches_generator(self, tmp_path):
        """A 440 Hz sine written to disk re-loads within 16-bit accuracy."""
        ref = sine(440, 1.0, 16000)
        save_waveform(tmp_path / "sine.wav", Waveform(ref, 16000))
        w = load_waveform(tmp_path / "sine.wav")
        np.testing.assert_allclose(w.samples, ref, atol=1e-4)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_waveform(tmp_path / "nope.wav")

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"not audio at all")
        with pytest.raises(AudioFormatError):
            load_waveform(path)

    def test_waveform_invariants(self):
        with pytest.raises(ContractError):
            Waveform(np.array([]), 16000)
        with pytest.raises(ContractError):
            Waveform(np.array([0.0, np.nan]), 16000)
        with pytest.raises(ContractError):
            Waveform(np.zeros(4), 0)


class TestResample:
    def test_identity_rate(self):
        w = Waveform(sine(100, 0.25, 8000), 8000)
        out = resample(w, 8000)
        np.testing.assert_array_equal(out.samples, w.samples)

    def test_length_arithmetic(self):
        """5 s at 44100 Hz resampled to 22050 Hz has 110250 samples."""
        w = Waveform(sine(440, 5.0, 44100), 44100)
        assert len(resample(w, 22050)) == 110250

    def test_sine_peak_preserved(self):
        """A 440 Hz tone stays the dominant FFT bin after 44.1k -> 16k."""
        w = Waveform(sine(440, 1.0, 44100), 44100)
        out = resample(w, 16000)
        assert len(out) == 16000
        spectrum = np.abs(np.fft.rfft(out.samples))
        peak = spectrum.argmax()
        bin_hz = 16000 / len(out)
        assert abs(peak * bin_hz - 440) <= bin_hz

    def test_bad_rate(self):
        w = Waveform(np.ones(10), 100)
        with pytest.raises(ContractError):
            resample(w, 0)


class TestPadOrCrop:
    def test_identity(self):
        w = Waveform(sine(10, 0.1, 1000), 1000)
        np.testing.assert_array_equal(pad_or_crop(w, len(w)).samples, w.samples)

    def test_pad(self):
        w = Waveform(np.ones(16000), 16000)
        out = pad_or_crop(w, 32000)
        assert len(out) == 32000
        np.testing.assert_array_equal(out.samples[:16000], w.samples)
        np.testing.assert_array_equal(out.samples[16000:], 0.0)

    def test_crop(self):
        w = Waveform(np.arange(32000, dtype=np.float64) / 40000, 16000)
        out = pad_or_crop(w, 16000)
        np.testing.assert_array_equal(out.samples, w.samples[:16000])

    @given(n=st.integers(1, 500), target=st.integers(1, 500))
    @settings(max_examples=40, deadline=None)
    def test_idempotent(self, n, target):
        """pad_or_crop twice at the same target equals once."""
        w = Waveform(np.linspace(-0.5, 0.5, n), 8000)
        once = pad_or_crop(w, target)
        twice = pad_or_crop(once, target)
        np.testing.assert_array_equal(once.samples, twice.samples)


class TestLogMel:
    def test_reference_shape_gsc(self):
        """1 s at 16 kHz with hop 512 and 64 mels gives 32 x 64."""
        cfg = FeatureConfig(target_sample_rate=16000, target_duration=1.0)
        out = log_mel(Waveform(sine(440, 1.0, 16000), 16000), cfg)
        assert out.shape == (32, 64)

    def test_reference_shape_esc(self):
        """5 s at 44.1 kHz with hop 512 and 64 mels gives 431 x 64."""
        cfg = FeatureConfig(target_sample_rate=44100, target_duration=5.0)
        out = log_mel(Waveform(sine(440, 5.0, 44100), 44100), cfg)
        assert out.shape == (431, 64)

    def test_all_zero_is_floor(self):
        cfg = FeatureConfig(target_sample_rate=16000, target_duration=1.0)
        w = Waveform(np.full(16000, 1e-30), 16000)
        w.samples[:] = 0.0
        out = log_mel(w, cfg)
        np.testing.assert_array_equal(out.values, -80.0)

    def test_bounds(self):
        cfg = FeatureConfig(target_sample_rate=16000, target_duration=1.0)
        rng = np.random.default_rng(0)
        w = Waveform(rng.uniform(-0.9, 0.9, 16000), 16000)
        out = log_mel(w, cfg).values
        assert out.min() >= -80.0
        assert out.max() <= 0.0
        assert np.isclose(out.max(), 0.0)  # per-clip max reference

    def test_frame_count_is_pure_function_of_duration(self):
        cfg = FeatureConfig(target_sample_rate=22050, target_duration=4.0)
        w = Waveform(sine(200, 4.0, 22050), 22050)
        # 4 s at 22.05 kHz, hop 512: ceil((88200 + 1) / 512) = 173 frames
        assert log_mel(w, cfg).shape == (173, 64)

    def test_rate_mismatch_rejected(self):
        cfg = FeatureConfig(target_sample_rate=16000, target_duration=1.0)
        with pytest.raises(ContractError):
            log_mel(Waveform(sine(440, 1.0, 8000), 8000), cfg)

    def test_batch_matches_per_clip(self):
        """Batched extraction agrees with clip-by-clip to float32 rounding
        and is bit-reproducible at a fixed batch shape."""
        cfg = FeatureConfig(n_mels=24, window_size=512, hop_length=256,
                            target_sample_rate=8000, target_duration=0.5)
        rng = np.random.default_rng(1)
        batch = rng.uniform(-0.8, 0.8, (5, 4000)).astype(np.float32)
        stacked = log_mel_batch(batch, 8000, cfg)
        np.testing.assert_array_equal(stacked, log_mel_batch(batch, 8000, cfg))
        for i in range(5):
            single = log_mel(Waveform(batch[i].astype(np.float64), 8000), cfg)
            np.testing.assert_allclose(stacked[i], single.values, atol=1e-4)

    def test_filterbank_covers_all_bins(self):
        fb = mel_filterbank(64, 2048, 44100)
        assert fb.shape == (64, 1025)
        assert fb.min() >= 0.0
        # every filter has some support
        assert (fb.sum(axis=1) > 0).all()


def _manifest(n_classes=4, per_class=32, folds=4):
    entries = []
    for c in range(n_classes):
        for i in range(per_class):
            entries.append(ManifestEntry(f"c{c}i{i}", f"wavs/c{c}i{i}.wav", c, i % folds))
    return DatasetManifest(entries, n_classes=n_classes)


class TestSplit:
    def test_full_supervision(self):
        m = _manifest()
        split = split_labeled_unlabeled(m, 1.0, seed=0)
        assert len(split.labeled_ids) == len(m)
        assert not split.unlabeled_ids

    def test_ten_percent_of_esc_sized_manifest(self):
        """320 files across 10 classes at 10% gives 3 per class, 30 total."""
        m = _manifest(n_classes=10, per_class=32)
        split = split_labeled_unlabeled(m, 0.10, seed=7)
        assert len(split.labeled_ids) == 30
        per_class = {c: 0 for c in range(10)}
        by_id = {e.clip_id: e.label for e in m.entries}
        for cid in split.labeled_ids:
            per_class[by_id[cid]] += 1
        assert all(v == 3 for v in per_class.values())

    def test_determinism_and_seed_sensitivity(self):
        m = _manifest()
        a = split_labeled_unlabeled(m, 0.25, seed=5)
        b = split_labeled_unlabeled(m, 0.25, seed=5)
        c = split_labeled_unlabeled(m, 0.25, seed=6)
        assert a.labeled_ids == b.labeled_ids
        assert a.labeled_ids != c.labeled_ids
        assert len(a.labeled_ids) == len(c.labeled_ids)

    def test_partition(self):
        m = _manifest()
        split = split_labeled_unlabeled(m, 0.3, seed=1)
        assert not (split.labeled_ids & split.unlabeled_ids)
        assert split.labeled_ids | split.unlabeled_ids == {e.clip_id for e in m.entries}

    def test_stratification_within_one_file(self):
        m = _manifest(n_classes=3, per_class=21)
        split = split_labeled_unlabeled(m, 0.37, seed=2)
        by_id = {e.clip_id: e.label for e in m.entries}
        for c in range(3):
            count = sum(1 for cid in split.labeled_ids if by_id[cid] == c)
            assert abs(count - 0.37 * 21) <= 1.0

    def test_zero_labeled_class_is_an_error(self):
        m = _manifest(n_classes=2, per_class=3)
        with pytest.raises(ConfigurationError):
            split_labeled_unlabeled(m, 0.05, seed=0)

    def test_fraction_bounds(self):
        with pytest.raises(ContractError):
            split_labeled_unlabeled(_manifest(), 0.0, seed=0)


class TestFolds:
    def test_five_folds(self):
        m = _manifest(folds=4)
        plans = make_folds(m)
        assert len(plans) == 4
        assert sorted(p.test_fold for p in plans) == [0, 1, 2, 3]

    def test_ten_folds(self):
        m = _manifest(per_class=40, folds=10)
        assert len(make_folds(m)) == 10

    def test_partition_per_plan(self):
        m = _manifest(folds=4)
        for plan in make_folds(m):
            train = m.subset(plan.train_folds)
            test = m.subset([plan.test_fold])
            train_ids = {e.clip_id for e in train.entries}
            test_ids = {e.clip_id for e in test.entries}
            assert not (train_ids & test_ids)
            assert train_ids | test_ids == {e.clip_id for e in m.entries}

    def test_manifest_roundtrip(self, tmp_path):
        m = _manifest()
        write_manifest(tmp_path / "m.csv", m)
        loaded = read_manifest(tmp_path / "m.csv")
        assert len(loaded) == len(m)
        assert loaded.n_classes == m.n_classes
        assert [e.clip_id for e in loaded.entries] == [e.clip_id for e in m.entries]

    def test_manifest_validation(self):
        with pytest.raises(ConfigurationError):
            DatasetManifest([ManifestEntry("a", "a.wav", 0, 0),
                             ManifestEntry("a", "b.wav", 0, 0)])
        with pytest.raises(ConfigurationError):
            DatasetManifest([ManifestEntry("a", "a.wav", 0, 0),
                             ManifestEntry("b", "b.wav", 0, 2)])


class TestFeatureCache:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.uniform(-80, 0, (32, 64)).astype(np.float32)
        write_feature_cache(tmp_path / "x.lms", values)
        np.testing.assert_array_equal(read_feature_cache(tmp_path / "x.lms"), values)

    def test_layout_is_documented_binary(self, tmp_path):
        values = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = tmp_path / "x.lms"
        write_feature_cache(path, values)
        raw = path.read_bytes()
        assert raw[:4] == b"LMS1"
        assert np.frombuffer(raw[4:12], dtype="<i4").tolist() == [2, 3]
        np.testing.assert_array_equal(np.frombuffer(raw[12:], dtype="<f4"), values.reshape(-1))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.lms").write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(AudioFormatError):
            read_feature_cache(tmp_path / "bad.lms")
