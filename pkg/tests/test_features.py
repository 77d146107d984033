"""Framing arithmetic, filterbank behavior on known signals, FATF round trips."""

import math

import numpy as np
import pytest

from fatspeech import features
from fatspeech.errors import DataError, FormatError


class TestFraming:
    def test_one_second_at_16k_gives_98_frames(self):
        frames = features.frame_signal(np.zeros(16000), 16000)
        assert frames.shape == (98, 400)

    def test_exactly_one_window(self):
        frames = features.frame_signal(np.zeros(400), 16000)
        assert frames.shape == (400 // 160 * 0 + 1, 400)

    def test_shorter_than_window_gives_zero_frames(self):
        frames = features.frame_signal(np.zeros(399), 16000)
        assert frames.shape[0] == 0

    def test_count_formula_sweep(self):
        win, hop = 400, 160
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(win, 40000))
            frames = features.frame_signal(np.zeros(n), 16000)
            assert frames.shape[0] == 1 + (n - win) // hop

    def test_hann_window_applied(self):
        frames = features.frame_signal(np.ones(400), 16000)
        np.testing.assert_allclose(frames[0], np.hanning(400))


class TestLogMel:
    def test_silence_hits_the_log_floor(self):
        feats = features.log_mel_spectrogram(np.zeros(16000), 16000, n_mels=20)
        np.testing.assert_allclose(feats, math.log(features.LOG_FLOOR))

    @pytest.mark.parametrize("freq", [300.0, 1000.0, 3000.0])
    def test_pure_tone_peaks_in_nearest_band(self, freq):
        t = np.arange(16000) / 16000.0
        sig = 0.5 * np.sin(2 * np.pi * freq * t)
        feats = features.log_mel_spectrogram(sig, 16000, n_mels=40)
        band = int(np.argmax(feats.mean(axis=0)))
        centers = features.filter_centers(40, 16000)
        assert band == int(np.argmin(np.abs(centers - freq)))

    def test_amplitude_doubling_adds_ln4(self):
        t = np.arange(16000) / 16000.0
        sig = 0.2 * np.sin(2 * np.pi * 800.0 * t)
        lo = features.log_mel_spectrogram(sig, 16000, n_mels=30)
        hi = features.log_mel_spectrogram(2 * sig, 16000, n_mels=30)
        active = lo > math.log(features.LOG_FLOOR) + 1
        active &= hi > math.log(features.LOG_FLOOR) + 1
        np.testing.assert_allclose((hi - lo)[active], math.log(4.0), atol=1e-6)

    def test_filter_centers_monotonic(self):
        centers = features.filter_centers(80, 16000)
        assert np.all(np.diff(centers) > 0)

    def test_shape_means_frames_by_mels(self):
        feats = features.log_mel_spectrogram(np.zeros(8000), 16000, n_mels=80)
        assert feats.shape == (1 + (8000 - 400) // 160, 80)


class TestFatfContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(17, 9)).astype(np.float32)
        p = tmp_path / "x.fatf"
        features.save_features(p, feats)
        loaded = features.load_features(p)
        assert loaded.dtype == np.float32
        assert loaded.tobytes() == feats.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.fatf"
        p.write_bytes(b"NOPE" + b"\x00" * 12)
        with pytest.raises(FormatError):
            features.load_features(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "trunc.fatf"
        feats = np.ones((4, 4), np.float32)
        features.save_features(p, feats)
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(FormatError):
            features.load_features(p)

    def test_header_records_dims(self, tmp_path):
        p = tmp_path / "y.fatf"
        features.save_features(p, np.zeros((3, 5), np.float32))
        assert features.load_features(p).shape == (3, 5)


class TestWav:
    def test_wav_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        sig = (rng.normal(size=1600) * 0.1).clip(-0.9, 0.9)
        p = tmp_path / "a.wav"
        features.write_wav(p, sig, 16000)
        loaded, rate = features.read_wav(p)
        assert rate == 16000
        np.testing.assert_allclose(loaded, sig, atol=1.0 / 32768)

    def test_non_wav_rejected(self, tmp_path):
        p = tmp_path / "junk.wav"
        p.write_bytes(b"not audio at all")
        with pytest.raises(FormatError):
            features.read_wav(p)


class TestCmvn:
    def test_normalization_zero_mean_unit_var(self, tmp_path):
        rng = np.random.default_rng(3)
        arrays = [rng.normal(loc=4.0, scale=2.5, size=(50, 6)) for _ in range(4)]
        mean, std = features.compute_cmvn(arrays)
        normed = np.concatenate([features.apply_cmvn(a, mean, std) for a in arrays])
        np.testing.assert_allclose(normed.mean(axis=0), 0, atol=1e-10)
        np.testing.assert_allclose(normed.std(axis=0), 1, atol=1e-10)

    def test_save_load(self, tmp_path):
        mean, std = np.arange(5.0), np.arange(1.0, 6.0)
        p = tmp_path / "stats.cmvn"
        features.save_cmvn(p, mean, std)
        m2, s2 = features.load_cmvn(p)
        np.testing.assert_allclose(m2, mean, atol=1e-6)
        np.testing.assert_allclose(s2, std, atol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            features.compute_cmvn([np.zeros((0, 3))])
