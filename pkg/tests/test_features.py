"""Frontend: mel scale, framing, FFT power, band-limited filterbanks, dumps."""

import numpy as np
import pytest

from streamsv.audio import Waveform
from streamsv.features import (
    DegenerateBand,
    FeatureFileError,
    FrontendConfig,
    InputTooShort,
    build_filterbank,
    frame_signal,
    hz_to_mel,
    log_mfbe,
    mel_to_hz,
    power_spectrum,
    read_feature_file,
    write_feature_file,
)

FB = FrontendConfig(f_low_hz=20.0, f_high_hz=8000.0)
LF = FrontendConfig(f_low_hz=20.0, f_high_hz=2000.0)
HF = FrontendConfig(f_low_hz=1000.0, f_high_hz=8000.0)


class TestMelScale:
    def test_fixed_points(self):
        assert hz_to_mel(0.0) == 0.0
        assert mel_to_hz(0.0) == 0.0

    def test_direct_values(self):
        np.testing.assert_allclose(hz_to_mel(700.0), 2595.0 * np.log10(2.0))
        np.testing.assert_allclose(mel_to_hz(1000.0), 700.0 * (10 ** (1000.0 / 2595.0) - 1.0))

    def test_round_trips(self):
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(3456.0)), 3456.0, atol=1e-9)
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(8000.0)), 8000.0, atol=1e-9)

    def test_strictly_increasing(self):
        f = np.linspace(0.0, 8000.0, 500)
        assert np.all(np.diff(hz_to_mel(f)) > 0)


class TestFraming:
    def test_frame_count_2s(self, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 32000), 16000)
        frames = frame_signal(w, FB)
        assert frames.shape == (198, 400)

    def test_single_window(self, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 400), 16000)
        assert frame_signal(w, FB).shape == (1, 400)

    def test_too_short(self, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 399), 16000)
        with pytest.raises(InputTooShort):
            frame_signal(w, FB)

    def test_hamming_applied(self):
        w = Waveform(np.ones(400) * 0.5, 16000)
        frames = frame_signal(w, FB)
        n = np.arange(400)
        expected = 0.5 * (0.54 - 0.46 * np.cos(2.0 * np.pi * n / 399.0))
        np.testing.assert_allclose(frames[0], expected)

    def test_hop_alignment(self, rng):
        x = rng.uniform(-0.5, 0.5, 800)
        frames = frame_signal(Waveform(x, 16000), FB)
        window = 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(400) / 399.0)
        np.testing.assert_allclose(frames[2], x[320:720] * window)


class TestPowerSpectrum:
    def test_zero_frame(self):
        out = power_spectrum(np.zeros((3, 16)), 16)
        assert out.shape == (3, 9)
        np.testing.assert_array_equal(out, 0.0)

    def test_sinusoid_peaks_at_bin(self):
        n = 64
        k = 5
        frame = np.cos(2.0 * np.pi * k * np.arange(n) / n)
        out = power_spectrum(frame[None, :], n)[0]
        assert int(np.argmax(out)) == k

    def test_matches_naive_dft(self, rng):
        # independent O(n^2) oracle over the one-sided spectrum
        for n_fft in (16, 32, 64):
            frame = rng.normal(size=(2, n_fft))
            got = power_spectrum(frame, n_fft)
            k = np.arange(n_fft // 2 + 1)[:, None]
            n = np.arange(n_fft)[None, :]
            basis = np.exp(-2j * np.pi * k * n / n_fft)
            want = np.abs(frame @ basis.T) ** 2
            np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)

    def test_zero_padding(self, rng):
        frame = rng.normal(size=(1, 12))
        got = power_spectrum(frame, 16)
        padded = np.concatenate([frame, np.zeros((1, 4))], axis=1)
        want = np.abs(np.fft.rfft(padded, axis=1)) ** 2
        np.testing.assert_allclose(got, want, rtol=1e-12)


class TestFilterBank:
    def test_full_band_shape_and_centers(self):
        bank = build_filterbank(FB, 16000)
        assert bank.weights.shape == (40, 257)
        assert np.all(np.diff(bank.center_freqs_hz) > 0)
        assert bank.center_freqs_hz[0] > 20.0
        assert bank.center_freqs_hz[-1] < 8000.0

    def test_rows_peak_at_one(self):
        for cfg in (FB, LF, HF):
            bank = build_filterbank(cfg, 16000)
            np.testing.assert_array_equal(bank.weights.max(axis=1), 1.0)
            assert np.all(bank.weights >= 0.0)

    def test_low_band_zero_above_edge(self):
        bank = build_filterbank(LF, 16000)
        freqs = np.arange(257) * 16000.0 / 512.0
        assert np.all(bank.weights[:, freqs > 2000.0] == 0.0)

    def test_high_band_zero_below_edge(self):
        bank = build_filterbank(HF, 16000)
        freqs = np.arange(257) * 16000.0 / 512.0
        assert np.all(bank.weights[:, freqs < 1000.0] == 0.0)

    def test_neighbors_overlap(self):
        bank = build_filterbank(FB, 16000)
        for i in range(39):
            both = (bank.weights[i] > 0) & (bank.weights[i + 1] > 0)
            assert both.any()

    def test_degenerate_band(self):
        narrow = FrontendConfig(f_low_hz=100.0, f_high_hz=140.0)
        with pytest.raises(DegenerateBand):
            build_filterbank(narrow, 16000)

    def test_invalid_band_rejected(self):
        with pytest.raises(Exception):
            build_filterbank(FrontendConfig(f_low_hz=3000.0, f_high_hz=2000.0), 16000)
        with pytest.raises(Exception):
            build_filterbank(FrontendConfig(f_low_hz=20.0, f_high_hz=9000.0), 16000)


class TestLogMfbe:
    def test_output_shape_all_bands(self, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 32000), 16000)
        for cfg in (FB, LF, HF):
            assert log_mfbe(w, cfg).frames.shape == (198, 40)

    def test_4s_shape(self, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 64000), 16000)
        assert log_mfbe(w, FB).frames.shape == (398, 40)

    def test_silence_is_all_zero_after_norm(self):
        # The energy floor makes every frame identical, so mean subtraction
        # cancels to rounding noise.
        w = Waveform(np.zeros(32000), 16000)
        np.testing.assert_allclose(log_mfbe(w, FB).frames, 0.0, atol=1e-12)

    def test_zero_mean_per_coefficient(self, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 32000), 16000)
        f = log_mfbe(w, FB).frames
        np.testing.assert_allclose(f.mean(axis=0), 0.0, atol=1e-9)

    def test_scale_invariance(self, rng):
        x = rng.uniform(-0.4, 0.4, 32000)
        a = log_mfbe(Waveform(x, 16000), FB).frames
        b = log_mfbe(Waveform(2.0 * x, 16000), FB).frames
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_prebuilt_bank_matches(self, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 32000), 16000)
        bank = build_filterbank(FB, 16000)
        np.testing.assert_array_equal(log_mfbe(w, FB).frames, log_mfbe(w, FB, bank).frames)


class TestFeatureFile:
    def test_round_trip(self, tmp_path, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 32000), 16000)
        fm = log_mfbe(w, FB)
        path = tmp_path / "x.mfbe"
        write_feature_file(fm, path)
        back = read_feature_file(path)
        assert back.shape == (198, 40)
        assert back.dtype == np.float64
        np.testing.assert_allclose(back, fm.frames, atol=1e-6)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mfbe"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(FeatureFileError):
            read_feature_file(path)

    def test_truncated(self, tmp_path, rng):
        w = Waveform(rng.uniform(-0.5, 0.5, 32000), 16000)
        path = tmp_path / "t.mfbe"
        write_feature_file(log_mfbe(w, FB), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FeatureFileError):
            read_feature_file(path)
