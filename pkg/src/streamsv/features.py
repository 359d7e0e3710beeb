"""Log mel filterbank energy frontend with a configurable frequency selector.

Every stream computes the same 40-dimensional log MFBE; streams differ only in
the band [f_low_hz, f_high_hz] their triangular mel filters are built over, so
output dimensionality never depends on the band.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import PIPELINE_RATE_HZ, Waveform
from .errors import StreamSVError

ENERGY_FLOOR = 1e-10

FEATURE_MAGIC = b"MFBE"
FEATURE_VERSION = 1


class FeatureError(StreamSVError):
    pass


class InputTooShort(FeatureError):
    """Waveform shorter than one analysis window (or one encoder receptive field)."""


class DegenerateBand(FeatureError):
    """Band too narrow to give every mel filter a nonzero FFT-bin weight."""


class FeatureFileError(FeatureError):
    """Feature dump missing magic/version or truncated."""


@dataclass
class FrontendConfig:
    """Framing and filterbank parameters for one stream's frontend."""

    f_low_hz: float = 20.0
    f_high_hz: float = 8000.0
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 40

    def win_samples(self, sample_rate_hz: int) -> int:
        return int(round(self.win_ms * sample_rate_hz / 1000.0))

    def hop_samples(self, sample_rate_hz: int) -> int:
        return int(round(self.hop_ms * sample_rate_hz / 1000.0))

    def validate(self, sample_rate_hz: int) -> None:
        if not (0 <= self.f_low_hz < self.f_high_hz <= sample_rate_hz / 2):
            raise FeatureError(
                f"band [{self.f_low_hz}, {self.f_high_hz}] Hz invalid for rate {sample_rate_hz}"
            )
        win = self.win_samples(sample_rate_hz)
        if self.n_fft < win:
            raise FeatureError(f"n_fft {self.n_fft} < window length {win}")
        if self.n_fft & (self.n_fft - 1):
            raise FeatureError(f"n_fft {self.n_fft} is not a power of two")
        if self.n_mels < 1:
            raise FeatureError(f"n_mels must be positive, got {self.n_mels}")
        if self.hop_samples(sample_rate_hz) < 1:
            raise FeatureError("hop must be at least one sample")


@dataclass
class FilterBank:
    """Triangular mel filters sampled at the one-sided FFT bin frequencies."""

    weights: np.ndarray  # (n_mels, n_fft // 2 + 1), rows peak at exactly 1.0
    center_freqs_hz: np.ndarray  # (n_mels,), strictly increasing


@dataclass
class FeatureMatrix:
    """T x n_mels log energies plus the config that produced them."""

    frames: np.ndarray
    config: FrontendConfig


def hz_to_mel(f_hz):
    """Mel scale: 2595 * log10(1 + f/700). Strictly increasing."""
    return 2595.0 * np.log10(1.0 + np.asarray(f_hz, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    """Exact inverse of hz_to_mel: 700 * (10^(m/2595) - 1)."""
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_signal(w: Waveform, cfg: FrontendConfig) -> np.ndarray:
    """Slice into Hamming-windowed frames of win_ms every hop_ms.

    Frame t starts at sample t*hop; yields 1 + floor((N - win) / hop) frames.
    """
    win = cfg.win_samples(w.sample_rate_hz)
    hop = cfg.hop_samples(w.sample_rate_hz)
    x = w.samples
    if x.size < win:
        raise InputTooShort(f"waveform of {x.size} samples < window of {win}")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    return frames * np.hamming(win)


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """|DFT|^2 of each zero-padded frame over the one-sided spectrum."""
    win = frames.shape[-1]
    if n_fft < win:
        raise FeatureError(f"n_fft {n_fft} < frame length {win}")
    if n_fft & (n_fft - 1):
        raise FeatureError(f"n_fft {n_fft} is not a power of two")
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    return (spec.real**2 + spec.imag**2).astype(np.float64)


def build_filterbank(cfg: FrontendConfig, sample_rate_hz: int = PIPELINE_RATE_HZ) -> FilterBank:
    """Triangular filters with mel-uniform edges over [f_low, f_high].

    The n_mels + 2 edge points are uniformly spaced on the mel axis; each
    filter is triangular in mel, sampled at the FFT bin frequencies, then
    rescaled so its peak weight is exactly 1.0. All support stays strictly
    inside the band.
    """
    cfg.validate(sample_rate_hz)
    edges_mel = np.linspace(hz_to_mel(cfg.f_low_hz), hz_to_mel(cfg.f_high_hz), cfg.n_mels + 2)
    n_bins = cfg.n_fft // 2 + 1
    bin_mels = hz_to_mel(np.arange(n_bins) * sample_rate_hz / cfg.n_fft)

    lower = edges_mel[:-2, None]
    center = edges_mel[1:-1, None]
    upper = edges_mel[2:, None]
    rising = (bin_mels[None, :] - lower) / (center - lower)
    falling = (upper - bin_mels[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    peaks = weights.max(axis=1)
    dead = np.flatnonzero(peaks == 0.0)
    if dead.size:
        raise DegenerateBand(
            f"band [{cfg.f_low_hz}, {cfg.f_high_hz}] Hz too narrow: filters "
            f"{dead.tolist()} cover no FFT bin at n_fft={cfg.n_fft}"
        )
    weights /= peaks[:, None]
    return FilterBank(weights, mel_to_hz(edges_mel[1:-1]))


def log_mfbe(w: Waveform, cfg: FrontendConfig, bank: FilterBank | None = None) -> FeatureMatrix:
    """Log mel filterbank energies with per-utterance mean normalization.

    ln(max(bank @ power_row, 1e-10)) per frame, then the per-coefficient mean
    over the utterance is subtracted. Pass a prebuilt bank to skip rebuilding
    it per call (one bank per stream, shared read-only).
    """
    if bank is None:
        bank = build_filterbank(cfg, w.sample_rate_hz)
    frames = frame_signal(w, cfg)
    power = power_spectrum(frames, cfg.n_fft)
    energies = power @ bank.weights.T
    logm = np.log(np.maximum(energies, ENERGY_FLOOR))
    logm -= logm.mean(axis=0, keepdims=True)
    return FeatureMatrix(logm, cfg)


def write_feature_file(fm: FeatureMatrix, path) -> None:
    """Binary dump: magic 'MFBE', u32 version, u32 T, u32 n_mels, f32 row-major."""
    t, n_mels = fm.frames.shape
    payload = fm.frames.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, n_mels))
        fh.write(payload)


def read_feature_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FeatureFileError(f"{path}: truncated header")
    if data[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {data[:4]!r}")
    version, t, n_mels = struct.unpack_from("<III", data, 4)
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    need = 16 + 4 * t * n_mels
    if len(data) < need:
        raise FeatureFileError(f"{path}: expected {need} bytes, got {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", count=t * n_mels, offset=16)
    return flat.reshape(t, n_mels).astype(np.float64)
