"""PCM WAV ingestion, dataset manifests, segment sampling, and synthetic speakers.

Only 16-bit mono 16 kHz PCM is accepted; there is no resampling. Utterances
shorter than a requested segment are cyclically tiled rather than rejected.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StreamSVError

PIPELINE_RATE_HZ = 16000

# Octave band edges for synthetic spectral envelopes: eight bands covering
# [31.25, 8000) Hz, band k = [31.25 * 2^k, 31.25 * 2^(k+1)).
N_OCTAVE_BANDS = 8
OCTAVE_BASE_HZ = 31.25


class AudioError(StreamSVError):
    pass


class MalformedContainer(AudioError):
    """RIFF/WAVE structure is broken (bad magic, truncated or missing chunks)."""


class UnsupportedFormat(AudioError):
    """Valid container, but not PCM16 / mono / 16 kHz."""


class ParseError(AudioError):
    """Manifest line could not be parsed; message names the line number."""


class DuplicatePath(AudioError):
    """The same utterance path appears twice in one manifest."""


@dataclass
class Waveform:
    """Mono PCM audio in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate_hz: int = PIPELINE_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioError("waveform must be a non-empty 1-D sample sequence")
        if self.sample_rate_hz <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate_hz}")
        lo, hi = float(self.samples.min()), float(self.samples.max())
        if lo < -1.0 or hi > 1.0:
            raise AudioError(f"samples outside [-1, 1]: min={lo:g} max={hi:g}")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class Manifest:
    """Ordered (speaker_id, utterance_path) entries for a training run."""

    entries: list[tuple[str, str]] = field(default_factory=list)

    def by_speaker(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for speaker, path in self.entries:
            out.setdefault(speaker, []).append(path)
        return out


@dataclass
class SpeakerProfile:
    """Synthetic speaker: per-octave spectral envelope plus a fundamental."""

    speaker_id: str
    band_gains: tuple[float, ...]
    fundamental_hz: float

    def __post_init__(self):
        self.band_gains = tuple(float(g) for g in self.band_gains)
        if len(self.band_gains) != N_OCTAVE_BANDS:
            raise AudioError(
                f"band_gains needs exactly {N_OCTAVE_BANDS} values, got {len(self.band_gains)}"
            )
        if any(g < 0.1 or g > 1.0 for g in self.band_gains):
            raise AudioError("band_gains must lie within [0.1, 1.0]")
        if not 80.0 <= self.fundamental_hz <= 300.0:
            raise AudioError(f"fundamental_hz {self.fundamental_hz} outside [80, 300]")


def read_wav(path) -> Waveform:
    """Parse a RIFF/WAVE file; accepts only PCM16, mono, 16 kHz.

    Samples are the raw PCM values divided by 32768.0, in file order.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF":
        raise MalformedContainer(f"{path}: missing RIFF magic")
    if data[8:12] != b"WAVE":
        raise MalformedContainer(f"{path}: RIFF form type is not WAVE")

    fmt = None
    pcm = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise MalformedContainer(f"{path}: chunk {chunk_id!r} truncated")
        if chunk_id == b"fmt ":
            if size < 16:
                raise MalformedContainer(f"{path}: fmt chunk too short ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            pcm = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise MalformedContainer(f"{path}: no fmt chunk")
    if pcm is None:
        raise MalformedContainer(f"{path}: no data chunk")

    tag, channels, rate, _byte_rate, _block_align, bits = fmt
    if tag != 1:
        raise UnsupportedFormat(f"{path}: format tag {tag}, only PCM (1) supported")
    if channels != 1:
        raise UnsupportedFormat(f"{path}: {channels} channels, only mono supported")
    if bits != 16:
        raise UnsupportedFormat(f"{path}: {bits}-bit samples, only 16-bit supported")
    if rate != PIPELINE_RATE_HZ:
        raise UnsupportedFormat(f"{path}: sample rate {rate}, only {PIPELINE_RATE_HZ} supported")
    if len(pcm) < 2:
        raise MalformedContainer(f"{path}: empty data chunk")

    samples = np.frombuffer(pcm[: len(pcm) - (len(pcm) % 2)], dtype="<i2")
    return Waveform(samples.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    """Write PCM16 mono WAV; quantization error is at most 1/32768 per sample."""
    q = np.clip(np.rint(w.samples * 32768.0), -32768, 32767).astype("<i2")
    pcm = q.tobytes()
    hdr = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(pcm),
        b"WAVE",
        b"fmt ",
        16,
        1,  # PCM
        1,  # mono
        w.sample_rate_hz,
        w.sample_rate_hz * 2,
        2,
        16,
        b"data",
        len(pcm),
    )
    Path(path).write_bytes(hdr + pcm)


def take_segment(w: Waveform, duration_s: float, offset: int = 0) -> Waveform:
    """Deterministic contiguous segment of round(duration * rate) samples.

    Inputs shorter than the request are cyclically tiled to the exact target
    length first (in which case offset must be 0).
    """
    if duration_s <= 0:
        raise AudioError(f"duration_s must be positive, got {duration_s}")
    n_out = int(round(duration_s * w.sample_rate_hz))
    x = w.samples
    if x.size < n_out:
        reps = math.ceil(n_out / x.size)
        x = np.tile(x, reps)[:n_out]
        return Waveform(x.copy(), w.sample_rate_hz)
    if offset < 0 or offset + n_out > x.size:
        raise AudioError(f"offset {offset} out of range for segment of {n_out}")
    return Waveform(x[offset : offset + n_out].copy(), w.sample_rate_hz)


def sample_segment(w: Waveform, duration_s: float, rng: np.random.Generator) -> Waveform:
    """Segment of round(duration * rate) samples at a uniformly random offset.

    Shorter inputs wrap around (cyclic tiling); exact-length inputs come back
    unchanged (offset 0 is the only valid choice).
    """
    if duration_s <= 0:
        raise AudioError(f"duration_s must be positive, got {duration_s}")
    n_out = int(round(duration_s * w.sample_rate_hz))
    slack = w.samples.size - n_out
    offset = int(rng.integers(0, slack + 1)) if slack > 0 else 0
    return take_segment(w, duration_s, offset)


def load_manifest(path) -> Manifest:
    """Read a `speaker_id<TAB>path` manifest; '#' lines are comments.

    Relative paths are resolved against the manifest's own directory, so a
    corpus directory can be moved or mounted anywhere.
    """
    base = Path(path).parent
    entries: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" not in line:
                raise ParseError(f"{path}:{lineno}: expected speaker_id<TAB>path")
            speaker, rel = line.split("\t", 1)
            speaker, rel = speaker.strip(), rel.strip()
            if not speaker or not rel:
                raise ParseError(f"{path}:{lineno}: empty speaker id or path")
            if rel in seen:
                raise DuplicatePath(f"{path}:{lineno}: duplicate path {rel!r}")
            seen.add(rel)
            entries.append((speaker, str(base / rel) if not Path(rel).is_absolute() else rel))
    return Manifest(entries)


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# speaker_id<TAB>relative_path\n")
        for speaker, rel in entries:
            fh.write(f"{speaker}\t{rel}\n")


def _octave_band(f_hz: float) -> int:
    band = int(math.floor(math.log2(f_hz / OCTAVE_BASE_HZ)))
    return min(max(band, 0), N_OCTAVE_BANDS - 1)


def synth_utterance(
    profile: SpeakerProfile, duration_s: float, rng: np.random.Generator
) -> Waveform:
    """Harmonic stack shaped by the profile's octave-band gains plus noise.

    Harmonics of the fundamental up to (just below) the Nyquist frequency get
    the gain of the octave band they fall into, with a random phase per
    harmonic; white Gaussian noise is mixed in at 20 dB SNR and the result is
    peak-normalized to 0.95. Pure function of (profile, duration, rng state).
    """
    if duration_s <= 0:
        raise AudioError(f"duration_s must be positive, got {duration_s}")
    sr = PIPELINE_RATE_HZ
    n = int(round(duration_s * sr))
    t = np.arange(n, dtype=np.float64) / sr

    f0 = profile.fundamental_hz
    n_harm = int(math.floor((sr / 2 - 1e-9) / f0))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=n_harm)
    sig = np.zeros(n, dtype=np.float64)
    for h in range(1, n_harm + 1):
        f = h * f0
        gain = profile.band_gains[_octave_band(f)]
        sig += gain * np.sin(2.0 * math.pi * f * t + phases[h - 1])

    p_signal = float(np.mean(sig**2))
    noise = rng.normal(0.0, math.sqrt(p_signal / 100.0), size=n)  # 20 dB SNR
    mix = sig + noise
    mix *= 0.95 / float(np.max(np.abs(mix)))
    return Waveform(mix, sr)


def make_profiles(n_speakers: int, rng: np.random.Generator) -> list[SpeakerProfile]:
    """Draw n_speakers random synthetic profiles (gains U[0.1,1], f0 U[80,300])."""
    profiles = []
    for i in range(n_speakers):
        gains = rng.uniform(0.1, 1.0, size=N_OCTAVE_BANDS)
        f0 = float(rng.uniform(80.0, 300.0))
        profiles.append(SpeakerProfile(f"spk{i:03d}", tuple(gains), f0))
    return profiles


def build_synth_corpus(
    out_dir,
    n_speakers: int,
    utts_per_speaker: int,
    seconds: float,
    seed: int,
    holdout_per_speaker: int = 2,
):
    """Write a deterministic synthetic corpus: WAVs, manifest, trial list.

    The manifest lists only the training split (the first utterances of each
    speaker); the trial list pairs the held-out utterances, one same-speaker
    target pair per speaker plus an equal number of seeded cross-speaker
    nontarget pairs (50/50 balance). Utterances of one speaker share its
    spectral envelope; the fundamental is jittered ±2% per utterance.

    Returns (manifest_path, trials_path).
    """
    if n_speakers < 2:
        raise AudioError("need at least 2 speakers")
    if utts_per_speaker < holdout_per_speaker + 1:
        raise AudioError(
            f"utts_per_speaker must exceed holdout ({holdout_per_speaker}), got {utts_per_speaker}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    profiles = make_profiles(n_speakers, rng)

    train_entries: list[tuple[str, str]] = []
    held_out: list[list[str]] = []
    for profile in profiles:
        spk_dir = out_dir / profile.speaker_id
        spk_dir.mkdir(exist_ok=True)
        held: list[str] = []
        for u in range(utts_per_speaker):
            jitter = 1.0 + 0.02 * float(rng.uniform(-1.0, 1.0))
            f0 = min(max(profile.fundamental_hz * jitter, 80.0), 300.0)
            utt_profile = SpeakerProfile(profile.speaker_id, profile.band_gains, f0)
            wav = synth_utterance(utt_profile, seconds, rng)
            rel = f"{profile.speaker_id}/utt{u:03d}.wav"
            write_wav(out_dir / rel, wav)
            if u < utts_per_speaker - holdout_per_speaker:
                train_entries.append((profile.speaker_id, rel))
            else:
                held.append(rel)
        held_out.append(held)

    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest_path, train_entries)

    # Target trials: the two held-out utterances of each speaker. Nontargets:
    # an equal number of seeded cross-speaker pairs, no repeats.
    trials: list[tuple[int, str, str]] = []
    for held in held_out:
        trials.append((1, held[0], held[-1]))
    n_target = len(trials)
    used: set[tuple[int, int]] = set()
    while len(trials) < 2 * n_target:
        i, j = rng.integers(0, n_speakers, size=2)
        if i == j or (int(i), int(j)) in used:
            continue
        used.add((int(i), int(j)))
        trials.append((0, held_out[i][0], held_out[j][-1]))

    trials_path = out_dir / "trials.txt"
    with open(trials_path, "w", encoding="utf-8") as fh:
        for label, enroll, test in trials:
            fh.write(f"{label} {enroll} {test}\n")
    return manifest_path, trials_path
