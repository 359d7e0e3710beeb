"""Multi-stream verification model: assembly, training loop, checkpoints.

A model is a set of parallel encoder streams, each seeing the same utterance
through its own band-limited filterbank. Per-stream embeddings are fused by
an elementwise mean, and one classification head plus one metric head train
the whole stack jointly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Manifest, Waveform, read_wav, sample_segment
from .errors import StreamSVError
from .evaluation import TrialList, evaluate_trials
from .features import FilterBank, FrontendConfig, build_filterbank, log_mfbe
from .losses import (
    ANGULAR_B_INIT,
    ANGULAR_W_INIT,
    ANGULAR_W_MIN,
    DegenerateBatch,
    MetricBatch,
    combined_loss,
)
from .nn import Encoder, Parameter, ParameterSet, init_xavier_uniform
from .optim import AdamState, LrSchedule, adam_step, early_stop, lr_at_epoch

CHECKPOINT_MAGIC = b"MSSV"
CHECKPOINT_VERSION = 1

DEFAULT_EMBEDDING_DIM = 64


class ModelError(StreamSVError):
    pass


class TrainError(ModelError):
    pass


class NonFiniteLoss(TrainError):
    pass


class CheckpointError(ModelError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    """One stream's frequency selector: a name and its band edges in Hz."""

    name: str
    f_low_hz: float
    f_high_hz: float


# The three bands of the reference architecture: full, low, high.
DEFAULT_STREAMS = (
    StreamConfig("FB", 20.0, 8000.0),
    StreamConfig("LF", 20.0, 2000.0),
    StreamConfig("HF", 1000.0, 8000.0),
)
FB_ONLY = (DEFAULT_STREAMS[0],)


@dataclass
class Stream:
    config: StreamConfig
    frontend: FrontendConfig
    bank: FilterBank
    encoder: Encoder


@dataclass
class CurvePoint:
    epoch: int
    mean_loss: float
    val_eer: float | None = None


@dataclass
class LearningCurve:
    points: list[CurvePoint] = field(default_factory=list)

    def __post_init__(self):
        for i, p in enumerate(self.points):
            if p.epoch != i:
                raise ModelError("learning-curve epochs must increase from 0")

    def append(self, point: CurvePoint) -> None:
        expected = len(self.points)
        if point.epoch != expected:
            raise ModelError(f"expected epoch {expected}, got {point.epoch}")
        self.points.append(point)


@dataclass
class TrainConfig:
    """Loop hyperparameters; stream layout and dims live on the model."""

    epochs: int = 100
    batch_speakers: int = 16
    segment_seconds: float = 2.0
    lr_initial: float = 0.001
    lr_decay: float = 0.95
    lr_period: int = 10
    weight_decay: float = 0.0
    val_interval: int = 10
    patience: int = 3
    eval_seconds: float = 4.0
    val_trials: TrialList | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_speakers < 2:
            raise TrainError(f"batch_speakers must be >= 2, got {self.batch_speakers}")
        if self.segment_seconds <= 0.0:
            raise TrainError(f"segment_seconds must be > 0, got {self.segment_seconds}")
        if self.val_interval < 1:
            raise TrainError(f"val_interval must be >= 1, got {self.val_interval}")
        if self.patience < 1:
            raise TrainError(f"patience must be >= 1, got {self.patience}")
        if self.weight_decay < 0.0:
            raise TrainError(f"weight_decay must be >= 0, got {self.weight_decay}")
        # LrSchedule re-validates its own fields
        LrSchedule(self.lr_initial, self.lr_decay, self.lr_period)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_initial, self.lr_decay, self.lr_period)


class MultiStreamModel:
    """Parallel band-limited encoders fused by an elementwise embedding mean."""

    def __init__(self, streams: list[Stream], class_weights: np.ndarray,
                 embedding_dim: int):
        if not streams:
            raise ModelError("need at least one stream")
        names = [s.config.name for s in streams]
        if len(set(names)) != len(names):
            raise ModelError(f"stream names must be unique, got {names}")
        n_mels = {s.frontend.n_mels for s in streams}
        if len(n_mels) != 1:
            raise ModelError("all streams must share one n_mels")
        self.streams = streams
        self.embedding_dim = embedding_dim
        self.class_weights = Parameter(class_weights)
        if self.class_weights.value.ndim != 2 or self.class_weights.value.shape[1] != embedding_dim:
            raise ModelError(
                f"class_weights must be (n_classes, {embedding_dim}), "
                f"got {self.class_weights.value.shape}"
            )
        self.angular_w = Parameter(np.array(ANGULAR_W_INIT))
        self.angular_b = Parameter(np.array(ANGULAR_B_INIT))
        self.params = ParameterSet()
        for s in streams:
            for name, p in s.encoder.parameters():
                self.params.add(f"{s.config.name}.{name}", p)
        self.params.add("class_weights", self.class_weights)
        self.params.add("angular_w", self.angular_w)
        self.params.add("angular_b", self.angular_b)

    @property
    def n_classes(self) -> int:
        return self.class_weights.value.shape[0]

    @property
    def n_streams(self) -> int:
        return len(self.streams)

    def stream_features(self, w: Waveform) -> list[np.ndarray]:
        """Per-stream (T, n_mels) log-MFBE matrices for one waveform."""
        return [log_mfbe(w, s.frontend, s.bank).frames for s in self.streams]

    def forward_batch(self, feats_per_stream: list[np.ndarray]) -> np.ndarray:
        """Per-stream (B, T, n_mels) batches -> fused (B, D) embeddings."""
        if len(feats_per_stream) != self.n_streams:
            raise ModelError(
                f"expected {self.n_streams} feature batches, got {len(feats_per_stream)}"
            )
        outs = [s.encoder.forward(f) for s, f in zip(self.streams, feats_per_stream)]
        return np.mean(outs, axis=0)

    def backward_batch(self, grad_fused: np.ndarray) -> None:
        """Push fused-embedding grads through every stream encoder."""
        share = grad_fused / self.n_streams
        for s in self.streams:
            s.encoder.backward(share)

    def stream_embeddings(self, w: Waveform) -> np.ndarray:
        """(n_streams, D) matrix of per-stream embeddings for one utterance."""
        feats = self.stream_features(w)
        outs = [
            s.encoder.forward(f[None, :, :])[0] for s, f in zip(self.streams, feats)
        ]
        return np.stack(outs)

    def embed_utterance(self, w: Waveform) -> np.ndarray:
        """Final speaker embedding: mean over the per-stream embeddings."""
        return self.stream_embeddings(w).mean(axis=0)

    def clamp_metric_scale(self) -> None:
        """Keep the similarity scale positive after optimizer steps."""
        self.angular_w.value[...] = np.maximum(self.angular_w.value, ANGULAR_W_MIN)


def build_model(
    stream_configs=DEFAULT_STREAMS,
    embedding_dim: int = DEFAULT_EMBEDDING_DIM,
    n_classes: int = 2,
    rng: np.random.Generator | None = None,
    frontend: FrontendConfig | None = None,
) -> MultiStreamModel:
    """Assemble encoders, filterbanks, and heads with seeded initialization.

    Conv/linear weights are Kaiming-normal (fan-in mode) with zero biases;
    class weights are Xavier-uniform. `frontend` supplies the shared framing
    parameters; each stream overrides only the band edges.
    """
    if n_classes < 2:
        raise ModelError(f"n_classes must be >= 2, got {n_classes}")
    if embedding_dim < 1:
        raise ModelError(f"embedding_dim must be >= 1, got {embedding_dim}")
    rng = rng if rng is not None else np.random.default_rng(0)
    base = frontend if frontend is not None else FrontendConfig()
    streams = []
    for sc in stream_configs:
        fe = FrontendConfig(
            f_low_hz=sc.f_low_hz,
            f_high_hz=sc.f_high_hz,
            win_ms=base.win_ms,
            hop_ms=base.hop_ms,
            n_fft=base.n_fft,
            n_mels=base.n_mels,
        )
        bank = build_filterbank(fe)
        enc = Encoder(fe.n_mels, embedding_dim, rng=rng)
        streams.append(Stream(config=sc, frontend=fe, bank=bank, encoder=enc))
    class_weights = init_xavier_uniform(
        (n_classes, embedding_dim), fan_in=embedding_dim, fan_out=n_classes, rng=rng
    )
    return MultiStreamModel(streams, class_weights, embedding_dim)


def _pair_rounds(
    by_speaker: dict[str, list[str]], rng: np.random.Generator
) -> list[list[tuple[str, str, str]]]:
    """Shuffle each speaker's utterances into disjoint pairs, one per round."""
    pairs: dict[str, list[tuple[str, str]]] = {}
    for sid in sorted(by_speaker):
        utts = by_speaker[sid]
        if len(utts) < 2:
            continue
        order = rng.permutation(len(utts))
        pairs[sid] = [
            (utts[order[2 * i]], utts[order[2 * i + 1]]) for i in range(len(utts) // 2)
        ]
    if len(pairs) < 2:
        raise DegenerateBatch(
            f"need >= 2 speakers with >= 2 utterances, got {len(pairs)}"
        )
    n_rounds = max(len(p) for p in pairs.values())
    rounds = []
    for r in range(n_rounds):
        members = [(sid, *p[r]) for sid, p in sorted(pairs.items()) if len(p) > r]
        rounds.append(members)
    return rounds


def _make_batches(
    by_speaker: dict[str, list[str]], rng: np.random.Generator, batch_speakers: int
) -> list[list[tuple[str, str, str]]]:
    """One epoch's batches: per-round speaker shuffles cut into chunks."""
    batches = []
    for members in _pair_rounds(by_speaker, rng):
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        for at in range(0, len(shuffled), batch_speakers):
            chunk = shuffled[at : at + batch_speakers]
            if len(chunk) >= 2:  # the metric head needs >= 2 speakers
                batches.append(chunk)
    if not batches:
        raise DegenerateBatch("no trainable batches; too few speakers per round")
    return batches


def train(
    model: MultiStreamModel,
    manifest: Manifest,
    cfg: TrainConfig,
    rng: np.random.Generator,
    on_epoch=None,
) -> tuple[MultiStreamModel, LearningCurve]:
    """Joint training over all streams with the combined objective.

    Each epoch walks every speaker's utterance pairs in seeded-shuffled
    batches of up to batch_speakers speakers x 2 random segments, takes one
    Adam step per batch at the scheduled rate, and optionally scores a
    validation trial list every val_interval epochs for early stopping.
    `on_epoch` is called with each CurvePoint as it is recorded.
    """
    by_speaker = manifest.by_speaker()
    if len(by_speaker) < 2:
        raise TrainError(f"need >= 2 speakers, manifest has {len(by_speaker)}")
    if len(by_speaker) != model.n_classes:
        raise TrainError(
            f"model has {model.n_classes} classes but manifest {len(by_speaker)} speakers"
        )
    label_of = {sid: i for i, sid in enumerate(sorted(by_speaker))}
    waves: dict[str, Waveform] = {}
    for sid in sorted(by_speaker):
        for path in by_speaker[sid]:
            if path not in waves:
                waves[path] = read_wav(path)

    schedule = cfg.schedule()
    adam = AdamState(model.params)
    curve = LearningCurve()
    val_history: list[float] = []

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(schedule, epoch)
        losses = []
        for batch_idx, chunk in enumerate(_make_batches(by_speaker, rng, cfg.batch_speakers)):
            segments = []
            labels = []
            for sid, p1, p2 in chunk:
                segments.append(sample_segment(waves[p1], cfg.segment_seconds, rng))
                segments.append(sample_segment(waves[p2], cfg.segment_seconds, rng))
                labels.extend([label_of[sid], label_of[sid]])
            feats_per_stream = [
                np.stack([log_mfbe(seg, s.frontend, s.bank).frames for seg in segments])
                for s in model.streams
            ]
            fused = model.forward_batch(feats_per_stream)
            logits = fused @ model.class_weights.value.T
            metric = MetricBatch(fused.reshape(len(chunk), 2, model.embedding_dim))
            out = combined_loss(
                logits,
                labels,
                metric,
                float(model.angular_w.value),
                float(model.angular_b.value),
            )
            if not np.isfinite(out.value):
                raise NonFiniteLoss(
                    f"epoch {epoch} batch {batch_idx}: loss = {out.value}"
                )
            grad_fused = (
                out.grad_logits @ model.class_weights.value
                + out.grad_embeddings.reshape(fused.shape)
            )
            model.class_weights.grad += out.grad_logits.T @ fused
            model.angular_w.grad += out.grad_w
            model.angular_b.grad += out.grad_b
            model.backward_batch(grad_fused)
            if cfg.weight_decay > 0.0:
                for _, p in model.params.items():
                    p.grad += cfg.weight_decay * p.value
            adam_step(model.params, adam, lr)
            model.clamp_metric_scale()
            losses.append(out.value)

        val_eer = None
        if cfg.val_trials is not None and (epoch + 1) % cfg.val_interval == 0:
            val_eer = evaluate_trials(model, cfg.val_trials, cfg.eval_seconds).eer
            val_history.append(val_eer)
        point = CurvePoint(epoch=epoch, mean_loss=float(np.mean(losses)), val_eer=val_eer)
        curve.append(point)
        if on_epoch is not None:
            on_epoch(point)
        if val_history and early_stop(val_history, cfg.patience):
            break
    return model, curve


def _pack_tensor(name: str, value: np.ndarray) -> bytes:
    data = np.ascontiguousarray(value, dtype="<f4").tobytes()
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", value.ndim)
    head += b"".join(struct.pack("<Q", d) for d in value.shape)
    return head + data


def save_checkpoint(model: MultiStreamModel, path: str | Path) -> None:
    """Serialize configs and all parameters (binary32) with a trailing CRC32."""
    fe = model.streams[0].frontend
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack(
        "<IIIIdd",
        CHECKPOINT_VERSION,
        model.n_streams,
        fe.n_mels,
        model.embedding_dim,
        fe.win_ms,
        fe.hop_ms,
    )
    out += struct.pack("<I", fe.n_fft)
    for s in model.streams:
        raw = s.config.name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<dd", s.config.f_low_hz, s.config.f_high_hz)
        tensors = s.encoder.parameters()
        out += struct.pack("<I", len(tensors))
        for name, p in tensors:
            out += _pack_tensor(name, p.value)
    head_tensors = [
        ("class_weights", model.class_weights.value),
        ("angular_w", model.angular_w.value),
        ("angular_b", model.angular_b.value),
    ]
    out += struct.pack("<I", len(head_tensors))
    for name, value in head_tensors:
        out += _pack_tensor(name, value)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"{self.path}: ran out of bytes at offset {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensor(r: _Reader) -> tuple[str, np.ndarray]:
    (name_len,) = r.unpack("<H")
    name = r.take(name_len).decode("utf-8")
    (rank,) = r.unpack("<B")
    dims = tuple(r.unpack("<Q")[0] for _ in range(rank))
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float64)
    return name, data.reshape(dims)


def load_checkpoint(path: str | Path) -> MultiStreamModel:
    """Rebuild a model from a checkpoint, verifying magic, version, and CRC."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 8:
        raise TruncatedFile(f"{path}: only {len(buf)} bytes")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: bad magic {buf[:4]!r}")
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    actual_crc = zlib.crc32(buf[:-4])
    if stored_crc != actual_crc:
        raise ChecksumMismatch(
            f"{path}: CRC32 {actual_crc:#010x} != stored {stored_crc:#010x}"
        )
    r = _Reader(buf[:-4], path)
    r.take(4)  # magic
    version, n_streams, n_mels, embedding_dim, win_ms, hop_ms = r.unpack("<IIIIdd")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    (n_fft,) = r.unpack("<I")

    streams = []
    stream_tensors: list[dict[str, np.ndarray]] = []
    for _ in range(n_streams):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        f_low, f_high = r.unpack("<dd")
        (n_tensors,) = r.unpack("<I")
        tensors = dict(_read_tensor(r) for _ in range(n_tensors))
        sc = StreamConfig(name, f_low, f_high)
        fe = FrontendConfig(
            f_low_hz=f_low, f_high_hz=f_high, win_ms=win_ms, hop_ms=hop_ms,
            n_fft=n_fft, n_mels=n_mels,
        )
        enc = Encoder(n_mels, embedding_dim, rng=None)
        streams.append(Stream(config=sc, frontend=fe, bank=build_filterbank(fe), encoder=enc))
        stream_tensors.append(tensors)

    (n_head,) = r.unpack("<I")
    head = dict(_read_tensor(r) for _ in range(n_head))
    for key in ("class_weights", "angular_w", "angular_b"):
        if key not in head:
            raise CheckpointError(f"{path}: missing head tensor {key!r}")

    model = MultiStreamModel(streams, head["class_weights"], embedding_dim)
    model.angular_w.value[...] = head["angular_w"]
    model.angular_b.value[...] = head["angular_b"]
    for s, tensors in zip(model.streams, stream_tensors):
        for name, p in s.encoder.parameters():
            if name not in tensors:
                raise CheckpointError(f"{path}: stream {s.config.name} missing {name!r}")
            if tensors[name].shape != p.value.shape:
                raise CheckpointError(
                    f"{path}: tensor {s.config.name}.{name} has shape "
                    f"{tensors[name].shape}, expected {p.value.shape}"
                )
            p.value[...] = tensors[name]
    return model
