"""Command-line surface: synthdata, featurize, train, eval, det-plot.

Commands map onto the pipeline stages: generate or collect audio, extract
features, train the multi-stream model, score trials, and render reports.
Every command validates its whole configuration before touching the
filesystem. Exit codes: 0 success, 1 runtime or data error, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio import build_synth_corpus, load_manifest, read_wav
from .errors import StreamSVError
from .evaluation import (
    DetCurve,
    EvalResult,
    emit_report,
    evaluate_trials,
    format_metrics_line,
    load_trial_list,
    probit,
    render_det_svg,
)
from .features import FrontendConfig, build_filterbank, log_mfbe, write_feature_file
from .model import (
    DEFAULT_STREAMS,
    MultiStreamModel,
    NonFiniteLoss,
    StreamConfig,
    TrainConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class ConfigError(StreamSVError):
    pass


_STREAMS_BY_NAME = {s.name: s for s in DEFAULT_STREAMS}

# Profile -> overrides applied before config-file keys and flags.
PROFILES = {
    "desk": {},
    "paper": {"batch_speakers": 200, "epochs": 100},
}

_CONFIG_KEYS = {
    "streams", "embedding_dim", "frontend", "epochs", "batch_speakers",
    "segment_seconds", "lr_initial", "lr_decay", "lr_period", "weight_decay",
    "seed", "val_interval", "patience", "eval_seconds", "p_target",
}
_FRONTEND_KEYS = {"win_ms", "hop_ms", "n_fft", "n_mels"}


@dataclass
class RunConfig:
    """Validated configuration shared by the pipeline commands."""

    streams: tuple[StreamConfig, ...] = DEFAULT_STREAMS
    embedding_dim: int = 64
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    epochs: int = 100
    batch_speakers: int = 16
    segment_seconds: float = 2.0
    lr_initial: float = 0.001
    lr_decay: float = 0.95
    lr_period: int = 10
    weight_decay: float = 0.0
    seed: int = 0
    val_interval: int = 10
    patience: int = 3
    eval_seconds: float = 4.0
    p_target: float = 0.05

    def train_config(self, val_trials=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_speakers=self.batch_speakers,
            segment_seconds=self.segment_seconds,
            lr_initial=self.lr_initial,
            lr_decay=self.lr_decay,
            lr_period=self.lr_period,
            weight_decay=self.weight_decay,
            val_interval=self.val_interval,
            patience=self.patience,
            eval_seconds=self.eval_seconds,
            val_trials=val_trials,
        )

    def stream_frontends(self) -> list[FrontendConfig]:
        return [
            replace(self.frontend, f_low_hz=s.f_low_hz, f_high_hz=s.f_high_hz)
            for s in self.streams
        ]


def _parse_stream(entry) -> StreamConfig:
    if isinstance(entry, str):
        if entry not in _STREAMS_BY_NAME:
            raise ConfigError(
                f"unknown stream shorthand {entry!r}; known: {sorted(_STREAMS_BY_NAME)}"
            )
        return _STREAMS_BY_NAME[entry]
    if isinstance(entry, dict):
        if set(entry) != {"name", "f_low_hz", "f_high_hz"}:
            raise ConfigError(f"stream entry needs name/f_low_hz/f_high_hz, got {sorted(entry)}")
        return StreamConfig(str(entry["name"]), float(entry["f_low_hz"]), float(entry["f_high_hz"]))
    raise ConfigError(f"stream entry must be a name or an object, got {type(entry).__name__}")


def load_run_config(path: str | None, profile: str, seed: int | None) -> RunConfig:
    """Merge defaults <- profile <- config file <- command-line seed."""
    merged: dict = dict(PROFILES[profile])
    if path is not None:
        cfg_path = Path(path)
        if not cfg_path.is_file():
            raise ConfigError(f"config file not found: {cfg_path}")
        try:
            data = json.loads(cfg_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg_path}: not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{cfg_path}: top level must be an object")
        unknown = set(data) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"{cfg_path}: unknown keys {sorted(unknown)}")
        merged.update(data)
    if seed is not None:
        merged["seed"] = seed

    try:
        kwargs: dict = {}
        if "streams" in merged:
            entries = merged.pop("streams")
            if not entries:
                raise ConfigError("streams list must not be empty")
            kwargs["streams"] = tuple(_parse_stream(e) for e in entries)
        if "frontend" in merged:
            fe = merged.pop("frontend")
            if not isinstance(fe, dict) or set(fe) - _FRONTEND_KEYS:
                raise ConfigError(f"frontend keys must be among {sorted(_FRONTEND_KEYS)}")
            kwargs["frontend"] = FrontendConfig(**fe)
        cfg = RunConfig(**merged, **kwargs)
        # surface band/framing problems now, before any command does work
        cfg.train_config()
        for fe in cfg.stream_frontends():
            build_filterbank(fe)
        names = [s.name for s in cfg.streams]
        if len(set(names)) != len(names):
            raise ConfigError(f"stream names must be unique, got {names}")
        if not 0.0 < cfg.p_target < 1.0:
            raise ConfigError(f"p_target must lie in (0, 1), got {cfg.p_target}")
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    except StreamSVError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _refuse_existing(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        listing = "\n  ".join(existing)
        raise StreamSVError(
            f"refusing to overwrite existing outputs (pass --force):\n  {listing}"
        )


def cmd_synthdata(args) -> int:
    if args.speakers < 2:
        raise ConfigError(f"need at least 2 speakers, got {args.speakers}")
    if args.utts < 3:
        raise ConfigError(f"need at least 3 utterances per speaker, got {args.utts}")
    out_dir = Path(args.out)
    _refuse_existing([out_dir / "manifest.tsv", out_dir / "trials.txt"], args.force)
    manifest_path, trials_path = build_synth_corpus(
        out_dir,
        n_speakers=args.speakers,
        utts_per_speaker=args.utts,
        seconds=args.seconds,
        seed=args.seed if args.seed is not None else 0,
    )
    print(f"wrote {manifest_path}")
    print(f"wrote {trials_path}")
    return EXIT_OK


def cmd_featurize(args) -> int:
    cfg = load_run_config(args.config, args.profile, args.seed)
    manifest_path = _require_file(args.manifest, "manifest")
    manifest = load_manifest(manifest_path)
    out_dir = Path(args.out)

    frontends = cfg.stream_frontends()
    banks = [build_filterbank(fe) for fe in frontends]
    targets = []
    for speaker_id, wav_path in manifest.entries:
        stem = Path(wav_path).stem
        for stream in cfg.streams:
            targets.append(out_dir / stream.name / speaker_id / f"{stem}.mfbe")
    if len(set(targets)) != len(targets):
        raise StreamSVError("feature output paths collide; rename utterance files")
    _refuse_existing(targets, args.force)

    idx = 0
    for speaker_id, wav_path in manifest.entries:
        w = read_wav(wav_path)
        for fe, bank in zip(frontends, banks):
            feats = log_mfbe(w, fe, bank)
            targets[idx].parent.mkdir(parents=True, exist_ok=True)
            write_feature_file(feats, targets[idx])
            idx += 1
    print(f"wrote {idx} feature files under {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.profile, args.seed)
    manifest_path = _require_file(args.manifest, "manifest")
    manifest = load_manifest(manifest_path)
    val_trials = load_trial_list(_require_file(args.trials, "trial list")) if args.trials else None

    ckpt_path = Path(args.out)
    curve_path = Path(args.curve) if args.curve else ckpt_path.parent / "curve.csv"
    _refuse_existing([ckpt_path, curve_path], args.force)

    n_classes = len(manifest.by_speaker())
    rng = np.random.default_rng(cfg.seed)
    model = build_model(
        cfg.streams, cfg.embedding_dim, n_classes=n_classes, rng=rng, frontend=cfg.frontend
    )
    train_cfg = cfg.train_config(val_trials=val_trials)

    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    curve_path.parent.mkdir(parents=True, exist_ok=True)
    curve_fh = open(curve_path, "w", encoding="utf-8")
    curve_fh.write("epoch,loss,val_eer\n")

    def on_epoch(point):
        val = "" if point.val_eer is None else repr(point.val_eer)
        curve_fh.write(f"{point.epoch},{point.mean_loss!r},{val}\n")
        curve_fh.flush()
        # checkpoint every epoch so an aborted run keeps its last good state
        save_checkpoint(model, ckpt_path)
        line = f"epoch {point.epoch}: loss {point.mean_loss:.4f}"
        if point.val_eer is not None:
            line += f"  val EER {100 * point.val_eer:.2f}%"
        print(line)

    try:
        train(model, manifest, train_cfg, rng, on_epoch=on_epoch)
    except NonFiniteLoss as exc:
        curve_fh.close()
        print(f"error: {exc}; last-good checkpoint kept at {ckpt_path}", file=sys.stderr)
        return EXIT_RUNTIME
    curve_fh.close()
    _render_curve_png(curve_path, curve_path.with_suffix(".png"))
    print(f"wrote {ckpt_path}")
    print(f"wrote {curve_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.profile, args.seed)
    p_target = args.p_target if args.p_target is not None else cfg.p_target
    if not 0.0 < p_target < 1.0:
        raise ConfigError(f"p_target must lie in (0, 1), got {p_target}")
    eval_seconds = args.eval_seconds if args.eval_seconds is not None else cfg.eval_seconds
    if eval_seconds <= 0.0:
        raise ConfigError(f"eval seconds must be > 0, got {eval_seconds}")
    trials = load_trial_list(_require_file(args.trials, "trial list"))
    ckpt_paths = [_require_file(p, "checkpoint") for p in args.checkpoints]

    prefix = Path(args.out)
    suffixes = [".scores.txt", ".metrics.txt", ".det.csv", ".det.svg", ".det.png"]
    _refuse_existing([prefix.with_name(prefix.name + s) for s in suffixes], args.force)

    results: dict[str, EvalResult] = {}
    for p in ckpt_paths:
        model = load_checkpoint(p)
        name = p.stem
        if name in results:
            name = f"{name}#{len(results)}"
        results[name] = evaluate_trials(model, trials, eval_seconds, p_target=p_target)

    written = emit_report(results, prefix)
    png_path = prefix.with_name(prefix.name + ".det.png")
    _render_det_png({name: res.det for name, res in results.items()}, png_path)
    for name, res in results.items():
        print(format_metrics_line(name, res))
    for path in written + [png_path]:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_det_plot(args) -> int:
    prefix = Path(args.out)
    _refuse_existing(
        [prefix.with_name(prefix.name + ".det.svg"), prefix.with_name(prefix.name + ".det.png")],
        args.force,
    )
    curves: dict[str, DetCurve] = {}
    for csv_path in args.csvs:
        path = _require_file(csv_path, "det csv")
        curves.update(_read_det_csv(path))
    if not curves:
        raise StreamSVError("no DET points found in the given csv files")
    svg_path = prefix.with_name(prefix.name + ".det.svg")
    svg_path.write_text(render_det_svg(curves), encoding="utf-8")
    png_path = prefix.with_name(prefix.name + ".det.png")
    _render_det_png(curves, png_path)
    print(f"wrote {svg_path}")
    print(f"wrote {png_path}")
    return EXIT_OK


def _read_det_csv(path: Path) -> dict[str, DetCurve]:
    rows: dict[str, list[tuple[float, float, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header not in (
            ["threshold", "false_alarm_rate", "miss_rate"],
            ["system", "threshold", "false_alarm_rate", "miss_rate"],
        ):
            raise StreamSVError(f"{path}: unrecognized det.csv header {header}")
        named = header[0] == "system"
        for lineno, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            if len(parts) != len(header):
                raise StreamSVError(f"{path}:{lineno}: expected {len(header)} fields")
            name = parts[0] if named else path.stem
            try:
                t, fa, miss = (float(v) for v in parts[-3:])
            except ValueError as exc:
                raise StreamSVError(f"{path}:{lineno}: bad number: {exc}") from exc
            rows.setdefault(name, []).append((t, fa, miss))
    return {
        name: DetCurve(
            thresholds=np.array([r[0] for r in pts]),
            false_alarm_rates=np.array([r[1] for r in pts]),
            miss_rates=np.array([r[2] for r in pts]),
        )
        for name, pts in rows.items()
    }


_DET_TICKS = [0.001, 0.01, 0.05, 0.10, 0.20, 0.40]


def _render_det_png(curves: dict[str, DetCurve], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for name, curve in curves.items():
        ax.plot(probit(curve.false_alarm_rates), probit(curve.miss_rates), label=name)
    ticks = probit(np.array(_DET_TICKS))
    labels = [f"{100 * t:g}" for t in _DET_TICKS]
    ax.set_xticks(ticks, labels)
    ax.set_yticks(ticks, labels)
    ax.set_xlim(ticks[0], ticks[-1])
    ax.set_ylim(ticks[0], ticks[-1])
    ax.set_xlabel("False alarm rate (%)")
    ax.set_ylabel("Miss rate (%)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _render_curve_png(curve_csv: Path, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs, losses, val_points = [], [], []
    with open(curve_csv, "r", encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            e, loss, val = line.rstrip("\n").split(",")
            epochs.append(int(e))
            losses.append(float(loss))
            if val:
                val_points.append((int(e), float(val)))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, label="training loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if val_points:
        ax2 = ax.twinx()
        ax2.plot(
            [e for e, _ in val_points],
            [100 * v for _, v in val_points],
            "o--",
            color="tab:red",
            label="val EER (%)",
        )
        ax2.set_ylabel("val EER (%)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; keys override the profile")
    common.add_argument("--seed", type=int, help="RNG seed; overrides the config file")
    common.add_argument(
        "--profile", choices=sorted(PROFILES), default="desk",
        help="hyperparameter profile (default: desk)",
    )
    common.add_argument(
        "--force", action="store_true", help="overwrite existing output files"
    )

    p = argparse.ArgumentParser(
        prog="streamsv",
        description="Multi-stream speaker-verification toolkit.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synthdata", parents=[common], help="generate a synthetic WAV corpus")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--speakers", type=int, default=20)
    sp.add_argument("--utts", type=int, default=6, help="utterances per speaker")
    sp.add_argument("--seconds", type=float, default=3.0, help="utterance length")
    sp.set_defaults(func=cmd_synthdata)

    sp = sub.add_parser("featurize", parents=[common], help="dump per-stream features")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_featurize)

    sp = sub.add_parser("train", parents=[common], help="train a model from a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--curve", help="learning-curve CSV path (default: curve.csv beside --out)")
    sp.add_argument("--trials", help="validation trial list for early stopping")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="score trials and emit reports")
    sp.add_argument("checkpoints", nargs="+", help="one or more checkpoints to compare")
    sp.add_argument("--trials", required=True)
    sp.add_argument("--out", required=True, help="report path prefix")
    sp.add_argument("--p-target", type=float, dest="p_target")
    sp.add_argument("--eval-seconds", type=float, dest="eval_seconds")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("det-plot", parents=[common], help="re-render DET plots from det.csv")
    sp.add_argument("csvs", nargs="+", help="det.csv files")
    sp.add_argument("--out", required=True, help="output path prefix")
    sp.set_defaults(func=cmd_det_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StreamSVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
