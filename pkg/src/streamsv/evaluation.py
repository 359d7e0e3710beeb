"""Trial scoring, EER / minDCF metrics, DET curves, and report emission.

All metrics come from one exhaustive threshold sweep: acceptance is
`score >= t`, with t taken at the midpoints between consecutive distinct
scores plus the two infinite endpoints. Rates are integer trial counts over
class totals, so results are exact and directly comparable with a
definition-level oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Mapping

import numpy as np

from .audio import AudioError, ParseError, read_wav, take_segment
from .errors import StreamSVError

DEFAULT_P_TARGET = 0.05
DEFAULT_EVAL_SECONDS = 4.0

_STANDARD_NORMAL = NormalDist()


class EvalError(StreamSVError):
    pass


class DimMismatch(EvalError):
    pass


class SingleClass(EvalError):
    pass


@dataclass(frozen=True)
class Trial:
    is_target: bool
    enroll_path: str
    test_path: str


@dataclass
class TrialList:
    trials: list[Trial]

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)


@dataclass
class TrialScoreSet:
    """Per-trial similarity scores with their target/nontarget labels."""

    scores: np.ndarray
    is_target: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_target = np.asarray(self.is_target, dtype=bool)
        if self.scores.shape != self.is_target.shape or self.scores.ndim != 1:
            raise EvalError(
                f"scores {self.scores.shape} and labels {self.is_target.shape} "
                "must be equal-length 1-D arrays"
            )
        if not np.all(np.isfinite(self.scores)):
            raise EvalError("trial scores must all be finite")

    def require_both_classes(self) -> None:
        n_target = int(self.is_target.sum())
        if n_target == 0 or n_target == self.scores.size:
            raise SingleClass(
                f"need both classes, got {n_target} target of {self.scores.size} trials"
            )


@dataclass
class DetCurve:
    """Operating points from the threshold sweep, ordered by threshold.

    Along the sequence the threshold rises, so miss_rates are non-decreasing
    and false_alarm_rates non-increasing.
    """

    thresholds: np.ndarray
    false_alarm_rates: np.ndarray
    miss_rates: np.ndarray

    def __len__(self) -> int:
        return self.thresholds.size


@dataclass
class EvalResult:
    """Everything evaluate_trials produces for one system on one trial list."""

    trials: TrialList
    score_set: TrialScoreSet
    eer: float
    min_dcf: float
    p_target: float
    det: DetCurve


def load_trial_list(path: str | Path) -> TrialList:
    """Parse `label enroll_path test_path` lines; label is 1 (target) or 0.

    Relative utterance paths are resolved against the trial list's directory.
    """
    path = Path(path)
    base = path.parent

    def resolve(p: str) -> str:
        return p if Path(p).is_absolute() else str(base / p)

    trials: list[Trial] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(
                    f"{path}:{lineno}: expected 'label enroll test', got {len(parts)} fields"
                )
            if parts[0] not in ("0", "1"):
                raise ParseError(f"{path}:{lineno}: label must be 0 or 1, got {parts[0]!r}")
            trials.append(Trial(parts[0] == "1", resolve(parts[1]), resolve(parts[2])))
    return TrialList(trials)


def write_trial_list(trials: TrialList, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{1 if t.is_target else 0} {t.enroll_path} {t.test_path}\n")


def score_trial(e1: np.ndarray, e2: np.ndarray) -> float:
    """Negative Euclidean distance; 0 for identical embeddings, higher is closer."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise DimMismatch(f"embedding dims differ: {e1.shape} vs {e2.shape}")
    return float(-np.sqrt(np.sum((e1 - e2) ** 2)))


def _threshold_sweep(s: TrialScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, false-alarm rates, miss rates) at every distinct operating point."""
    s.require_both_classes()
    tgt = np.sort(s.scores[s.is_target])
    non = np.sort(s.scores[~s.is_target])
    distinct = np.unique(s.scores)
    thresholds = np.concatenate(([-np.inf], (distinct[:-1] + distinct[1:]) / 2.0, [np.inf]))
    # accept iff score >= t: misses are targets below t, false alarms nontargets at/above
    miss = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    fa = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return thresholds, fa, miss


def compute_eer(s: TrialScoreSet) -> float:
    """Rate at which miss and false-alarm curves cross, interpolating between
    adjacent operating points when no threshold hits the crossing exactly."""
    _, fa, miss = _threshold_sweep(s)
    diff = miss - fa  # non-decreasing, from -1 at t=-inf to +1 at t=+inf
    idx = int(np.argmax(diff >= 0.0))
    if diff[idx] == 0.0:
        return float(miss[idx])
    d1 = fa[idx - 1] - miss[idx - 1]
    d2 = miss[idx] - fa[idx]
    alpha = d1 / (d1 + d2)
    return float(miss[idx - 1] + alpha * (miss[idx] - miss[idx - 1]))


def compute_min_dcf(
    s: TrialScoreSet,
    p_target: float = DEFAULT_P_TARGET,
    c_miss: float = 1.0,
    c_fa: float = 1.0,
) -> float:
    """Minimum normalized detection cost over all thresholds."""
    if not 0.0 < p_target < 1.0:
        raise EvalError(f"p_target must lie in (0, 1), got {p_target}")
    if c_miss <= 0.0 or c_fa <= 0.0:
        raise EvalError(f"costs must be > 0, got c_miss={c_miss} c_fa={c_fa}")
    _, fa, miss = _threshold_sweep(s)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    costs = (c_miss * miss * p_target + c_fa * fa * (1.0 - p_target)) / norm
    return float(costs.min())


def compute_det(s: TrialScoreSet) -> DetCurve:
    thresholds, fa, miss = _threshold_sweep(s)
    return DetCurve(thresholds=thresholds, false_alarm_rates=fa, miss_rates=miss)


def probit(p: float | np.ndarray, clip: float = 1e-4) -> np.ndarray:
    """Inverse normal CDF of p, with p clipped away from {0, 1} for plotting."""
    p = np.clip(np.asarray(p, dtype=np.float64), clip, 1.0 - clip)
    return np.vectorize(_STANDARD_NORMAL.inv_cdf)(p)


def evaluate_trials(model, trials: TrialList, eval_seconds: float = DEFAULT_EVAL_SECONDS,
                    p_target: float = DEFAULT_P_TARGET) -> EvalResult:
    """Embed every utterance once (offset-0 crop, wrap-padded) and score all trials."""
    if eval_seconds <= 0.0:
        raise EvalError(f"eval_seconds must be > 0, got {eval_seconds}")
    cache: dict[str, np.ndarray] = {}

    def embed(path: str, trial_idx: int) -> np.ndarray:
        if path not in cache:
            try:
                w = read_wav(path)
                cache[path] = model.embed_utterance(take_segment(w, eval_seconds))
            except (AudioError, OSError) as exc:
                raise EvalError(f"trial {trial_idx}: {path}: {exc}") from exc
        return cache[path]

    scores = np.empty(len(trials))
    labels = np.empty(len(trials), dtype=bool)
    for i, t in enumerate(trials):
        scores[i] = score_trial(embed(t.enroll_path, i), embed(t.test_path, i))
        labels[i] = t.is_target
    score_set = TrialScoreSet(scores=scores, is_target=labels)
    return EvalResult(
        trials=trials,
        score_set=score_set,
        eer=compute_eer(score_set),
        min_dcf=compute_min_dcf(score_set, p_target=p_target),
        p_target=p_target,
        det=compute_det(score_set),
    )


def format_metrics_line(name: str, result: EvalResult) -> str:
    """One system per line, minDCF before EER (the reporting column order)."""
    return (
        f"{name}\tminDCF_{result.p_target:g} {result.min_dcf:.4f}"
        f"\tEER {100.0 * result.eer:.2f}%"
    )


def emit_report(results: Mapping[str, EvalResult], path_prefix: str | Path) -> list[Path]:
    """Write scores, metrics, DET points, and a DET plot for one or more systems.

    Produces `<prefix>.scores.txt`, `<prefix>.metrics.txt`, `<prefix>.det.csv`
    and `<prefix>.det.svg`; the SVG holds one polyline per system. Returns the
    written paths.
    """
    if not results:
        raise EvalError("emit_report needs at least one evaluated system")
    prefix = Path(path_prefix)
    if prefix.parent and not prefix.parent.exists():
        prefix.parent.mkdir(parents=True, exist_ok=True)
    multi = len(results) > 1

    scores_path = prefix.with_name(prefix.name + ".scores.txt")
    with open(scores_path, "w", encoding="utf-8") as fh:
        for name, res in results.items():
            if multi:
                fh.write(f"# system: {name}\n")
            for t, score in zip(res.trials, res.score_set.scores):
                fh.write(f"{t.enroll_path} {t.test_path} {score:.6f}\n")

    metrics_path = prefix.with_name(prefix.name + ".metrics.txt")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for name, res in results.items():
            fh.write(format_metrics_line(name, res) + "\n")

    det_csv_path = prefix.with_name(prefix.name + ".det.csv")
    with open(det_csv_path, "w", encoding="utf-8") as fh:
        header = "threshold,false_alarm_rate,miss_rate"
        fh.write(("system," + header if multi else header) + "\n")
        for name, res in results.items():
            d = res.det
            for t, fa, miss in zip(d.thresholds, d.false_alarm_rates, d.miss_rates):
                row = f"{float(t)!r},{float(fa)!r},{float(miss)!r}"
                fh.write((f"{name}," + row if multi else row) + "\n")

    svg_path = prefix.with_name(prefix.name + ".det.svg")
    curves = {name: res.det for name, res in results.items()}
    svg_path.write_text(render_det_svg(curves), encoding="utf-8")
    return [scores_path, metrics_path, det_csv_path, svg_path]


_SVG_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
_SVG_TICKS = [0.001, 0.01, 0.05, 0.10, 0.20, 0.40]


def render_det_svg(curves: Mapping[str, DetCurve], size: int = 480) -> str:
    """DET plot on probit axes as a standalone SVG document."""
    lo, hi = probit(_SVG_TICKS[0]).item(), probit(_SVG_TICKS[-1]).item()
    margin = 60.0
    span = size - 2 * margin

    def to_xy(fa: np.ndarray, miss: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = margin + (np.clip(probit(fa), lo, hi) - lo) / (hi - lo) * span
        y = size - margin - (np.clip(probit(miss), lo, hi) - lo) / (hi - lo) * span
        return x, y

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="11">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" '
        'fill="none" stroke="#333"/>',
    ]
    for tick in _SVG_TICKS:
        x, y = to_xy(np.array([tick]), np.array([tick]))
        label = f"{100 * tick:g}"
        parts.append(
            f'<line x1="{x[0]:.1f}" y1="{margin}" x2="{x[0]:.1f}" '
            f'y2="{size - margin}" stroke="#ddd"/>'
        )
        parts.append(
            f'<line x1="{margin}" y1="{y[0]:.1f}" x2="{size - margin}" '
            f'y2="{y[0]:.1f}" stroke="#ddd"/>'
        )
        parts.append(
            f'<text x="{x[0]:.1f}" y="{size - margin + 16:.1f}" '
            f'text-anchor="middle">{label}</text>'
        )
        parts.append(
            f'<text x="{margin - 8:.1f}" y="{y[0] + 4:.1f}" '
            f'text-anchor="end">{label}</text>'
        )
    parts.append(
        f'<text x="{size / 2:.1f}" y="{size - 16:.1f}" text-anchor="middle">'
        "False alarm rate (%)</text>"
    )
    parts.append(
        f'<text x="16" y="{size / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {size / 2:.1f})">Miss rate (%)</text>'
    )
    for i, (name, curve) in enumerate(curves.items()):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        x, y = to_xy(curve.false_alarm_rates, curve.miss_rates)
        pts = " ".join(f"{xi:.2f},{yi:.2f}" for xi, yi in zip(x, y))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{margin + 10:.1f}" y="{margin + 16 + 14 * i:.1f}" '
            f'fill="{color}">{_xml_escape(name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def _xml_escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
