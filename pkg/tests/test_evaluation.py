"""Metric exactness, DET structure, trial I/O, and report emission."""

import xml.etree.ElementTree as ET

import numpy as np
import pytest

from streamsv.audio import ParseError
from streamsv.evaluation import (
    DEFAULT_P_TARGET,
    DetCurve,
    DimMismatch,
    EvalError,
    EvalResult,
    SingleClass,
    Trial,
    TrialList,
    TrialScoreSet,
    compute_det,
    compute_eer,
    compute_min_dcf,
    emit_report,
    evaluate_trials,
    format_metrics_line,
    load_trial_list,
    probit,
    score_trial,
    write_trial_list,
)
from streamsv.model import FB_ONLY, build_model

WORKED_TARGETS = [0.9, 0.8, 0.4]
WORKED_NONTARGETS = [0.6, 0.3, 0.2]


def make_score_set(targets, nontargets):
    scores = np.array(list(targets) + list(nontargets), dtype=np.float64)
    labels = np.array([True] * len(targets) + [False] * len(nontargets))
    return TrialScoreSet(scores=scores, is_target=labels)


def make_result(targets, nontargets, p_target=DEFAULT_P_TARGET):
    s = make_score_set(targets, nontargets)
    trials = TrialList(
        [Trial(bool(t), f"e{i}.wav", f"t{i}.wav") for i, t in enumerate(s.is_target)]
    )
    return EvalResult(
        trials=trials,
        score_set=s,
        eer=compute_eer(s),
        min_dcf=compute_min_dcf(s, p_target=p_target),
        p_target=p_target,
        det=compute_det(s),
    )


def sweep_oracle(s, p_target=0.05, c_miss=1.0, c_fa=1.0):
    """Definition-level recount: walk every midpoint threshold and tally
    booleans, using the same interpolation arithmetic as the implementation."""
    scores, labels = s.scores, s.is_target
    n_tgt, n_non = int(labels.sum()), int((~labels).sum())
    distinct = np.unique(scores)
    thresholds = [-np.inf]
    thresholds += [(a + b) / 2.0 for a, b in zip(distinct[:-1], distinct[1:])]
    thresholds += [np.inf]
    miss, fa = [], []
    for t in thresholds:
        accept = scores >= t
        miss.append(int(np.sum(labels & ~accept)) / n_tgt)
        fa.append(int(np.sum(~labels & accept)) / n_non)

    eer = None
    for i in range(len(thresholds)):
        if miss[i] - fa[i] >= 0.0:
            if miss[i] - fa[i] == 0.0:
                eer = miss[i]
            else:
                d1 = fa[i - 1] - miss[i - 1]
                d2 = miss[i] - fa[i]
                alpha = d1 / (d1 + d2)
                eer = miss[i - 1] + alpha * (miss[i] - miss[i - 1])
            break

    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    dcf = min(
        (c_miss * m * p_target + c_fa * f * (1.0 - p_target)) / norm
        for m, f in zip(miss, fa)
    )
    return eer, dcf


class TestScoreTrial:
    def test_three_four_five(self):
        assert score_trial(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == -5.0

    def test_identical_is_zero_maximum(self, rng):
        e = rng.normal(size=8)
        assert score_trial(e, e) == 0.0
        assert score_trial(e, e + 0.1) < 0.0

    def test_symmetric(self, rng):
        a, b = rng.normal(size=6), rng.normal(size=6)
        assert score_trial(a, b) == score_trial(b, a)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            score_trial(np.zeros(3), np.zeros(4))


class TestTrialScoreSet:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(EvalError):
            TrialScoreSet(scores=np.zeros(3), is_target=np.zeros(2, dtype=bool))

    def test_non_finite_rejected(self):
        with pytest.raises(EvalError):
            TrialScoreSet(
                scores=np.array([0.0, np.inf]), is_target=np.array([True, False])
            )

    def test_single_class_rejected(self):
        with pytest.raises(SingleClass):
            compute_eer(make_score_set([0.1, 0.2], []))
        with pytest.raises(SingleClass):
            compute_eer(make_score_set([], [0.1, 0.2]))


class TestEer:
    def test_worked_example_is_exactly_one_third(self):
        s = make_score_set(WORKED_TARGETS, WORKED_NONTARGETS)
        assert compute_eer(s) == 1.0 / 3.0

    def test_perfect_separation(self):
        s = make_score_set([0.9, 0.8], [0.2, 0.1])
        assert compute_eer(s) == 0.0

    def test_identical_distributions(self):
        s = make_score_set([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
        assert compute_eer(s) == 0.5

    def test_increasing_transform_invariance(self, rng):
        t = rng.normal(loc=1.0, size=20)
        n = rng.normal(loc=0.0, size=30)
        base = compute_eer(make_score_set(t, n))
        warped = compute_eer(make_score_set(2.0 * t + 1.0, 2.0 * n + 1.0))
        assert base == warped

    def test_range(self, rng):
        for _ in range(20):
            t = rng.normal(loc=0.5, size=10)
            n = rng.normal(loc=0.0, size=10)
            eer = compute_eer(make_score_set(t, n))
            assert 0.0 <= eer <= 1.0


class TestMinDcf:
    def test_worked_example_is_exactly_one_third(self):
        s = make_score_set(WORKED_TARGETS, WORKED_NONTARGETS)
        assert compute_min_dcf(s) == 1.0 / 3.0

    def test_perfect_separation(self):
        s = make_score_set([0.9, 0.8], [0.2, 0.1])
        assert compute_min_dcf(s) == 0.0

    def test_reversed_separation_caps_at_reject_all(self):
        # Targets all score below nontargets, so rejecting everything
        # (cost 0.05/0.05 = 1) beats accepting everything (0.95/0.05 = 19).
        s = make_score_set([0.1, 0.2], [0.8, 0.9])
        assert compute_min_dcf(s) == 1.0

    def test_increasing_transform_invariance(self, rng):
        t = rng.normal(loc=1.0, size=15)
        n = rng.normal(size=25)
        a = compute_min_dcf(make_score_set(t, n))
        b = compute_min_dcf(make_score_set(np.exp(t), np.exp(n)))
        assert a == b

    def test_parameter_validation(self):
        s = make_score_set([0.9], [0.1])
        with pytest.raises(EvalError):
            compute_min_dcf(s, p_target=0.0)
        with pytest.raises(EvalError):
            compute_min_dcf(s, p_target=1.0)
        with pytest.raises(EvalError):
            compute_min_dcf(s, c_miss=0.0)


class TestOracleAgreement:
    def test_exact_equality_on_random_sets(self):
        # Includes integer scores to force heavy ties across both classes.
        rng = np.random.default_rng(123)
        for trial in range(50):
            n_t = int(rng.integers(1, 30))
            n_n = int(rng.integers(1, 30))
            if trial % 2:
                t = rng.normal(loc=0.5, size=n_t)
                n = rng.normal(size=n_n)
            else:
                t = rng.integers(0, 6, size=n_t).astype(np.float64)
                n = rng.integers(0, 6, size=n_n).astype(np.float64)
            s = make_score_set(t, n)
            want_eer, want_dcf = sweep_oracle(s)
            assert compute_eer(s) == want_eer
            assert compute_min_dcf(s) == want_dcf


class TestDetCurve:
    def test_monotone_rates_and_thresholds(self, rng):
        for _ in range(10):
            s = make_score_set(rng.normal(0.5, size=12), rng.normal(size=15))
            det = compute_det(s)
            assert np.all(np.diff(det.thresholds) > 0.0)
            assert np.all(np.diff(det.miss_rates) >= 0.0)
            assert np.all(np.diff(det.false_alarm_rates) <= 0.0)

    def test_endpoints(self):
        s = make_score_set([0.9, 0.4], [0.6, 0.2])
        det = compute_det(s)
        assert det.thresholds[0] == -np.inf and det.thresholds[-1] == np.inf
        assert det.miss_rates[0] == 0.0 and det.false_alarm_rates[0] == 1.0
        assert det.miss_rates[-1] == 1.0 and det.false_alarm_rates[-1] == 0.0

    def test_one_point_per_distinct_threshold(self, rng):
        s = make_score_set([1.0, 1.0, 2.0], [0.0, 1.0])
        assert len(compute_det(s)) == np.unique(s.scores).size + 1

    def test_separated_curve_touches_origin(self):
        s = make_score_set([0.9, 0.8], [0.2, 0.1])
        det = compute_det(s)
        both_zero = (det.miss_rates == 0.0) & (det.false_alarm_rates == 0.0)
        assert both_zero.any()

    def test_eer_lies_between_rates_at_closest_point(self, rng):
        # |fa - miss| is unimodal over the sweep, so its argmin brackets the
        # interpolated crossing.
        for _ in range(10):
            s = make_score_set(rng.normal(0.7, size=9), rng.normal(size=11))
            det = compute_det(s)
            eer = compute_eer(s)
            k = int(np.argmin(np.abs(det.false_alarm_rates - det.miss_rates)))
            lo = min(det.false_alarm_rates[k], det.miss_rates[k])
            hi = max(det.false_alarm_rates[k], det.miss_rates[k])
            assert lo - 1e-12 <= eer <= hi + 1e-12


class TestProbit:
    def test_median_is_zero(self):
        assert probit(0.5).item() == pytest.approx(0.0, abs=1e-12)

    def test_symmetry(self):
        assert probit(0.2).item() == pytest.approx(-probit(0.8).item(), abs=1e-12)

    def test_clipping_tames_endpoints(self):
        assert probit(0.0).item() == probit(1e-4).item()
        assert probit(1.0).item() == probit(1.0 - 1e-4).item()


class TestTrialListIo:
    def test_round_trip_and_resolution(self, tmp_path):
        listing = tmp_path / "lists" / "trials.txt"
        listing.parent.mkdir()
        listing.write_text(
            "# header comment\n"
            "1 spk0/a.wav spk0/b.wav\n"
            "\n"
            "0 spk0/a.wav /abs/c.wav\n",
            encoding="utf-8",
        )
        trials = load_trial_list(listing)
        assert len(trials) == 2
        assert trials.trials[0].is_target is True
        assert trials.trials[0].enroll_path == str(listing.parent / "spk0/a.wav")
        assert trials.trials[1].test_path == "/abs/c.wav"

    def test_write_then_load(self, tmp_path):
        trials = TrialList(
            [Trial(True, "/a.wav", "/b.wav"), Trial(False, "/a.wav", "/c.wav")]
        )
        path = tmp_path / "t.txt"
        write_trial_list(trials, path)
        assert load_trial_list(path).trials == trials.trials

    def test_bad_field_count(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("1 only_two\n", encoding="utf-8")
        with pytest.raises(ParseError, match=r"t\.txt:1"):
            load_trial_list(path)

    def test_bad_label(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("2 a.wav b.wav\n", encoding="utf-8")
        with pytest.raises(ParseError, match="label"):
            load_trial_list(path)


class TestEvaluateTrials:
    @pytest.fixture()
    def fb_model(self):
        return build_model(
            FB_ONLY, embedding_dim=8, n_classes=4, rng=np.random.default_rng(1)
        )

    def test_end_to_end_result(self, smoke_corpus, fb_model):
        res = evaluate_trials(fb_model, smoke_corpus["trials"])
        assert len(res.score_set.scores) == len(smoke_corpus["trials"])
        assert np.all(np.isfinite(res.score_set.scores))
        assert 0.0 <= res.eer <= 1.0
        assert res.min_dcf >= 0.0
        assert res.p_target == DEFAULT_P_TARGET
        assert len(res.det) >= 2

    def test_each_utterance_embedded_once(self, smoke_corpus, fb_model, monkeypatch):
        import streamsv.evaluation as evaluation

        calls = []
        real = evaluation.read_wav

        def counting(path):
            calls.append(path)
            return real(path)

        monkeypatch.setattr(evaluation, "read_wav", counting)
        evaluate_trials(fb_model, smoke_corpus["trials"])
        unique_paths = {
            p
            for t in smoke_corpus["trials"]
            for p in (t.enroll_path, t.test_path)
        }
        assert sorted(calls) == sorted(unique_paths)

    def test_duplicate_trials_score_identically(self, smoke_corpus, fb_model):
        first = smoke_corpus["trials"].trials[0]
        doubled = TrialList([first, first])
        # Metric computation needs both classes, so score via a mixed list.
        mixed = TrialList(
            [first, first, smoke_corpus["trials"].trials[-1]]
        )
        res = evaluate_trials(fb_model, mixed)
        assert res.score_set.scores[0] == res.score_set.scores[1]
        assert len(doubled) == 2

    def test_unreadable_path_names_trial(self, smoke_corpus, fb_model):
        trials = TrialList(
            [
                smoke_corpus["trials"].trials[0],
                Trial(False, "/nonexistent/x.wav", smoke_corpus["trials"].trials[0].test_path),
            ]
        )
        with pytest.raises(EvalError, match=r"trial 1: /nonexistent/x\.wav"):
            evaluate_trials(fb_model, trials)

    def test_bad_eval_seconds(self, smoke_corpus, fb_model):
        with pytest.raises(EvalError):
            evaluate_trials(fb_model, smoke_corpus["trials"], eval_seconds=0.0)


class TestReport:
    def test_metrics_line_format(self):
        res = make_result(WORKED_TARGETS, WORKED_NONTARGETS)
        line = format_metrics_line("FB", res)
        assert line == "FB\tminDCF_0.05 0.3333\tEER 33.33%"

    def test_single_system_files(self, tmp_path):
        res = make_result(WORKED_TARGETS, WORKED_NONTARGETS)
        paths = emit_report({"FB": res}, tmp_path / "report")
        names = [p.name for p in paths]
        assert names == [
            "report.scores.txt",
            "report.metrics.txt",
            "report.det.csv",
            "report.det.svg",
        ]
        scores_lines = paths[0].read_text().strip().splitlines()
        assert len(scores_lines) == 6
        assert not any(line.startswith("#") for line in scores_lines)

        csv_lines = paths[2].read_text().strip().splitlines()
        assert csv_lines[0] == "threshold,false_alarm_rate,miss_rate"
        assert len(csv_lines) == 1 + len(res.det)
        # Every cell must survive a float() round trip, infinities included.
        for line in csv_lines[1:]:
            t, fa, miss = map(float, line.split(","))
            assert not np.isnan(t)
            assert 0.0 <= fa <= 1.0 and 0.0 <= miss <= 1.0

    def test_multi_system_files(self, tmp_path):
        res_a = make_result(WORKED_TARGETS, WORKED_NONTARGETS)
        res_b = make_result([0.7, 0.6], [0.5, 0.1])
        paths = emit_report({"FB": res_a, "multi<3>": res_b}, tmp_path / "cmp")

        scores_text = paths[0].read_text()
        assert "# system: FB" in scores_text
        assert "# system: multi<3>" in scores_text

        csv_lines = paths[2].read_text().strip().splitlines()
        assert csv_lines[0] == "system,threshold,false_alarm_rate,miss_rate"
        assert csv_lines[1].startswith("FB,")

        metrics_lines = paths[1].read_text().strip().splitlines()
        assert len(metrics_lines) == 2
        assert metrics_lines[0].startswith("FB\t")

        svg = paths[3].read_text()
        root = ET.fromstring(svg)
        polylines = root.findall(".//{http://www.w3.org/2000/svg}polyline")
        assert len(polylines) == 2
        assert "multi&lt;3&gt;" in svg

    def test_svg_is_wellformed_single(self, tmp_path):
        res = make_result(WORKED_TARGETS, WORKED_NONTARGETS)
        paths = emit_report({"FB": res}, tmp_path / "one")
        root = ET.fromstring(paths[3].read_text())
        polylines = root.findall(".//{http://www.w3.org/2000/svg}polyline")
        assert len(polylines) == 1

    def test_empty_results_rejected(self, tmp_path):
        with pytest.raises(EvalError):
            emit_report({}, tmp_path / "none")
