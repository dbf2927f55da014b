import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from quasistiff.config import PipelineConfig
from quasistiff.errors import ParameterError, QuasiStiffError
from quasistiff.fsm import FsmThresholds
from quasistiff.gait_data import Corpus, TaskParams, split_corpus
from quasistiff.sim import METRICS, EvalReport, evaluate_pipeline, rmse, spearman
from quasistiff.synthetic import (
    TOE_OFF,
    SyntheticGaitSpec,
    corpus_to_sensor_stream,
    generate_synthetic_corpus,
    ground_truth_events,
)


class TestGenerator:
    def test_zero_noise_cycles_identical(self):
        spec = SyntheticGaitSpec((TaskParams(1.1, 2.0),), n_cycles=4, noise_sigma={})
        c = generate_synthetic_corpus(spec)
        for joint in ("knee", "ankle"):
            trajs = c.joint(joint)
            assert len(trajs) == 4
            for t in trajs[1:]:
                assert np.array_equal(t.angle, trajs[0].angle) and np.array_equal(t.torque, trajs[0].torque)

    def test_peak_knee_torque_increases_with_speed(self):
        speeds = np.linspace(0.4, 1.0, 7)
        spec = SyntheticGaitSpec(tuple(TaskParams(float(v)) for v in speeds), noise_sigma={})
        peaks = [spec.truth(TaskParams(float(v)), "knee").torque.max() for v in speeds]
        assert np.all(np.diff(peaks) > 0)

    def test_peak_ankle_torque_increases_with_incline(self):
        inclines = np.linspace(-10, 10, 9)
        spec = SyntheticGaitSpec(tuple(TaskParams(1.0, float(a)) for a in inclines))
        peaks = [spec.truth(TaskParams(1.0, float(a)), "ankle").torque.max() for a in inclines]
        assert np.all(np.diff(peaks) > 0)

    def test_fixed_seed_bit_identical(self, speed_spec, speed_corpus):
        again = generate_synthetic_corpus(speed_spec)
        for a, b in zip(speed_corpus, again):
            assert a.key == b.key and np.array_equal(a.angle, b.angle) and np.array_equal(a.torque, b.torque)
        other = generate_synthetic_corpus(SyntheticGaitSpec(speed_spec.tasks, 3, seed=4))
        assert not np.array_equal(next(iter(other)).angle, next(iter(speed_corpus)).angle)

    def test_out_of_bounds_task_rejected(self):
        with pytest.raises(ParameterError, match="bounds"):
            generate_synthetic_corpus(SyntheticGaitSpec((TaskParams(4.0, 30.0),)))


@pytest.fixture(scope="module")
def pair():
    task = TaskParams(1.0)
    spec = SyntheticGaitSpec((task,))
    return spec.truth(task, "knee"), spec.truth(task, "ankle")


class TestSensorStream:
    def test_one_cycle_duration(self, pair):
        s = corpus_to_sensor_stream([pair], cadence=1.0, fs=100.0)
        assert abs(s.t[-1] - s.t[0] - 1.0) <= 1 / 100.0

    def test_grf_zero_in_swing(self, pair):
        s = corpus_to_sensor_stream([pair] * 3)
        th = FsmThresholds.from_body_weight(s.body_weight, 50.0)
        swing = s.phase >= TOE_OFF
        assert np.all(s.Fz[swing] == 0.0) and th.Fz_to > 0

    def test_moment_crosses_at_stance_peak(self, pair):
        s = corpus_to_sensor_stream([pair])
        stance = (s.phase > 0) & (s.phase < TOE_OFF)
        before = stance & (s.phase < s.se_phase[0])
        after = stance & (s.phase > s.se_phase[0])
        assert np.all(s.My[before] < 0) and np.all(s.My[after] > 0)

    def test_angles_follow_cycle(self, pair):
        s = corpus_to_sensor_stream([pair] * 2)
        np.testing.assert_allclose(s.qk, np.interp(s.phase, pair[0].phase, pair[0].angle))

    def test_events_strictly_after_crossing(self, pair):
        s = corpus_to_sensor_stream([pair] * 2)
        for e in ground_truth_events(s, FsmThresholds.from_body_weight(s.body_weight, 50.0)):
            assert s.t[e.sample - 1] <= e.time < s.t[e.sample]

    def test_bad_pairs(self, pair):
        with pytest.raises(ParameterError):
            corpus_to_sensor_stream([])
        with pytest.raises(ParameterError):
            corpus_to_sensor_stream([(pair[1], pair[0])])


class TestRmse:
    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=50))
    @settings(max_examples=100, deadline=None)
    def test_matches_definition(self, pairs):
        a, b = zip(*pairs)
        brute = math.sqrt(sum((x - y) ** 2 for x, y in pairs) / len(pairs))
        assert rmse(a, b) == pytest.approx(brute, rel=1e-12, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            rmse([1, 2], [1])

    def test_spearman(self):
        assert spearman([1, 2, 3], [0.1, 0.5, 0.9]) == 1.0
        assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
        assert spearman([0.7333, 0.8667, 1.0, 1.1333, 1.2667], [0.389, 0.434, 0.463, 0.466, 0.485]) == 1.0

    @given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=12))
    def test_spearman_matches_scipy(self, y):
        from scipy.stats import spearmanr

        assume(len(set(y)) > 1)
        x = np.arange(len(y))
        ref = spearmanr(x, y)[0]
        np.testing.assert_allclose(spearman(x, y), ref, atol=1e-12)


@pytest.fixture(scope="module")
def resub_report(clean_spec, clean_corpus):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return evaluate_pipeline(clean_corpus, clean_corpus, PipelineConfig(), clean_spec.truth, resubstitution=True)


class TestEvaluate:
    def test_resubstitution_features(self, resub_report):
        for joint in ("knee", "ankle"):
            assert resub_report.column("feature_rmse_angle", joint).max() <= 1e-3
            assert resub_report.column("feature_rmse_torque", joint).max() <= 1e-3

    @pytest.mark.xfail(strict=True, reason="a 12-component GMR encoding of one noise-free cycle already "
                                           "misses by 2-6% of range; see decisions ledger")
    def test_resubstitution_relation(self, resub_report):
        for joint in ("knee", "ankle"):
            assert resub_report.column("relation_rmse_torque_pct", joint).max() <= 1.0

    def test_replay_events_within_two_samples(self, resub_report):
        for r in resub_report.rows:
            assert r["n_transitions"] == r["expected_transitions"] == 8
            assert r["max_event_error_samples"] <= 2

    def test_report_complete_and_non_negative(self, resub_report, clean_spec):
        assert set(resub_report.tasks) == set(clean_spec.tasks)
        for r in resub_report.rows:
            assert set(r.values) == set(METRICS)
            assert all(r[k] >= 0 for k in METRICS if "rmse" in k)

    def test_report_round_trip(self, resub_report):
        back = EvalReport.from_json(resub_report.to_json())
        assert back.to_json() == resub_report.to_json()
        assert back.to_csv() == resub_report.to_csv()
        doc = json.loads(resub_report.to_json())
        assert "runtimes" not in doc and doc["summary"] == resub_report.summary()

    def test_report_rejects_missing_task(self, resub_report):
        with pytest.raises(ParameterError):
            EvalReport(resub_report.rows, resub_report.tasks + (TaskParams(2.0),))

    def test_deterministic(self, speed_corpus, speed_spec):
        train, test = split_corpus(speed_corpus, 0.6, seed=1, unit="task")
        cfg = PipelineConfig().with_overrides(["gmm.n_components=6"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = evaluate_pipeline(train, test, cfg, speed_spec.truth)
            b = evaluate_pipeline(train, test, cfg, speed_spec.truth)
        assert a.to_json() == b.to_json()

    def test_overlap_rejected(self, speed_corpus):
        with pytest.raises(ParameterError, match="share cycles"):
            evaluate_pipeline(speed_corpus, speed_corpus)

    def test_stage_attribution(self, speed_corpus):
        cfg = PipelineConfig().with_overrides(["gmm.n_components=500"])
        test = speed_corpus.with_tasks([TaskParams(1.0)])
        train = speed_corpus.select(lambda t: t.task != TaskParams(1.0))
        with pytest.raises(QuasiStiffError) as info:
            evaluate_pipeline(train, test, cfg)
        assert info.value.stage == "gmm" and str(info.value).startswith("[gmm]")

    def test_test_mean_used_without_truth(self, speed_corpus):
        train = speed_corpus.select(lambda t: t.task != TaskParams(1.0))
        test = speed_corpus.with_tasks([TaskParams(1.0)])
        cfg = PipelineConfig().with_overrides(["gmm.n_components=6"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = evaluate_pipeline(train, test, cfg)
        assert np.all(np.isfinite(rep.column("kinetics_rmse", "knee")))


@pytest.mark.slow
class TestTaskTrend:
    def test_interior_peak_torque_monotone_in_speed(self, speed_loso):
        spec, report = speed_loso
        speeds = [t.speed for t in report.tasks]
        interior = slice(1, -1)
        for joint in ("knee", "ankle"):
            true = report.column("peak_torque_true", joint)
            assert np.all(np.diff(true) > 0)
            pred = report.column("peak_torque_pred", joint)[interior]
            assert len(pred) >= 5 and spearman(speeds[interior], pred) == 1.0
