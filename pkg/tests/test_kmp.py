import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import kmp_dense
from quasistiff.errors import ParameterError
from quasistiff.gait_data import FeatureSpec, TaskParams, canonical_grid, mean_cycle, resample_cycle
from quasistiff.gmm import ReferenceDistribution, build_reference_distribution
from quasistiff.gpr import gpr_fit_feature_bank
from quasistiff.kmp import (
    ViaPoint,
    assemble_support,
    hard_via,
    kmp_fit,
    kmp_predict,
    output_scaler,
    phase_kernel,
    reconstruct,
)


def _reference(M=51, seed=0):
    rng = np.random.default_rng(seed)
    g = canonical_grid(M)
    means = np.column_stack([20 + 25 * np.sin(2 * np.pi * g), 0.4 * np.cos(2 * np.pi * g) + 0.1 * g])
    sd = np.column_stack([1.0 + 0.5 * rng.uniform(size=M), 0.03 + 0.02 * rng.uniform(size=M)])
    rho = 0.3 * np.sin(4 * np.pi * g)
    covs = np.empty((M, 2, 2))
    covs[:, 0, 0], covs[:, 1, 1] = sd[:, 0] ** 2, sd[:, 1] ** 2
    covs[:, 0, 1] = covs[:, 1, 0] = rho * sd[:, 0] * sd[:, 1]
    return ReferenceDistribution("knee", g, means, covs)


def _std_error(ref, pred, via):
    m0, s0 = output_scaler(ref)
    return np.abs((pred.mean[0] - via.mean) / s0)


class TestFit:
    def test_no_vias_small_lambda_tracks_reference(self):
        ref = _reference(101)
        pred = kmp_predict(kmp_fit(ref, lam=1e-6), ref.index)
        rng_t = np.ptp(ref.means[:, 1])
        assert np.max(np.abs(pred.mean[:, 1] - ref.means[:, 1])) <= 0.01 * rng_t
        assert np.max(np.abs(pred.mean[:, 0] - ref.means[:, 0])) <= 0.01 * np.ptp(ref.means[:, 0])

    def test_single_hard_via(self):
        ref = _reference()
        target = np.array([60.0, -0.2])
        via = hard_via(ref, 0.25, target)
        pred = kmp_predict(kmp_fit(ref, [via]), 0.25)
        assert np.all(_std_error(ref, pred, via) <= 1e-2)

    def test_coincident_via_replaces(self):
        ref = _reference()
        model = kmp_fit(ref, [hard_via(ref, float(ref.index[10]), [0.0, 0.0])])
        assert model.n_support == len(ref) and model.via_slots == (10,)

    def test_near_via_replaces_far_via_inserted(self):
        ref = _reference(11)
        # step 0.1: 0.23 is within half a step of 0.2; two vias compete for that slot
        m = kmp_fit(ref, [hard_via(ref, 0.23, [0, 0]), hard_via(ref, 0.18, [1, 0])])
        assert m.n_support == 12
        np.testing.assert_allclose(m.support[m.via_slots[0]], 0.18)
        assert 0.23 in m.support and 0.2 not in m.support

    def test_same_phase_vias_fused(self):
        g = np.array([0.0, 0.5, 1.0])
        a = (0.5, np.array([1.0, 0.0]), np.diag([1.0, 4.0]))
        b = (0.5, np.array([3.0, 2.0]), np.diag([1.0, 1.0]))
        sup, mu, cov, slots = assemble_support(g, np.zeros((3, 2)), np.stack([np.eye(2)] * 3), [a, b])
        assert sup.size == 3 and slots == (1,)
        np.testing.assert_allclose(cov[1], np.diag([0.5, 0.8]))
        np.testing.assert_allclose(mu[1], [2.0, 0.8 * (0.0 / 4 + 2.0)])

    def test_invalid_inputs(self):
        ref = _reference()
        with pytest.raises(ParameterError):
            kmp_fit(ref, lam=0.0)
        with pytest.raises(ParameterError):
            ViaPoint(1.2, [0, 0], np.eye(2))
        with pytest.raises(ParameterError):
            ViaPoint(0.2, [0, 0], -np.eye(2))
        with pytest.raises(ParameterError):
            kmp_fit(ref, kernel=phase_kernel().__class__((0.1, 0.1), 1.0))


class TestPredict:
    @given(st.integers(0, 10_000), st.integers(1, 4), st.sampled_from([1e-6, 1e-8]))
    @settings(max_examples=30, deadline=None)
    def test_via_passage(self, seed, n_vias, eps):
        rng = np.random.default_rng(seed)
        ref = _reference(41, seed)
        m0, s0 = output_scaler(ref)
        phases = np.sort(rng.choice(np.linspace(0.02, 0.98, 25), n_vias, replace=False))
        vias = [hard_via(ref, float(p), m0 + s0 * rng.normal(0, 1.5, 2), eps) for p in phases]
        model = kmp_fit(ref, vias)
        for v in vias:
            err = _std_error(ref, kmp_predict(model, v.index), v)
            assert np.all(err <= 10 * np.sqrt(eps) + 1e-6)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_tightening_never_hurts(self, seed):
        rng = np.random.default_rng(seed)
        ref = _reference(41, seed)
        m0, s0 = output_scaler(ref)
        target = m0 + s0 * rng.normal(0, 2, 2)
        errs = [np.linalg.norm(_std_error(ref, kmp_predict(kmp_fit(ref, [hard_via(ref, 0.4, target, e)]), 0.4),
                                          hard_via(ref, 0.4, target, e)))
                for e in (1.0, 1e-1, 1e-2, 1e-4, 1e-6)]
        assert np.all(np.diff(errs) <= 1e-12)

    def test_linear_in_means(self):
        model = kmp_fit(_reference(31), [hard_via(_reference(31), 0.3, [50.0, 0.1])])
        rng = np.random.default_rng(1)
        m1, m2 = rng.normal(size=model.means.shape), rng.normal(size=model.means.shape)
        q = np.linspace(0, 1, 17)

        def pred(mu):
            return kmp_predict(model.with_means(mu), q, standardized=True).mean

        a, b = 0.7, -1.3
        np.testing.assert_allclose(pred(a * m1 + b * m2), a * pred(m1) + b * pred(m2), atol=1e-10)

    @given(st.integers(0, 10_000), st.integers(5, 55))
    @settings(max_examples=15, deadline=None)
    def test_matches_dense_solve(self, seed, M):
        rng = np.random.default_rng(seed)
        ref = _reference(M, seed)
        m0, s0 = output_scaler(ref)
        vias = [hard_via(ref, float(p), m0 + s0 * rng.normal(size=2)) for p in rng.uniform(0, 1, 3)]
        model = kmp_fit(ref, vias, lam=float(rng.uniform(0.1, 2)))
        assert model.n_support <= 120
        q = rng.uniform(0, 1, 6)
        pred = kmp_predict(model, q, standardized=True)
        om, oc = kmp_dense(model.support, model.means, model.covs, model.kernel.length_scales[0],
                           model.lam, model.cov_lam, q)
        np.testing.assert_allclose(pred.mean, om, atol=1e-8)
        np.testing.assert_allclose(pred.cov, oc, atol=1e-8)

    def test_covariance_psd_and_symmetric(self):
        ref = _reference(101)
        model = kmp_fit(ref, [hard_via(ref, 0.3, [50.0, 0.1])])
        pred = kmp_predict(model, np.linspace(0, 1, 201))
        assert np.array_equal(pred.cov, np.swapaxes(pred.cov, 1, 2))
        assert np.linalg.eigvalsh(pred.cov).min() >= -1e-10

    def test_deterministic(self):
        ref = _reference()
        model = kmp_fit(ref, [hard_via(ref, 0.3, [50.0, 0.1])])
        a, b = kmp_predict(model, ref.index), kmp_predict(model, ref.index)
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)

    def test_extrapolation_flagged(self):
        model = kmp_fit(_reference())
        with pytest.warns(RuntimeWarning):
            assert kmp_predict(model, [1.1]).extrapolated
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert not kmp_predict(model, [0.0, 1.0]).extrapolated


@pytest.fixture(scope="module")
def knee_setup(speed_corpus):
    held = TaskParams(1.0)
    train = speed_corpus.select(lambda t: t.task != held)
    bank = gpr_fit_feature_bank(train, FeatureSpec.default(), "knee")
    ref = build_reference_distribution(train, "knee", L=10)
    return train, bank, ref, held


class TestReconstruct:
    def test_passes_vias_and_stays_in_envelope(self, knee_setup, speed_corpus):
        train, bank, ref, held = knee_setup
        rec = reconstruct(bank, ref, held)
        rel = rec.relation
        rs = [resample_cycle(t) for t in train.joint("knee")]
        A = np.array([r.angle for r in rs])
        T = np.array([r.torque for r in rs])
        ra, rt = np.ptp(A), np.ptp(T)
        for f in rec.features.features:
            d, span = (0, ra) if f.kind == "angle" else (1, rt)
            got = kmp_predict(rec.model, f.phase).mean[0, d]
            assert abs(got - f.value) <= 0.02 * span
        assert np.all(rel.angle >= A.min(0) - 0.1 * ra) and np.all(rel.angle <= A.max(0) + 0.1 * ra)
        assert np.all(rel.torque >= T.min(0) - 0.1 * rt) and np.all(rel.torque <= T.max(0) + 0.1 * rt)

    def test_held_out_speed_torque_error(self, knee_setup, speed_spec):
        _, bank, ref, held = knee_setup
        rel = reconstruct(bank, ref, held).relation
        truth = speed_spec.truth(held, "knee")
        rmse = np.sqrt(np.mean((rel.torque - truth.torque) ** 2))
        assert rmse <= 0.05 * np.ptp(truth.torque)

    def test_training_task_beats_reference(self, speed_corpus):
        bank = gpr_fit_feature_bank(speed_corpus, FeatureSpec.default(), "knee")
        ref = build_reference_distribution(speed_corpus, "knee", L=10)
        for task in (TaskParams(0.6), TaskParams(1.4)):
            measured = mean_cycle(speed_corpus.for_task(task, "knee"))
            rel = reconstruct(bank, ref, task).relation
            err_rec = np.sqrt(np.mean((rel.torque - measured.torque) ** 2 + (rel.angle - measured.angle) ** 2))
            err_ref = np.sqrt(np.mean((ref.means[:, 1] - measured.torque) ** 2 + (ref.means[:, 0] - measured.angle) ** 2))
            assert err_rec <= err_ref

    def test_joint_mismatch(self, knee_setup, speed_corpus):
        _, bank, _, held = knee_setup
        ankle_ref = build_reference_distribution(speed_corpus, "ankle", L=4)
        with pytest.raises(ParameterError):
            reconstruct(bank, ankle_ref, held)
