import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from conftest import make_traj
from oracles import gmr_quadrature
from quasistiff.errors import CollapseError, ParameterError
from quasistiff.gait_data import Corpus, TaskParams, canonical_grid, resample_cycle
from quasistiff.gmm import (
    COV_FLOOR,
    GmmModel,
    ReferenceDistribution,
    ReferenceModel,
    build_reference_distribution,
    fit_reference_model,
    floor_covariance,
    gmm_fit,
    gmr,
    gmr_condition,
    select_gmm,
)
from quasistiff.persist import dumps


def _random_spd(rng, D, scale=1.0):
    A = rng.normal(size=(D, D))
    return scale * (A @ A.T / D + 0.3 * np.eye(D))


def _random_mixture(rng, L, D=2):
    w = rng.dirichlet(np.ones(L) * 2)
    means = rng.normal(0, 2, (L, D))
    covs = np.array([_random_spd(rng, D, rng.uniform(0.3, 1.5)) for _ in range(L)])
    return GmmModel(w, means, covs, (0.0,))


class TestEm:
    def test_single_component_closed_form(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(200, 3)) @ np.array([[1, 0.3, 0], [0, 1, 0.5], [0, 0, 0.2]])
        m = gmm_fit(X, 1)
        np.testing.assert_allclose(m.means[0], X.mean(0), atol=1e-12)
        np.testing.assert_allclose(m.covariances[0], np.cov(X.T, bias=True), atol=1e-12)
        assert m.weights[0] == 1.0

    def test_separated_clusters_recovered(self):
        rng = np.random.default_rng(1)
        centers = np.array([[0.0, 0.0], [10.0, 0.0]])
        X = np.vstack([rng.normal(c, 1.0, (300, 2)) for c in centers])
        m = gmm_fit(X, 2, seed=4)
        got = m.means[np.argsort(m.means[:, 0])]
        np.testing.assert_allclose(got, centers, atol=0.1 * 1.0 + 0.05)
        np.testing.assert_allclose(np.sort(m.weights), [0.5, 0.5], atol=1e-3)

    @given(st.integers(0, 10_000), st.integers(1, 3), st.sampled_from([2, 3]))
    @settings(max_examples=25, deadline=None)
    def test_loglik_non_decreasing(self, seed, L, D):
        rng = np.random.default_rng(seed)
        X = np.vstack([rng.normal(rng.normal(0, 3, D), 1.0, (40, D)) for _ in range(3)])
        m = gmm_fit(X, L, seed=seed)
        h = np.array(m.loglik_history)
        assert np.all(np.diff(h) >= -1e-9 * np.maximum(1, np.abs(h[1:])))
        assert abs(m.weights.sum() - 1) <= 1e-12
        for c in m.covariances:
            np.linalg.cholesky(c)
        r = m.responsibilities(X)
        np.testing.assert_allclose(r.sum(1), 1.0, atol=1e-12)

    def test_deterministic_under_seed(self):
        X = np.random.default_rng(3).normal(size=(120, 2))
        a, b = gmm_fit(X, 3, seed=7), gmm_fit(X, 3, seed=7)
        assert np.array_equal(a.means, b.means) and a.loglik_history == b.loglik_history

    def test_stops_at_max_iter(self):
        X = np.random.default_rng(3).normal(size=(120, 2))
        m = gmm_fit(X, 4, max_iter=5, tol=0.0)
        assert len(m.loglik_history) == 6

    def test_log_joint_matches_scipy(self):
        rng = np.random.default_rng(8)
        m = _random_mixture(rng, 3, 3)
        X = rng.normal(size=(25, 3))
        ref = np.column_stack([np.log(w) + multivariate_normal(mu, c).logpdf(X)
                               for w, mu, c in zip(m.weights, m.means, m.covariances)])
        np.testing.assert_allclose(m.log_joint(X), ref, atol=1e-10)

    @pytest.mark.parametrize("kw", [dict(L=0), dict(L=20)])
    def test_preconditions(self, kw):
        with pytest.raises(ParameterError):
            gmm_fit(np.zeros((50, 2)) + np.arange(50)[:, None], **kw)

    def test_bad_dimension(self):
        with pytest.raises(ParameterError):
            gmm_fit(np.random.default_rng(0).normal(size=(50, 4)), 2)

    def test_collapse_raises_after_one_reseed(self):
        # three coincident points far from a tight cloud: any component on them collapses
        rng = np.random.default_rng(0)
        X = np.vstack([np.zeros((37, 2)) + rng.normal(0, 1e-9, (37, 2)), np.full((3, 2), 50.0)])
        with pytest.raises(CollapseError):
            for seed in range(20):
                gmm_fit(X, 4, seed=seed)

    def test_floor_keeps_pd(self):
        C = floor_covariance(np.array([[1.0, 1.0], [1.0, 1.0]]), 1e-6)
        assert np.linalg.eigvalsh(C).min() >= 1e-6 * (1 - 1e-9)
        np.linalg.cholesky(C)

    def test_bic_prefers_true_count(self):
        rng = np.random.default_rng(2)
        X = np.vstack([rng.normal(c, 0.5, (150, 2)) for c in ([0, 0], [6, 0], [0, 6])])
        assert select_gmm(X, range(1, 6), seed=1).n_components == 3

    def test_persistence_round_trip(self):
        X = np.random.default_rng(3).normal(size=(120, 3))
        m = gmm_fit(X, 2)
        back = GmmModel.from_dict(json.loads(dumps(m.to_dict())))
        assert np.array_equal(back.covariances, m.covariances)
        assert back.score(X) == m.score(X)


class TestGmr:
    def test_single_component_linear_gaussian(self):
        rng = np.random.default_rng(4)
        mu = np.array([0.3, -1.0, 2.0])
        S = _random_spd(rng, 3)
        m = GmmModel(np.ones(1), mu[None], S[None], (0.0,))
        for x in (-2.0, 0.0, 1.7):
            mean, cov = gmr_condition(m, x, [0])
            np.testing.assert_allclose(mean, mu[1:] + S[1:, 0] / S[0, 0] * (x - mu[0]), atol=1e-10)
            np.testing.assert_allclose(cov, S[1:, 1:] - np.outer(S[1:, 0], S[0, 1:]) / S[0, 0], atol=1e-10)

    @given(st.integers(0, 10_000), st.integers(2, 3))
    @settings(max_examples=15, deadline=None)
    def test_mixture_matches_quadrature(self, seed, L):
        rng = np.random.default_rng(seed)
        m = _random_mixture(rng, L, 2)
        x = float(rng.uniform(-2, 2))
        mean, cov = gmr_condition(m, x, [0])
        qm, qc = gmr_quadrature(m.weights, m.means, m.covariances, x, n=6001)
        np.testing.assert_allclose(mean, qm, atol=1e-6)
        np.testing.assert_allclose(cov, qc, atol=1e-6)

    def test_three_dim_mixture_matches_quadrature(self):
        m = _random_mixture(np.random.default_rng(12), 2, 3)
        mean, cov = gmr_condition(m, 0.4, [0])
        qm, qc = gmr_quadrature(m.weights, m.means, m.covariances, 0.4, n=401)
        np.testing.assert_allclose(mean, qm, atol=1e-6)
        np.testing.assert_allclose(cov, qc, atol=1e-6)

    def test_saturated_responsibility(self):
        rng = np.random.default_rng(5)
        S = _random_spd(rng, 2, 0.5)
        far = np.array([20.0 * np.sqrt(S[0, 0]) * 2, 3.0])
        m = GmmModel(np.array([0.5, 0.5]), np.array([[0.0, 1.0], far]), np.stack([S, S]), (0.0,))
        one = GmmModel(np.ones(1), np.array([[0.0, 1.0]]), S[None], (0.0,))
        a, b = gmr_condition(m, 0.0, [0]), gmr_condition(one, 0.0, [0])
        np.testing.assert_allclose(a[0], b[0], atol=1e-8)
        np.testing.assert_allclose(a[1], b[1], atol=1e-8)

    def test_far_predictor_is_stabilised(self):
        m = _random_mixture(np.random.default_rng(6), 3, 2)
        mean, cov = gmr_condition(m, 1e3, [0])
        assert np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))

    def test_predictor_dims_must_be_strict_subset(self):
        m = _random_mixture(np.random.default_rng(6), 2, 2)
        with pytest.raises(ParameterError):
            gmr(m, [[0.0, 0.0]], [0, 1])
        with pytest.raises(ParameterError):
            gmr(m, [0.0], [])


def _speed_family(speeds, n_cycles=2, seed=0):
    rng = np.random.default_rng(seed)
    g = canonical_grid(101)
    trajs = []
    for v in speeds:
        for c in range(n_cycles):
            angle = 30 * v * np.sin(2 * np.pi * g) ** 2 + rng.normal(0, 0.3, g.size)
            torque = v * np.sin(2 * np.pi * g) + rng.normal(0, 0.01, g.size)
            trajs.append(make_traj(angle, torque, task=TaskParams(v), cycle_id=c, phase=g))
    return Corpus(trajs)


class TestReference:
    def test_length_and_pd(self):
        ref = build_reference_distribution(_speed_family([0.8, 1.0, 1.2]), "knee", L=6)
        assert len(ref) == 101 and ref.means.shape == (101, 2)
        for c in ref.covs:
            np.linalg.cholesky(c)

    def test_identical_cycles(self):
        # an affine cycle is exactly representable, so only the floor is left as spread
        g = canonical_grid(101)
        angle, torque = 10 + 20 * g, 0.5 - g
        c = Corpus([make_traj(angle, torque, cycle_id=i, phase=g) for i in range(4)])
        model = fit_reference_model(c, "knee", L=3)
        ref = build_reference_distribution(c, "knee", model=model)
        np.testing.assert_allclose(ref.means[:, 0], angle, atol=1e-4)
        np.testing.assert_allclose(ref.means[:, 1], torque, atol=1e-5)
        s = model.data_scale[1:]
        eig = np.linalg.eigvalsh(ref.covs / np.outer(s, s))
        np.testing.assert_allclose(eig[:, 0], COV_FLOOR, rtol=1e-2)
        assert np.all(eig[:, 1] <= 5 * COV_FLOOR)

    def test_within_input_envelope(self, speed_corpus):
        ref = build_reference_distribution(speed_corpus, "knee", L=10)
        rs = [resample_cycle(t) for t in speed_corpus.joint("knee")]
        A = np.array([r.angle for r in rs])
        T = np.array([r.torque for r in rs])
        slack_a, slack_t = 0.02 * np.ptp(A), 0.02 * np.ptp(T)
        assert np.all(ref.means[:, 0] >= A.min(0) - slack_a) and np.all(ref.means[:, 0] <= A.max(0) + slack_a)
        assert np.all(ref.means[:, 1] >= T.min(0) - slack_t) and np.all(ref.means[:, 1] <= T.max(0) + slack_t)

    def test_covariance_floor_applied(self):
        m = ReferenceModel("knee", GmmModel(np.ones(1), np.zeros((1, 3)), np.eye(3)[None] * 1e-12, (0.0,)),
                           np.zeros(3), np.ones(3))
        _, covs = m.retrieve(np.linspace(0, 1, 5))
        assert np.all(np.linalg.eigvalsh(covs) >= COV_FLOOR * (1 - 1e-9))

    def test_bad_index_rejected(self):
        from quasistiff.errors import DataError

        with pytest.raises(DataError):
            ReferenceDistribution("knee", np.array([0.0, 0.0]), np.zeros((2, 2)), np.stack([np.eye(2)] * 2))

    def test_persistence_round_trip(self):
        c = _speed_family([0.9, 1.1])
        model = fit_reference_model(c, "knee", L=4)
        back = ReferenceModel.from_dict(json.loads(dumps(model.to_dict())))
        a = build_reference_distribution(c, "knee", model=model)
        b = build_reference_distribution(c, "knee", model=back)
        assert np.array_equal(a.means, b.means) and np.array_equal(a.covs, b.covs)
        r = ReferenceDistribution.from_dict(json.loads(dumps(a.to_dict())))
        assert np.array_equal(r.covs, a.covs) and r.tasks == a.tasks
