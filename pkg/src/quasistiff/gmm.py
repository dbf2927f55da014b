"""Gaussian mixture encoding of pooled reference cycles and Gaussian mixture regression.

The mixture is fitted over (phase, angle, torque) triples. Conditioning on
phase, rather than on angle, keeps the retrieved torque-angle loop
single-valued: angle is not monotone over a gait cycle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import CollapseError, DataError, FitError, NumericError, ParameterError
from .gait_data import GRID_SIZE, Corpus, TaskParams, canonical_grid, resample_cycle

COV_FLOOR = 1e-6
MAX_ITER = 300
TOL = 1e-7
BIC_RANGE = tuple(range(3, 13))


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray  # (L,)
    means: np.ndarray  # (L, D)
    covariances: np.ndarray  # (L, D, D)
    loglik_history: tuple[float, ...] = ()
    n_samples: int = 0
    reseeded: int = 0

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def trained_loglik(self) -> float:
        return self.loglik_history[-1]

    def n_parameters(self) -> int:
        L, D = self.n_components, self.dim
        return (L - 1) + L * D + L * D * (D + 1) // 2

    def log_joint(self, X) -> np.ndarray:
        """log pi_l + log N(x | mu_l, Sigma_l), shape (n, L)."""
        return _log_joint(np.atleast_2d(X), self.weights, self.means, self.covariances)

    def score(self, X) -> float:
        return float(np.sum(logsumexp(self.log_joint(X), axis=1)))

    def bic(self, X) -> float:
        X = np.atleast_2d(X)
        return -2.0 * self.score(X) + self.n_parameters() * math.log(X.shape[0])

    def responsibilities(self, X) -> np.ndarray:
        lj = self.log_joint(X)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def to_dict(self) -> dict:
        return {"weights": self.weights, "means": self.means, "covariances": self.covariances,
                "loglik_history": list(self.loglik_history), "n_samples": self.n_samples,
                "reseeded": self.reseeded}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        w = np.asarray(d["weights"], float)
        means = np.asarray(d["means"], float).reshape(w.size, -1)
        D = means.shape[1]
        return cls(w, means, np.asarray(d["covariances"], float).reshape(w.size, D, D),
                   tuple(d["loglik_history"]), int(d["n_samples"]), int(d.get("reseeded", 0)))


def _log_gauss(X, mean, cov) -> np.ndarray:
    L = np.linalg.cholesky(cov)
    sol = solve_triangular(L, (X - mean).T, lower=True)
    D = X.shape[1]
    return -0.5 * np.sum(sol * sol, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * D * math.log(2 * math.pi)


def _log_joint(X, weights, means, covs) -> np.ndarray:
    """(n, L) matrix of log w_l + log N(x | mu_l, Sigma_l).

    All components are whitened with a single (n, D) x (D, L D) product.
    """
    n, D = X.shape
    L = weights.size
    chol = np.linalg.cholesky(covs)
    W = np.swapaxes(np.linalg.inv(chol), 1, 2)  # x @ W_l whitens component l
    b = np.einsum("ld,lde->le", means, W).reshape(-1)
    sol = X @ np.transpose(W, (1, 0, 2)).reshape(D, L * D) - b
    quad = np.square(sol).reshape(n, L, D).sum(axis=2)
    logdet = np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw - logdet - 0.5 * D * math.log(2 * math.pi) - 0.5 * quad


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1, keepdims=True)
    return top + np.log(np.exp(a - top).sum(axis=1, keepdims=True))


def floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    """Clip eigenvalues below ``floor``; untouched when already above it.

    Clipping is the exact constrained maximiser of the M-step objective, so EM
    stays monotone with the floor in force. Accepts one matrix or a stack.
    """
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    vals, vecs = np.linalg.eigh(cov)
    low = vals[..., 0] < floor
    if not np.any(low):
        return cov
    clipped = (vecs * np.maximum(vals, floor)[..., None, :]) @ np.swapaxes(vecs, -1, -2)
    return np.where(low[..., None, None], clipped, cov)


def _kmeanspp(X, L, rng) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, L):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _init_params(X, L, rng, floor):
    n, D = X.shape
    centers = _kmeanspp(X, L, rng)
    assign = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    global_cov = floor_covariance(np.cov(X.T, bias=True).reshape(D, D), floor)
    weights = np.empty(L)
    means = np.empty((L, D))
    covs = np.empty((L, D, D))
    for l in range(L):
        pts = X[assign == l]
        if pts.shape[0] > D:
            means[l] = pts.mean(0)
            covs[l] = floor_covariance(np.cov(pts.T, bias=True), floor)
        else:
            means[l] = centers[l]
            covs[l] = global_cov
        weights[l] = max(pts.shape[0], 1)
    return weights / weights.sum(), means, covs


def gmm_fit(data, L: int, seed: int = 0, max_iter: int = MAX_ITER, tol: float = TOL,
            cov_floor: float = COV_FLOOR) -> GmmModel:
    """Expectation-maximisation from k-means++ seeding.

    Stops when the relative log-likelihood gain drops below ``tol``. A
    component collapses when its responsibility mass vanishes, or when it holds
    under ``D + 1`` points and its covariance shrinks below the floor. It is
    re-seeded once at the worst-explained sample; a second collapse raises.
    """
    X = np.asarray(data, float)
    if X.ndim != 2 or X.shape[1] not in (2, 3):
        raise ParameterError("gmm_fit expects an (n, D) matrix with D in {2, 3}")
    if L < 1:
        raise ParameterError("need at least one component")
    n, D = X.shape
    if n < 10 * L:
        raise ParameterError(f"need n >= 10 L samples ({n} < {10 * L})")
    if not np.all(np.isfinite(X)):
        raise ParameterError("GMM data contains NaN or Inf")
    rng = np.random.default_rng(seed)
    weights, means, covs = _init_params(X, L, rng, cov_floor)
    outer = (X[:, :, None] * X[:, None, :]).reshape(n, D * D)
    history: list[float] = []
    reseeded = 0
    for _ in range(max_iter + 1):
        lj = _log_joint(X, weights, means, covs)
        norm = _logsumexp_rows(lj)
        ll = float(norm.sum())
        if history and abs(ll - history[-1]) <= tol * abs(history[-1]):
            history.append(ll)
            break
        history.append(ll)
        if len(history) > max_iter:
            break
        resp = np.exp(lj - norm)
        nk = resp.sum(axis=0)
        safe = np.maximum(nk, np.finfo(float).tiny)
        new_means = (resp.T @ X) / safe[:, None]
        raw = (resp.T @ outer).reshape(L, D, D) / safe[:, None, None]
        raw -= new_means[:, :, None] * new_means[:, None, :]
        shrunk = np.linalg.eigvalsh(0.5 * (raw + np.swapaxes(raw, 1, 2)))[:, 0] < cov_floor
        dead = np.flatnonzero((nk < 1e-6 * n) | ((nk < D + 1) & shrunk))
        if dead.size:
            if reseeded:
                raise CollapseError(f"GMM component(s) {dead.tolist()} collapsed twice")
            reseeded += 1
            worst = np.argsort(norm.ravel())
            global_cov = floor_covariance(np.cov(X.T, bias=True), cov_floor)
            for j, l in enumerate(dead):
                means[l] = X[worst[j]]
                covs[l] = global_cov
                weights[l] = 1.0 / L
            weights = weights / weights.sum()
            history = []
            continue
        weights = nk / n
        means = new_means
        covs = floor_covariance(raw, cov_floor)
    return GmmModel(weights, means, covs.copy(), tuple(history), n, reseeded)


def select_gmm(data, L_range: Iterable[int] = BIC_RANGE, seed: int = 0, **kwargs) -> GmmModel:
    """Fit every admissible component count and keep the lowest BIC."""
    X = np.asarray(data, float)
    best, best_bic = None, np.inf
    for L in L_range:
        if X.shape[0] < 10 * L:
            continue
        try:
            model = gmm_fit(X, L, seed, **kwargs)
        except CollapseError:
            continue
        bic = model.bic(X)
        if bic < best_bic:
            best, best_bic = model, bic
    if best is None:
        raise FitError("no admissible GMM component count")
    return best


def gmr(model: GmmModel, x, in_dims: Sequence[int]):
    """Moment-matched Gaussian conditional of the outputs given the inputs ``in_dims``.

    ``x`` holds one or more predictor values; returns means (m, O) and
    covariances (m, O, O).
    """
    in_dims = list(in_dims)
    D = model.dim
    out_dims = [d for d in range(D) if d not in in_dims]
    if not in_dims or not out_dims or any(d < 0 or d >= D for d in in_dims):
        raise ParameterError("predictor dims must be a non-empty strict subset of the dimensions")
    Xq = np.asarray(x, float).reshape(-1, len(in_dims))
    L = model.n_components
    O = len(out_dims)
    logh = np.empty((Xq.shape[0], L))
    cmeans = np.empty((Xq.shape[0], L, O))
    ccovs = np.empty((L, O, O))
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights)
    for l in range(L):
        mu, S = model.means[l], model.covariances[l]
        S_ii = S[np.ix_(in_dims, in_dims)]
        S_oi = S[np.ix_(out_dims, in_dims)]
        gain = np.linalg.solve(S_ii, S_oi.T).T
        logh[:, l] = logw[l] + _log_gauss(Xq, mu[in_dims], S_ii)
        cmeans[:, l] = mu[out_dims] + (Xq - mu[in_dims]) @ gain.T
        ccovs[l] = S[np.ix_(out_dims, out_dims)] - gain @ S_oi.T
    norm = logsumexp(logh, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise NumericError("GMR responsibilities degenerate at some predictor value")
    h = np.exp(logh - norm)
    mean = np.einsum("ml,mlo->mo", h, cmeans)
    second = np.einsum("ml,loq->moq", h, ccovs) + np.einsum("ml,mlo,mlq->moq", h, cmeans, cmeans)
    cov = second - np.einsum("mo,mq->moq", mean, mean)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return mean, cov


def gmr_condition(model: GmmModel, predictor_value, predictor_dims: Sequence[int]):
    mean, cov = gmr(model, predictor_value, predictor_dims)
    return mean[0], cov[0]


@dataclass(frozen=True, eq=False)
class ReferenceDistribution:
    """Per-phase Gaussian over (angle, torque) retrieved from the mixture."""

    joint: str
    index: np.ndarray  # (M,) phase
    means: np.ndarray  # (M, 2)
    covs: np.ndarray  # (M, 2, 2)
    tasks: tuple[TaskParams, ...] = field(default=())

    def __post_init__(self):
        M = self.index.size
        if self.means.shape != (M, 2) or self.covs.shape != (M, 2, 2):
            raise DataError("reference distribution fields have inconsistent lengths")
        if np.any(np.diff(self.index) <= 0):
            raise DataError("reference index must be strictly increasing")

    def __len__(self):
        return self.index.size

    def std(self) -> np.ndarray:
        return np.sqrt(np.stack([self.covs[:, 0, 0], self.covs[:, 1, 1]], axis=1))

    def to_dict(self) -> dict:
        return {"joint": self.joint, "index": self.index, "means": self.means, "covs": self.covs,
                "tasks": [t.to_dict() for t in self.tasks]}

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceDistribution":
        idx = np.asarray(d["index"], float)
        return cls(d["joint"], idx, np.asarray(d["means"], float).reshape(-1, 2),
                   np.asarray(d["covs"], float).reshape(-1, 2, 2),
                   tuple(TaskParams.from_dict(t) for t in d.get("tasks", [])))


@dataclass(frozen=True, eq=False)
class ReferenceModel:
    """The fitted mixture and the affine standardisation it was fitted under."""

    joint: str
    gmm: GmmModel
    data_mean: np.ndarray
    data_scale: np.ndarray

    def to_dict(self):
        return {"joint": self.joint, "gmm": self.gmm.to_dict(), "data_mean": self.data_mean,
                "data_scale": self.data_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(d["joint"], GmmModel.from_dict(d["gmm"]), np.asarray(d["data_mean"], float),
                   np.asarray(d["data_scale"], float))

    def retrieve(self, index: np.ndarray, cov_floor: float = COV_FLOOR):
        z = (np.asarray(index, float) - self.data_mean[0]) / self.data_scale[0]
        mean_z, cov_z = gmr(self.gmm, z, [0])
        cov_z = np.array([floor_covariance(c, cov_floor) for c in cov_z])
        s = self.data_scale[1:]
        return mean_z * s + self.data_mean[1:], cov_z * np.outer(s, s)


def pooled_triples(corpus: Corpus, joint: str, grid_size: int = GRID_SIZE) -> np.ndarray:
    rows = []
    for traj in corpus.joint(joint):
        r = resample_cycle(traj, grid_size)
        rows.append(np.column_stack([r.phase, r.angle, r.torque]))
    if not rows:
        raise DataError(f"corpus has no {joint} cycles")
    return np.vstack(rows)


def fit_reference_model(corpus: Corpus, joint: str, L: int | None = None, seed: int = 0,
                        grid_size: int = GRID_SIZE, L_range: Iterable[int] = BIC_RANGE,
                        **kwargs) -> ReferenceModel:
    data = pooled_triples(corpus, joint, grid_size)
    mean = data.mean(axis=0)
    scale = data.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Z = (data - mean) / scale
    gmm = gmm_fit(Z, L, seed, **kwargs) if L else select_gmm(Z, L_range, seed, **kwargs)
    return ReferenceModel(joint, gmm, mean, scale)


def build_reference_distribution(corpus: Corpus, joint: str, L: int | None = None, seed: int = 0,
                                 grid_size: int = GRID_SIZE, model: ReferenceModel | None = None,
                                 cov_floor: float = COV_FLOOR, **kwargs) -> ReferenceDistribution:
    """Pool every cycle of ``joint``, fit a mixture (BIC-selected when ``L`` is None),
    and retrieve the per-phase (angle, torque) Gaussian on the canonical grid."""
    if model is None:
        model = fit_reference_model(corpus, joint, L, seed, grid_size, cov_floor=cov_floor, **kwargs)
    grid = canonical_grid(grid_size)
    means, covs = model.retrieve(grid, cov_floor)
    return ReferenceDistribution(joint, grid, means, covs, tuple(corpus.tasks()))
