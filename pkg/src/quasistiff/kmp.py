"""Kernelized movement primitives over gait phase with via-point constraints.

The reference distribution (per-phase mean and covariance of angle and torque)
is modulated to pass through via-points. Everything is solved in kernel form:

    mean(s*) = k*(K + lam Sigma)^-1 mu
    cov(s*)  = (N / lam_c) (k** - k*(K + lam_c Sigma)^-1 k*^T)

with K = Kp (x) I_O, Kp the phase-kernel Gram matrix, Sigma the block diagonal
of support covariances and N the number of support points. Outputs are
standardised with the reference mean and spread before solving.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import FitError, ParameterError
from .gait_data import GRID_SIZE, TargetFeatureSet, TaskParams, TorqueAngleRelation, canonical_grid
from .gmm import ReferenceDistribution
from .gpr import FeatureBank, KernelParams, predict_target_features

DEFAULT_LENGTH = 0.1
DEFAULT_LAMBDA = 1.0
VIA_EPS = 1e-6
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


def phase_kernel(length_scale: float = DEFAULT_LENGTH) -> KernelParams:
    return KernelParams((length_scale,), 1.0)


@dataclass(frozen=True, eq=False)
class ViaPoint:
    """Desired (angle, torque) Gaussian at a gait phase, in data units."""

    index: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, float).reshape(-1))
        object.__setattr__(self, "cov", np.asarray(self.cov, float))
        if not 0.0 <= self.index <= 1.0:
            raise ParameterError(f"via-point index {self.index} outside [0, 1]")
        try:
            np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise ParameterError(f"via-point covariance at {self.index} is not positive definite") from None


def output_scaler(ref: ReferenceDistribution) -> tuple[np.ndarray, np.ndarray]:
    mean = ref.means.mean(axis=0)
    scale = ref.means.std(axis=0)
    return mean, np.where(scale > 0, scale, 1.0)


def hard_via(ref: ReferenceDistribution, index: float, mean, eps: float = VIA_EPS) -> ViaPoint:
    """Via-point with covariance ``eps * I`` in the reference's standardised units."""
    _, s = output_scaler(ref)
    return ViaPoint(index, mean, eps * np.outer(s, s) * np.eye(s.size))


@dataclass(frozen=True, eq=False)
class KmpModel:
    support: np.ndarray  # (M',)
    means: np.ndarray  # (M', O) standardised
    covs: np.ndarray  # (M', O, O) standardised
    kernel: KernelParams
    lam: float
    cov_lam: float
    out_mean: np.ndarray
    out_scale: np.ndarray
    weights: np.ndarray  # (M', O) = (K + lam Sigma)^-1 mu
    mean_factor: tuple = field(repr=False)
    cov_factor: tuple = field(repr=False)
    via_slots: tuple[int, ...] = ()

    @property
    def n_support(self) -> int:
        return self.support.size

    @property
    def n_out(self) -> int:
        return self.means.shape[1]

    def kernel_vector(self, s) -> np.ndarray:
        return self.kernel(np.asarray(s, float).reshape(-1, 1), self.support[:, None])

    def with_means(self, means) -> "KmpModel":
        """Same support, covariances and factorisations; new standardised means."""
        means = np.asarray(means, float).reshape(self.means.shape)
        weights = cho_solve(self.mean_factor, means.reshape(-1)).reshape(means.shape)
        return replace(self, means=means, weights=weights)


def _block_matrix(Kp: np.ndarray, covs: np.ndarray, lam: float) -> np.ndarray:
    M, O = covs.shape[0], covs.shape[1]
    A = np.kron(Kp, np.eye(O))
    for i in range(M):
        A[i * O:(i + 1) * O, i * O:(i + 1) * O] += lam * covs[i]
    return A


def _factor(A: np.ndarray):
    eye = np.eye(A.shape[0])
    for j in _JITTERS:
        try:
            return cho_factor(A + j * eye, lower=True)
        except np.linalg.LinAlgError:
            continue
    raise FitError("KMP system (K + lambda Sigma) is singular after jitter")


def assemble_support(index: np.ndarray, means: np.ndarray, covs: np.ndarray,
                     vias: Sequence[tuple[float, np.ndarray, np.ndarray]]):
    """Replace the nearest reference sample with each via-point.

    A via-point farther than half a grid step from every free sample is
    inserted instead; two via-points at the same phase are fused as a product
    of Gaussians.
    """
    support = list(map(float, index))
    mu = [m.copy() for m in means]
    cov = [c.copy() for c in covs]
    is_via = [False] * len(support)
    half = 0.5 * (float(np.min(np.diff(index))) if len(index) > 1 else 1.0)
    for s, m, c in vias:
        pos = np.asarray(support)
        i = int(np.argmin(np.abs(pos - s)))
        if is_via[i] and abs(support[i] - s) <= 1e-12:
            P1, P2 = np.linalg.inv(cov[i]), np.linalg.inv(c)
            cov[i] = np.linalg.inv(P1 + P2)
            mu[i] = cov[i] @ (P1 @ mu[i] + P2 @ m)
        elif not is_via[i] and abs(support[i] - s) <= half + 1e-12:
            support[i], mu[i], cov[i], is_via[i] = s, m.copy(), c.copy(), True
        else:
            j = int(np.searchsorted(pos, s))
            support.insert(j, s)
            mu.insert(j, m.copy())
            cov.insert(j, c.copy())
            is_via.insert(j, True)
    return np.asarray(support), np.asarray(mu), np.asarray(cov), tuple(np.flatnonzero(is_via))


def kmp_fit(ref: ReferenceDistribution, vias: Sequence[ViaPoint] = (), kernel: KernelParams | None = None,
            lam: float = DEFAULT_LAMBDA, cov_lam: float | None = None) -> KmpModel:
    if len(ref) == 0:
        raise ParameterError("empty reference distribution")
    if not lam > 0:
        raise ParameterError("KMP regulariser lambda must be positive")
    kernel = kernel or phase_kernel()
    if len(kernel.length_scales) != 1:
        raise ParameterError("KMP kernel must act on the scalar phase")
    m0, s0 = output_scaler(ref)
    S_inv = np.diag(1.0 / s0)
    z_means = (ref.means - m0) / s0
    z_covs = S_inv @ ref.covs @ S_inv
    z_vias = [(v.index, (v.mean - m0) / s0, S_inv @ v.cov @ S_inv) for v in vias]
    support, mu, covs, slots = assemble_support(ref.index, z_means, z_covs, z_vias)
    Kp = kernel(support[:, None], support[:, None])
    Kp = 0.5 * (Kp + Kp.T)
    factor = _factor(_block_matrix(Kp, covs, lam))
    weights = cho_solve(factor, mu.reshape(-1)).reshape(mu.shape)
    c_lam = float(support.size if cov_lam is None else cov_lam)
    if not c_lam > 0:
        raise ParameterError("KMP covariance regulariser must be positive")
    cov_factor = factor if c_lam == lam else _factor(_block_matrix(Kp, covs, c_lam))
    return KmpModel(support, mu, covs, kernel, float(lam), c_lam, m0, s0, weights, factor, cov_factor, slots)


@dataclass(frozen=True, eq=False)
class KmpPrediction:
    index: np.ndarray
    mean: np.ndarray  # (m, O) data units
    cov: np.ndarray  # (m, O, O) data units
    extrapolated: bool = False


def kmp_predict(model: KmpModel, index, standardized: bool = False) -> KmpPrediction:
    s = np.atleast_1d(np.asarray(index, float))
    extrapolated = bool(np.any((s < 0.0) | (s > 1.0)))
    if extrapolated:
        warnings.warn("KMP query outside the [0, 1] phase range", RuntimeWarning, stacklevel=2)
    ks = model.kernel_vector(s)  # (m, M')
    O = model.n_out
    mean_z = ks @ model.weights
    big = np.kron(ks, np.eye(O))  # (m O, M' O)
    sol = cho_solve(model.cov_factor, big.T)
    red = (big @ sol).reshape(s.size, O, s.size, O)
    red = red[np.arange(s.size), :, np.arange(s.size), :]
    cov_z = (model.n_support / model.cov_lam) * (model.kernel.signal_var * np.eye(O) - red)
    cov_z = 0.5 * (cov_z + np.swapaxes(cov_z, 1, 2))
    if standardized:
        return KmpPrediction(s, mean_z, cov_z, extrapolated)
    S = model.out_scale
    return KmpPrediction(s, mean_z * S + model.out_mean, cov_z * np.outer(S, S), extrapolated)


def _interp_reference(ref: ReferenceDistribution, phase: float):
    m = np.array([np.interp(phase, ref.index, ref.means[:, d]) for d in range(2)])
    c = np.empty((2, 2))
    for a in range(2):
        for b in range(2):
            c[a, b] = np.interp(phase, ref.index, ref.covs[:, a, b])
    return m, c


def feature_vias(ref: ReferenceDistribution, features: TargetFeatureSet, eps: float = VIA_EPS) -> list[ViaPoint]:
    """Turn angle/torque extrema into via-points.

    Each feature pins one output; the other output keeps the reference
    Gaussian at that phase conditioned on the pinned value (information-form
    product of the reference with a one-dimensional constraint).
    """
    m0, s0 = output_scaler(ref)
    vias = []
    for f in features.features:
        d = 0 if f.kind == "angle" else 1
        mu_r, cov_r = _interp_reference(ref, f.phase)
        z_mu = (mu_r - m0) / s0
        z_cov = cov_r / np.outer(s0, s0)
        P = np.linalg.inv(z_cov)
        info = P @ z_mu
        P[d, d] += 1.0 / eps
        info[d] += ((f.value - m0[d]) / s0[d]) / eps
        z_c = np.linalg.inv(P)
        z_c = 0.5 * (z_c + z_c.T)
        vias.append(ViaPoint(f.phase, z_c @ info * s0 + m0, z_c * np.outer(s0, s0)))
    return vias


@dataclass(frozen=True, eq=False)
class Reconstruction:
    relation: TorqueAngleRelation
    features: TargetFeatureSet
    vias: tuple[ViaPoint, ...]
    prediction: KmpPrediction
    model: KmpModel


def reconstruct(bank: FeatureBank, ref: ReferenceDistribution, task: TaskParams,
                kernel: KernelParams | None = None, lam: float = DEFAULT_LAMBDA,
                via_eps: float = VIA_EPS, grid_size: int = GRID_SIZE) -> Reconstruction:
    if bank.joint != ref.joint:
        raise ParameterError(f"feature bank is for {bank.joint}, reference for {ref.joint}")
    features = predict_target_features(bank, task)
    vias = feature_vias(ref, features, via_eps)
    model = kmp_fit(ref, vias, kernel, lam)
    grid = canonical_grid(grid_size)
    pred = kmp_predict(model, grid)
    rel = TorqueAngleRelation(ref.joint, task, grid, pred.mean[:, 0], pred.mean[:, 1])
    return Reconstruction(rel, features, tuple(vias), pred, model)


def reconstruct_relation(bank: FeatureBank, ref: ReferenceDistribution, task: TaskParams,
                         **kwargs) -> TorqueAngleRelation:
    return reconstruct(bank, ref, task, **kwargs).relation
