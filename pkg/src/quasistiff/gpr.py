"""Exact Gaussian process regression from task parameters to target features.

Zero prior mean, squared-exponential ARD covariance. Each target feature gets
two independent GPs: one for its value and one for the phase at which it
occurs.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import FeatureExtractionError, FitError, ParameterError
from .gait_data import (
    GRID_SIZE,
    Corpus,
    Feature,
    FeatureSpec,
    FeatureWindow,
    TargetFeatureSet,
    TaskParams,
    extract_target_features,
    task_means,
)

LENGTH_GRID = tuple(np.geomspace(0.1, 3.0, 10))
NOISE_GRID = (1e-6, 1e-4, 1e-2, 1e-1)
JITTER_START = 1e-10
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class KernelParams:
    length_scales: tuple[float, ...]
    signal_var: float
    kind: str = "squared_exponential"

    def __post_init__(self):
        if self.kind != "squared_exponential":
            raise ParameterError(f"unsupported kernel {self.kind!r}")
        ls = tuple(float(x) for x in np.atleast_1d(self.length_scales))
        object.__setattr__(self, "length_scales", ls)
        if not ls or any(not (x > 0 and math.isfinite(x)) for x in ls):
            raise ParameterError(f"length scales must be positive, got {ls}")
        if not (self.signal_var > 0 and math.isfinite(self.signal_var)):
            raise ParameterError(f"signal variance must be positive, got {self.signal_var}")

    def __call__(self, A, B) -> np.ndarray:
        A = np.atleast_2d(A) / self.length_scales
        B = np.atleast_2d(B) / self.length_scales
        d2 = (np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T)
        return self.signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))

    def to_dict(self):
        return {"kind": self.kind, "length_scales": list(self.length_scales), "signal_var": self.signal_var}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["length_scales"]), d["signal_var"], d.get("kind", "squared_exponential"))


def _gram(kernel: KernelParams, Z: np.ndarray) -> np.ndarray:
    # Built from explicit pairwise differences so that K[i, j] == K[j, i] bit for bit.
    diff = (Z[:, None, :] - Z[None, :, :]) / np.asarray(kernel.length_scales)
    return kernel.signal_var * np.exp(-0.5 * np.sum(diff * diff, axis=-1))


def cholesky_with_jitter(A: np.ndarray, what: str = "covariance"):
    """Lower Cholesky factor of ``A``, adding diagonal jitter 1e-10 ... 1e-4 on failure."""
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    eye = np.eye(A.shape[0])
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(A + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(A)
    raise FitError(f"{what} is not positive definite after jitter {JITTER_MAX:g} "
                   f"(condition estimate {cond:.3g})")


@dataclass(frozen=True, eq=False)
class GprModel:
    inputs: np.ndarray  # normalised, (n, D)
    targets: np.ndarray
    kernel: KernelParams
    noise_var: float
    alpha: np.ndarray
    chol: np.ndarray
    input_mean: np.ndarray
    input_scale: np.ndarray
    jitter: float = 0.0
    task_dims: tuple[int, ...] | None = None

    @property
    def n(self) -> int:
        return self.targets.size

    def normalize(self, X) -> np.ndarray:
        return (np.atleast_2d(np.asarray(X, float)) - self.input_mean) / self.input_scale

    def denormalize(self, Z) -> np.ndarray:
        return np.atleast_2d(Z) * self.input_scale + self.input_mean

    def as_inputs(self, x) -> np.ndarray:
        if isinstance(x, TaskParams):
            x = [x]
        if isinstance(x, (list, tuple)) and x and isinstance(x[0], TaskParams):
            if self.task_dims is None:
                raise ParameterError("model was fitted on raw arrays; pass input vectors")
            x = np.array([t.as_vector()[list(self.task_dims)] for t in x])
        X = np.asarray(x, float)
        if X.ndim < 2:
            X = X.reshape(-1, self.inputs.shape[1]) if X.size % self.inputs.shape[1] == 0 else X
        if X.ndim != 2 or X.shape[1] != self.inputs.shape[1]:
            raise ParameterError(f"expected inputs with {self.inputs.shape[1]} columns")
        if not np.all(np.isfinite(X)):
            raise ParameterError("GP input contains NaN or Inf")
        return X

    def log_marginal_likelihood(self) -> float:
        return float(-0.5 * self.targets @ self.alpha - np.sum(np.log(np.diag(self.chol)))
                     - 0.5 * self.n * math.log(2 * math.pi))

    def to_dict(self) -> dict:
        return {
            "inputs": self.inputs, "targets": self.targets, "kernel": self.kernel.to_dict(),
            "noise_var": self.noise_var, "alpha": self.alpha, "chol": self.chol,
            "input_mean": self.input_mean, "input_scale": self.input_scale, "jitter": self.jitter,
            "task_dims": None if self.task_dims is None else list(self.task_dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GprModel":
        arr = lambda k: np.asarray(d[k], float)  # noqa: E731
        return cls(arr("inputs").reshape(len(d["targets"]), -1), arr("targets"),
                   KernelParams.from_dict(d["kernel"]), float(d["noise_var"]), arr("alpha"),
                   arr("chol").reshape(len(d["targets"]), len(d["targets"])), arr("input_mean"),
                   arr("input_scale"), float(d["jitter"]),
                   None if d.get("task_dims") is None else tuple(d["task_dims"]))


def input_scaler(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12 * np.maximum(1.0, np.abs(mean)), scale, 1.0)
    return mean, scale


def gpr_fit(X, y, kernel: KernelParams, noise_var: float, task_dims=None,
            scaler: tuple[np.ndarray, np.ndarray] | None = None) -> GprModel:
    """Condition a zero-mean GP on ``(X, y)``; inputs are standardised per dimension."""
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, float).ravel()
    if X.shape[0] != y.size or y.size < 1:
        raise ParameterError("GP needs matching, non-empty inputs and targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ParameterError("GP training data contains NaN or Inf")
    if noise_var < 0:
        raise ParameterError("noise variance must be non-negative")
    if len(kernel.length_scales) != X.shape[1]:
        raise ParameterError(f"kernel has {len(kernel.length_scales)} length scales for "
                             f"{X.shape[1]} input dimensions")
    if noise_var == 0 and len({tuple(r) for r in X}) < X.shape[0]:
        raise ParameterError("duplicate inputs require a positive noise variance")
    mean, scale = scaler if scaler is not None else input_scaler(X)
    Z = (X - mean) / scale
    K = _gram(kernel, Z) + noise_var * np.eye(y.size)
    L, jitter = cholesky_with_jitter(K, "GP covariance")
    alpha = cho_solve((L, True), y)
    return GprModel(Z, y, kernel, float(noise_var), alpha, L, mean, scale, jitter,
                    None if task_dims is None else tuple(task_dims))


def gpr_predict(model: GprModel, x_star) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at one or more inputs."""
    Zs = model.normalize(model.as_inputs(x_star))
    Ks = model.kernel(Zs, model.inputs)
    mean = Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True)
    var = model.kernel.signal_var - np.sum(v * v, axis=0)
    if np.any(var < -1e-10 * max(1.0, model.kernel.signal_var)):
        raise FitError(f"negative posterior variance {var.min():.3g}")
    return mean, np.maximum(var, 0.0)


def select_hyperparameters(X, y, signal_var: float = 1.0, length_grid: Sequence[float] = LENGTH_GRID,
                           noise_grid: Sequence[float] = NOISE_GRID, task_dims=None) -> GprModel:
    """Grid search of the log marginal likelihood over length scales and noise."""
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    scaler = input_scaler(X)
    best, best_lml = None, -np.inf
    for ls in itertools.product(length_grid, repeat=X.shape[1]):
        kernel = KernelParams(ls, signal_var)
        for noise in noise_grid:
            try:
                m = gpr_fit(X, y, kernel, noise, task_dims, scaler)
            except FitError:
                continue
            lml = m.log_marginal_likelihood()
            if lml > best_lml + 1e-12:
                best, best_lml = m, lml
    if best is None:
        raise FitError("no hyperparameter setting produced a valid GP")
    return best


@dataclass(frozen=True, eq=False)
class StandardizedGp:
    """A GP fitted to standardised targets; predictions are mapped back to data units."""

    model: GprModel
    mean: float
    scale: float

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        mu, var = gpr_predict(self.model, x)
        return self.mean + self.scale * mu, var * self.scale ** 2

    def to_dict(self):
        return {"model": self.model.to_dict(), "mean": self.mean, "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(GprModel.from_dict(d["model"]), float(d["mean"]), float(d["scale"]))


def fit_standardized(X, y, task_dims=None, **grid) -> StandardizedGp:
    y = np.asarray(y, float)
    mean = float(y.mean())
    scale = float(y.std())
    if not scale > 1e-12 * max(1.0, abs(mean)):
        scale = 1.0
    # Unit target variance after standardisation, so the signal variance is 1.
    model = select_hyperparameters(X, (y - mean) / scale, 1.0, task_dims=task_dims, **grid)
    return StandardizedGp(model, mean, scale)


@dataclass(frozen=True, eq=False)
class FeatureBank:
    """Per-joint bank: for each feature window, one GP for its value and one for its phase."""

    joint: str
    windows: tuple[FeatureWindow, ...]
    task_dims: tuple[int, ...]
    value_gps: tuple[StandardizedGp, ...]
    phase_gps: tuple[StandardizedGp, ...]

    def __len__(self):
        return len(self.windows)

    def to_dict(self) -> dict:
        return {
            "joint": self.joint,
            "windows": [{"kind": w.kind, "polarity": w.polarity, "window": [w.lo, w.hi]}
                        for w in self.windows],
            "task_dims": list(self.task_dims),
            "value_gps": [g.to_dict() for g in self.value_gps],
            "phase_gps": [g.to_dict() for g in self.phase_gps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureBank":
        windows = tuple(FeatureWindow(w["kind"], w["polarity"], *w["window"]) for w in d["windows"])
        return cls(d["joint"], windows, tuple(d["task_dims"]),
                   tuple(StandardizedGp.from_dict(g) for g in d["value_gps"]),
                   tuple(StandardizedGp.from_dict(g) for g in d["phase_gps"]))


def active_task_dims(tasks: Sequence[TaskParams]) -> tuple[int, ...]:
    """Task-vector dimensions that vary across ``tasks`` (speed alone if none do)."""
    V = np.array([t.as_vector() for t in tasks])
    dims = tuple(int(d) for d in np.flatnonzero(V.std(axis=0) > 0))
    return dims or (0,)


def gpr_fit_feature_bank(train: Corpus, spec: FeatureSpec, joint: str,
                         grid_size: int = GRID_SIZE, **grid) -> FeatureBank:
    windows = spec.for_joint(joint)
    means = task_means(train, joint, grid_size)
    if not means:
        raise FitError(f"training corpus has no {joint} cycles")
    feats = {}
    for task, traj in means.items():
        try:
            feats[task] = extract_target_features(traj, windows)
        except FeatureExtractionError as exc:
            kappa = getattr(exc, "window_index", "?")
            raise FitError(f"task {task.label}, feature {kappa}: {exc}") from exc
    tasks = list(feats)
    dims = active_task_dims(tasks)
    X = np.array([t.as_vector()[list(dims)] for t in tasks])
    value_gps, phase_gps = [], []
    for kappa in range(len(windows)):
        by_index = [next(f for f in feats[t].features if f.index == kappa) for t in tasks]
        value_gps.append(fit_standardized(X, [f.value for f in by_index], dims, **grid))
        phase_gps.append(fit_standardized(X, [f.phase for f in by_index], dims, **grid))
    return FeatureBank(joint, tuple(windows), dims, tuple(value_gps), tuple(phase_gps))


@dataclass(frozen=True)
class FeaturePrediction:
    """Posterior of every feature in window order, before phase sorting."""

    values: np.ndarray
    value_std: np.ndarray
    phases: np.ndarray
    phase_std: np.ndarray


def predict_feature_distribution(bank: FeatureBank, task: TaskParams) -> FeaturePrediction:
    vals, vstd, phs, pstd = [], [], [], []
    for vg, pg in zip(bank.value_gps, bank.phase_gps):
        m, v = vg.predict(task)
        vals.append(m[0])
        vstd.append(math.sqrt(v[0]))
        m, v = pg.predict(task)
        phs.append(m[0])
        pstd.append(math.sqrt(v[0]))
    return FeaturePrediction(np.array(vals), np.array(vstd), np.array(phs), np.array(pstd))


def predict_target_features(bank: FeatureBank, task: TaskParams) -> TargetFeatureSet:
    """Predicted feature set for a (possibly unseen) task, ordered by phase."""
    pred = predict_feature_distribution(bank, task)
    phases = np.clip(pred.phases, 0.0, 1.0)
    feats = [Feature(w.kind, w.polarity, float(p), float(v), i)
             for i, (w, p, v) in enumerate(zip(bank.windows, phases, pred.values))]
    notes = []
    if _phase_order_changed(bank, pred.phases):
        notes.append(f"{bank.joint} ({task.label}): predicted feature phases out of order; reordered")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    ordered = sorted(feats, key=lambda f: (f.phase, f.index))
    return TargetFeatureSet(bank.joint, task, tuple(ordered), tuple(notes))


def _phase_order_changed(bank: FeatureBank, phases: np.ndarray) -> bool:
    """True if the predicted phases reorder features of the same kind relative to training.

    Angle and torque extrema constrain different outputs, so their relative
    order carries no meaning and may swap freely.
    """
    for kind in {w.kind for w in bank.windows}:
        idx = [i for i, w in enumerate(bank.windows) if w.kind == kind]
        train_order = np.argsort([bank.phase_gps[i].mean for i in idx], kind="stable")
        pred_order = np.argsort(phases[idx], kind="stable")
        if not np.array_equal(train_order, pred_order):
            return True
    return False
