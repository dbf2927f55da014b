"""Quasi-stiffness: piecewise-linear torque-angle laws over the four gait sub-phases.

Within each sub-phase the controller applies tau = k (theta - theta_e), where k
is the ordinary-least-squares slope of torque on angle and theta_e the angle at
which the fitted line crosses zero torque.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ParameterError, SegmentationError, StiffnessError
from .gait_data import TaskParams, TorqueAngleRelation
from .persist import load_model, save_model

K_FLOOR = 1e-6
R2_WARN = 0.8
TOE_OFF = 0.60
MIN_POINTS = 3


class SubPhase(str, Enum):
    STANCE_FLEXION = "stance_flexion"
    STANCE_EXTENSION = "stance_extension"
    SWING_FLEXION = "swing_flexion"
    SWING_EXTENSION = "swing_extension"

    @property
    def short(self) -> str:
        return {"stance_flexion": "SF", "stance_extension": "SE",
                "swing_flexion": "SwF", "swing_extension": "SwE"}[self.value]

    def next(self) -> "SubPhase":
        order = list(SubPhase)
        return order[(order.index(self) + 1) % len(order)]


SUB_PHASES = tuple(SubPhase)


@dataclass(frozen=True)
class SegmentationSpec:
    """Start phases of the four sub-phases; the first is always 0.

    Segment i covers [b_i, b_{i+1}); the last segment also contains phase 1.
    """

    boundaries: tuple[float, float, float, float]

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) != 4:
            raise ParameterError("segmentation needs four start phases")
        if b[0] != 0.0:
            raise ParameterError("first sub-phase must start at phase 0")
        if not all(x < y for x, y in zip(b, b[1:] + (1.0,))):
            raise ParameterError(f"segmentation boundaries {b} must increase strictly inside [0, 1)")

    def ranges(self) -> dict[SubPhase, tuple[float, float]]:
        ends = self.boundaries[1:] + (1.0,)
        return {sp: (lo, hi) for sp, lo, hi in zip(SUB_PHASES, self.boundaries, ends)}

    def to_dict(self) -> dict:
        return {"boundaries": list(self.boundaries)}

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentationSpec":
        return cls(tuple(d["boundaries"]))


def default_segmentation(knee: TorqueAngleRelation, toe_off: float = TOE_OFF) -> SegmentationSpec:
    """Boundaries anchored on knee-angle extrema.

    Stance extension starts at the stance-flexion peak (largest knee angle
    before mid-stance), swing flexion at toe-off, and swing extension at the
    swing knee-flexion peak.
    """
    if not 0.0 < toe_off < 1.0:
        raise ParameterError("toe-off phase must lie in (0, 1)")
    phase, angle = np.asarray(knee.phase), np.asarray(knee.angle)
    stance = np.flatnonzero((phase > 0.0) & (phase < 0.5 * toe_off))
    swing = np.flatnonzero(phase >= toe_off)
    if stance.size == 0 or swing.size == 0:
        raise SegmentationError("relation too coarse to locate knee extrema")
    peak_stance = float(phase[stance[np.argmax(angle[stance])]])
    peak_swing = float(phase[swing[np.argmax(angle[swing])]])
    try:
        return SegmentationSpec((0.0, peak_stance, toe_off, peak_swing))
    except ParameterError as exc:
        raise SegmentationError(f"degenerate default segmentation: {exc}") from None


def segment_masks(phase: np.ndarray, seg: SegmentationSpec) -> dict[SubPhase, np.ndarray]:
    phase = np.asarray(phase, float)
    masks = {}
    for i, (sp, (lo, hi)) in enumerate(seg.ranges().items()):
        m = phase >= lo - 1e-12
        if i < 3:
            m &= phase < hi - 1e-12
        masks[sp] = m
    return masks


def segment_relation(rel: TorqueAngleRelation, seg: SegmentationSpec) -> dict[SubPhase, np.ndarray]:
    """Split a relation into per-sub-phase (angle, torque) point arrays."""
    out = {}
    for sp, m in segment_masks(rel.phase, seg).items():
        n = int(m.sum())
        if n < MIN_POINTS:
            raise SegmentationError(f"sub-phase {sp.value} has {n} points (< {MIN_POINTS})")
        out[sp] = np.column_stack([rel.angle[m], rel.torque[m]])
    return out


class StiffnessFit(NamedTuple):
    k: float
    theta_e: float
    r_squared: float


def ols_line(angle, torque) -> tuple[float, float, float, float]:
    """Slope, intercept, r^2 and slope standard error of torque regressed on angle."""
    x = np.asarray(angle, float)
    y = np.asarray(torque, float)
    n = x.size
    if n < MIN_POINTS or y.size != n:
        raise ParameterError(f"need >= {MIN_POINTS} paired points for a line fit")
    if np.ptp(x) == 0:
        raise ParameterError("angle is constant; slope undefined")
    A = np.column_stack([x, np.ones(n)])
    (k, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (k * x + b)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    sxx = float(np.sum((x - x.mean()) ** 2))
    se = math.sqrt(ss_res / (n - 2) / sxx) if n > 2 else math.inf
    return float(k), float(b), float(r2), se


def fit_quasi_stiffness(sub_curve, segment: str = "segment", k_floor: float = K_FLOOR) -> StiffnessFit:
    pts = np.asarray(sub_curve, float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ParameterError("sub-curve must be a sequence of (angle, torque) pairs")
    k, b, r2, _ = ols_line(pts[:, 0], pts[:, 1])
    if abs(k) < k_floor:
        raise StiffnessError(f"{segment}: |k| = {abs(k):.3g} below floor {k_floor:g}; equilibrium angle undefined")
    return StiffnessFit(k, -b / k, r2)


@dataclass(frozen=True)
class StiffnessEntry:
    k: float  # N m / kg per degree
    theta_e: float  # degrees
    r_squared: float
    n_points: int
    k_stderr: float = math.nan

    def torque(self, theta):
        return self.k * (np.asarray(theta, float) - self.theta_e)


@dataclass(frozen=True)
class QuasiStiffnessTable:
    joint: str
    task: TaskParams
    entries: dict  # SubPhase -> StiffnessEntry
    segmentation: SegmentationSpec
    provenance: dict = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        missing = [sp.value for sp in SUB_PHASES if sp not in self.entries]
        if missing:
            raise ParameterError(f"stiffness table for {self.joint} lacks {missing}")
        for sp, e in self.entries.items():
            if e.n_points < MIN_POINTS or not math.isfinite(e.k):
                raise ParameterError(f"invalid stiffness entry for {sp.value}")

    def __getitem__(self, sp) -> StiffnessEntry:
        return self.entries[SubPhase(sp)]

    def torque(self, sp, theta) -> float:
        return self[sp].torque(theta)

    def to_dict(self) -> dict:
        return {
            "joint": self.joint,
            "task": self.task.to_dict(),
            "segmentation": self.segmentation.to_dict(),
            "entries": {sp.value: {"k": e.k, "theta_e": e.theta_e, "r_squared": e.r_squared,
                                   "n_points": e.n_points, "k_stderr": _finite_or_none(e.k_stderr)}
                        for sp, e in self.entries.items()},
            "provenance": dict(self.provenance),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuasiStiffnessTable":
        entries = {SubPhase(name): StiffnessEntry(e["k"], e["theta_e"], e["r_squared"], int(e["n_points"]),
                                                  math.nan if e.get("k_stderr") is None else e["k_stderr"])
                   for name, e in d["entries"].items()}
        return cls(d["joint"], TaskParams.from_dict(d["task"]), entries,
                   SegmentationSpec.from_dict(d["segmentation"]), dict(d.get("provenance", {})),
                   tuple(d.get("warnings", ())))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["joint", "sub_phase", "phase_start", "phase_end", "k_nmkg_per_deg",
                    "theta_e_deg", "r_squared", "n_points"])
        for sp, (lo, hi) in self.segmentation.ranges().items():
            e = self.entries[sp]
            w.writerow([self.joint, sp.value, repr(lo), repr(hi), repr(e.k), repr(e.theta_e),
                        repr(e.r_squared), e.n_points])
        return buf.getvalue()


def _finite_or_none(x: float):
    return x if math.isfinite(x) else None


def build_stiffness_table(rel: TorqueAngleRelation, seg: SegmentationSpec | None = None,
                          provenance: dict | None = None, k_floor: float = K_FLOOR,
                          r2_warn: float = R2_WARN) -> QuasiStiffnessTable:
    """Fit all four sub-phases; any failing segment fails the table."""
    if seg is None:
        if rel.joint != "knee":
            raise ParameterError("default segmentation is knee-driven; pass the knee-derived spec")
        seg = default_segmentation(rel)
    parts = segment_relation(rel, seg)
    entries, notes, failed = {}, [], []
    for sp, pts in parts.items():
        k, b, r2, se = ols_line(pts[:, 0], pts[:, 1]) if np.ptp(pts[:, 0]) > 0 else (0.0, 0.0, 0.0, math.inf)
        if abs(k) < k_floor:
            failed.append(sp.value)
            continue
        entries[sp] = StiffnessEntry(k, -b / k, r2, int(pts.shape[0]), se)
        if r2 < r2_warn:
            notes.append(f"{rel.joint} {sp.value}: r^2 = {r2:.3f} below {r2_warn}")
    if failed:
        raise StiffnessError(f"{rel.joint} {', '.join(failed)}: |k| below floor {k_floor:g}; "
                             "equilibrium angle undefined")
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    prov = {"task": rel.task.label, **(provenance or {})}
    return QuasiStiffnessTable(rel.joint, rel.task, entries, seg, prov, tuple(notes))


def build_joint_tables(relations: Sequence[TorqueAngleRelation], seg: SegmentationSpec | None = None,
                       provenance: dict | None = None, **kwargs) -> dict[str, QuasiStiffnessTable]:
    """Tables for several joints sharing the knee-driven segmentation."""
    by_joint = {r.joint: r for r in relations}
    if seg is None:
        if "knee" not in by_joint:
            raise ParameterError("default segmentation needs the knee relation")
        seg = default_segmentation(by_joint["knee"])
    return {j: build_stiffness_table(r, seg, provenance, **kwargs) for j, r in by_joint.items()}


def save_tables(path, tables: dict[str, QuasiStiffnessTable], thresholds: dict | None = None):
    """Controller parameter file: per-joint tables plus optional FSM thresholds."""
    payload = {"tables": {j: t.to_dict() for j, t in sorted(tables.items())}}
    if thresholds is not None:
        payload["thresholds"] = dict(thresholds)
    return save_model(path, "stiffness", payload)


def load_tables(path) -> dict[str, QuasiStiffnessTable]:
    doc = load_model(path, "stiffness")
    return {j: QuasiStiffnessTable.from_dict(d) for j, d in doc["tables"].items()}
