"""Four-state gait-phase machine commanding tau = k (theta - theta_e) per joint.

The machine cycles stance flexion -> stance extension -> swing flexion ->
swing extension, driven by the vertical ground reaction force, the sagittal
moment and the knee angle. A single machine drives every joint; each joint
reads its own quasi-stiffness table.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParameterError, StreamError
from .stiffness import SUB_PHASES, QuasiStiffnessTable, SubPhase

STREAM_COLUMNS = ("t_s", "Fz_N", "My_Nm", "qk_deg", "qa_deg")
HS_FRACTION = 0.15
TO_FRACTION = 0.05
DEBOUNCE = 3
BLEND_WINDOW = 0.05  # s
BLEND_RATE = 5.0
SWING_MARGIN = 5.0  # deg below the swing knee-flexion peak


@dataclass(frozen=True)
class SensorSample:
    t: float
    F_z: float
    M_y: float
    q_k: float
    q_a: float

    def angle(self, joint: str) -> float:
        return self.q_k if joint == "knee" else self.q_a


@dataclass(frozen=True)
class FsmThresholds:
    My_se: float = 0.0  # N m
    Fz_to: float = 35.0  # N
    qk_se: float = 50.0  # deg
    Fz_hs: float = 105.0  # N
    debounce_samples: int = DEBOUNCE
    blend_window: float = BLEND_WINDOW  # s; 0 switches laws instantly

    def __post_init__(self):
        vals = (self.My_se, self.Fz_to, self.qk_se, self.Fz_hs, self.blend_window)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ParameterError("FSM thresholds must be finite")
        if not self.Fz_hs > self.Fz_to:
            raise ParameterError(f"Fz_hs ({self.Fz_hs}) must exceed Fz_to ({self.Fz_to})")
        if int(self.debounce_samples) != self.debounce_samples or self.debounce_samples < 0:
            raise ParameterError("debounce_samples must be a non-negative integer")
        if self.blend_window < 0:
            raise ParameterError("blend_window must be >= 0")

    @classmethod
    def from_body_weight(cls, body_weight: float, qk_se: float, My_se: float = 0.0,
                         hs_fraction: float = HS_FRACTION, to_fraction: float = TO_FRACTION,
                         **kwargs) -> "FsmThresholds":
        if not body_weight > 0:
            raise ParameterError("body weight must be positive")
        return cls(My_se, to_fraction * body_weight, qk_se, hs_fraction * body_weight, **kwargs)

    def to_dict(self) -> dict:
        return {"My_se": self.My_se, "Fz_to": self.Fz_to, "qk_se": self.qk_se, "Fz_hs": self.Fz_hs,
                "debounce_samples": int(self.debounce_samples), "blend_window": self.blend_window}

    @classmethod
    def from_dict(cls, d: dict) -> "FsmThresholds":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown threshold keys {sorted(unknown)}")
        return cls(**d)


def swing_threshold(knee_angle, phase, toe_off: float = 0.6, margin: float = SWING_MARGIN) -> float:
    """Swing-extension trigger: the swing knee-flexion peak less ``margin`` degrees."""
    phase, knee_angle = np.asarray(phase), np.asarray(knee_angle)
    return float(knee_angle[phase >= toe_off].max() - margin)


@dataclass(frozen=True)
class Transition:
    t: float
    sample: int
    source: SubPhase
    target: SubPhase


@dataclass(frozen=True)
class ControllerState:
    current: SubPhase
    entered_at: float
    tables: dict  # joint -> QuasiStiffnessTable
    transition_log: tuple[Transition, ...] = ()
    pending: int = 0  # consecutive samples satisfying the exit condition
    previous: SubPhase | None = None  # law being blended out
    last_t: float = -math.inf
    n_samples: int = 0


def make_controller(tables: dict[str, QuasiStiffnessTable],
                    initial: SubPhase = SubPhase.SWING_EXTENSION) -> ControllerState:
    if not tables:
        raise ParameterError("controller needs at least one joint table")
    for joint, table in tables.items():
        missing = [sp.value for sp in SUB_PHASES if sp not in table.entries]
        if missing:
            raise ParameterError(f"{joint} table incomplete: {missing}")
    return ControllerState(SubPhase(initial), -math.inf, dict(tables))


def exit_condition(phase: SubPhase, s: SensorSample, th: FsmThresholds) -> bool:
    if phase is SubPhase.STANCE_FLEXION:
        return s.M_y > th.My_se
    if phase is SubPhase.STANCE_EXTENSION:
        return s.F_z < th.Fz_to
    if phase is SubPhase.SWING_FLEXION:
        return s.q_k >= th.qk_se
    return s.F_z > th.Fz_hs


def blend_weight(elapsed: float, window: float) -> float:
    """Weight of the outgoing law: 1 at the transition, exactly 0 at ``window``."""
    if window <= 0 or elapsed >= window:
        return 0.0
    x = max(elapsed, 0.0) / window
    floor = math.exp(-BLEND_RATE)
    return (math.exp(-BLEND_RATE * x) - floor) / (1.0 - floor)


def commands(state: ControllerState, sample: SensorSample, th: FsmThresholds) -> dict[str, float]:
    w = 0.0
    if state.previous is not None:
        w = blend_weight(sample.t - state.entered_at, th.blend_window)
    out = {}
    for joint, table in state.tables.items():
        theta = sample.angle(joint)
        tau = float(table[state.current].torque(theta))
        if w > 0.0:
            tau = w * float(table[state.previous].torque(theta)) + (1.0 - w) * tau
        out[joint] = tau
    return out


def fsm_step(state: ControllerState, sample: SensorSample,
             thresholds: FsmThresholds) -> tuple[ControllerState, dict[str, float]]:
    """Advance one sample: at most one transition, then the torque commands."""
    need = max(int(thresholds.debounce_samples), 1)
    pending = state.pending + 1 if exit_condition(state.current, sample, thresholds) else 0
    index = state.n_samples
    if pending >= need:
        target = state.current.next()
        log = state.transition_log + (Transition(sample.t, index, state.current, target),)
        state = replace(state, current=target, entered_at=sample.t, transition_log=log,
                        pending=0, previous=state.current)
    else:
        state = replace(state, pending=pending)
    state = replace(state, last_t=sample.t, n_samples=index + 1)
    return state, commands(state, sample, thresholds)


@dataclass(frozen=True, eq=False)
class TraceLog:
    t: np.ndarray
    states: tuple[SubPhase, ...]
    commands: dict  # joint -> ndarray
    transitions: tuple[Transition, ...]
    final_state: ControllerState | None = field(default=None, repr=False)

    def __len__(self):
        return self.t.size

    def to_csv(self) -> str:
        joints = ("knee", "ankle")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_s", "state"] + [f"tau_{j}_nmkg" for j in joints])
        for k in range(self.t.size):
            row = [repr(float(self.t[k])), self.states[k].value]
            row += [repr(float(self.commands[j][k])) if j in self.commands else "" for j in joints]
            w.writerow(row)
        return buf.getvalue()

    def transitions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_s", "sample", "from", "to"])
        for tr in self.transitions:
            w.writerow([repr(tr.t), tr.sample, tr.source.value, tr.target.value])
        return buf.getvalue()


def run_stream(controller: ControllerState, stream: Iterable[SensorSample],
               thresholds: FsmThresholds) -> TraceLog:
    state = controller
    ts, states = [], []
    cmds: dict[str, list[float]] = {j: [] for j in controller.tables}
    last = controller.last_t
    for i, s in enumerate(stream):
        if not all(math.isfinite(v) for v in (s.t, s.F_z, s.M_y, s.q_k, s.q_a)):
            raise StreamError(f"sample {i}: non-finite value")
        if not s.t > last:
            raise StreamError(f"sample {i}: timestamp {s.t} not after {last}")
        last = s.t
        state, c = fsm_step(state, s, thresholds)
        ts.append(s.t)
        states.append(state.current)
        for j, v in c.items():
            cmds[j].append(v)
    new = state.transition_log[len(controller.transition_log):]
    return TraceLog(np.asarray(ts, float), tuple(states),
                    {j: np.asarray(v, float) for j, v in cmds.items()}, new, state)


def samples_from_arrays(t, Fz, My, qk, qa) -> list[SensorSample]:
    return [SensorSample(*map(float, row)) for row in zip(t, Fz, My, qk, qa)]


def write_stream_csv(samples: Sequence[SensorSample], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STREAM_COLUMNS)
    for s in samples:
        w.writerow([repr(s.t), repr(s.F_z), repr(s.M_y), repr(s.q_k), repr(s.q_a)])
    text = buf.getvalue()
    if path is not None:
        from .persist import atomic_write_text

        atomic_write_text(path, text)
    return text


def read_stream_csv(path) -> list[SensorSample]:
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except FileNotFoundError:
        raise StreamError(f"stream file {path} not found") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = set(STREAM_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise StreamError(f"{path}: missing columns {sorted(missing)}")
        out = []
        for i, row in enumerate(reader):
            try:
                out.append(SensorSample(*(float(row[c]) for c in STREAM_COLUMNS)))
            except ValueError:
                raise StreamError(f"{path}: row {i}: non-numeric value") from None
    return out
