"""Synthetic multi-task gait family and ground-reaction sensor streams.

Each channel is a four-harmonic Fourier series whose coefficients are affine
in (speed, incline): the harmonic part is scaled by a gain and the constant
term shifted by an offset. Extremum phases are therefore task-independent and
extremum values move linearly with the task, which gives analytic oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import ParameterError
from .gait_data import GRID_SIZE, Corpus, GaitTrajectory, TaskParams, canonical_grid

CHANNELS = ("knee_angle", "knee_torque", "ankle_angle", "ankle_torque")
HARMONICS = 4
REFERENCE_SPEED = 1.0


@dataclass(frozen=True)
class ChannelModel:
    coeffs: tuple[float, ...]  # a0, a1, b1, ..., a4, b4 (cos, sin pairs)
    gain_speed: float = 0.0  # per m/s around REFERENCE_SPEED
    gain_incline: float = 0.0  # per degree
    offset_speed: float = 0.0
    offset_incline: float = 0.0
    bounds: tuple[float, float] = (-math.inf, math.inf)

    def __post_init__(self):
        if len(self.coeffs) != 2 * HARMONICS + 1:
            raise ParameterError(f"channel needs {2 * HARMONICS + 1} Fourier coefficients")

    def gain(self, task: TaskParams) -> float:
        return (1.0 + self.gain_speed * (task.speed - REFERENCE_SPEED)
                + self.gain_incline * task.incline)

    def offset(self, task: TaskParams) -> float:
        return self.offset_speed * (task.speed - REFERENCE_SPEED) + self.offset_incline * task.incline

    def task_coeffs(self, task: TaskParams) -> np.ndarray:
        c = np.asarray(self.coeffs, float) * self.gain(task)
        c[0] = self.coeffs[0] + self.offset(task)
        return c

    def __call__(self, task: TaskParams, phase) -> np.ndarray:
        phase = np.asarray(phase, float)
        c = self.task_coeffs(task)
        out = np.full(phase.shape, c[0])
        for h in range(1, HARMONICS + 1):
            w = 2.0 * math.pi * h * phase
            out = out + c[2 * h - 1] * np.cos(w) + c[2 * h] * np.sin(w)
        return out


def default_channels() -> dict[str, ChannelModel]:
    return {
        "knee_angle": ChannelModel(
            (17.6867, 3.7361, -16.7078, -14.7315, 1.5008, -3.6369, 7.939, 1.7635, -0.0975),
            gain_speed=0.25, gain_incline=0.008, offset_incline=0.25, bounds=(-15.0, 100.0)),
        "knee_torque": ChannelModel(
            (0.0001, 0.1007, 0.0941, -0.054, 0.1762, -0.0897, 0.0467, -0.0195, -0.0067),
            gain_speed=0.45, gain_incline=0.015, bounds=(-3.0, 3.0)),
        "ankle_angle": ChannelModel(
            (0.1506, -1.4044, 4.5102, 2.1516, -7.8316, -4.6068, 1.7845, 2.5218, 0.0755),
            gain_speed=0.12, gain_incline=0.01, offset_incline=0.35, bounds=(-40.0, 40.0)),
        "ankle_torque": ChannelModel(
            (0.3208, -0.4552, 0.0661, 0.3087, 0.061, -0.2333, 0.0097, 0.0445, -0.0231),
            gain_speed=0.3, gain_incline=0.025, offset_incline=0.008, bounds=(-3.0, 3.0)),
    }


def default_noise() -> dict[str, float]:
    return {"knee_angle": 1.0, "knee_torque": 0.02, "ankle_angle": 0.5, "ankle_torque": 0.02}


@dataclass(frozen=True)
class SyntheticGaitSpec:
    tasks: tuple[TaskParams, ...]
    n_cycles: int = 5
    noise_sigma: dict = field(default_factory=default_noise)
    seed: int = 0
    grid_size: int = GRID_SIZE
    cadence: float = 0.9  # gait cycles per second
    channels: dict = field(default_factory=default_channels)

    def __post_init__(self):
        if not self.tasks:
            raise ParameterError("synthetic spec needs at least one task")
        if self.n_cycles < 1:
            raise ParameterError("n_cycles must be >= 1")
        if not self.cadence > 0:
            raise ParameterError("cadence must be positive")
        unknown = set(self.noise_sigma) - set(CHANNELS)
        if unknown:
            raise ParameterError(f"unknown noise channels {sorted(unknown)}")

    def curve(self, channel: str, task: TaskParams, phase) -> np.ndarray:
        return self.channels[channel](task, phase)

    def truth(self, task: TaskParams, joint: str, grid_size: int | None = None) -> GaitTrajectory:
        grid = canonical_grid(grid_size or self.grid_size)
        return GaitTrajectory(joint, task, -1, grid, self.curve(f"{joint}_angle", task, grid),
                              self.curve(f"{joint}_torque", task, grid))


def check_bounds(spec: SyntheticGaitSpec) -> None:
    fine = np.linspace(0.0, 1.0, 1001)
    for task in spec.tasks:
        for name, ch in spec.channels.items():
            if ch.gain(task) <= 0:
                raise ParameterError(f"{name} gain non-positive at {task.label}")
            y = ch(task, fine)
            lo, hi = ch.bounds
            if y.min() < lo or y.max() > hi:
                raise ParameterError(f"{name} leaves physiological bounds [{lo}, {hi}] at {task.label}")


def generate_synthetic_corpus(spec: SyntheticGaitSpec) -> Corpus:
    """Noisy cycles of every task; white noise per sample and channel, seeded."""
    check_bounds(spec)
    rng = np.random.default_rng(spec.seed)
    grid = canonical_grid(spec.grid_size)
    trajs = []
    for task in spec.tasks:
        clean = {ch: spec.curve(ch, task, grid) for ch in CHANNELS}
        for cycle in range(spec.n_cycles):
            noisy = {}
            for ch in CHANNELS:
                sigma = spec.noise_sigma.get(ch, 0.0)
                noisy[ch] = clean[ch] + (rng.normal(0.0, sigma, grid.size) if sigma > 0 else 0.0)
            for joint in ("knee", "ankle"):
                trajs.append(GaitTrajectory(joint, task, cycle, grid, noisy[f"{joint}_angle"],
                                            noisy[f"{joint}_torque"]))
    return Corpus(trajs)


# --- sensor streams ---------------------------------------------------------

TOE_OFF = 0.60
FOOT_LEVER = 0.2  # m, centre-of-pressure travel scale
GRF_SCALE = 1.2


def grf_profile(phase, toe_off: float = TOE_OFF) -> np.ndarray:
    """Double-hump vertical GRF in body weights; exactly zero in swing."""
    phase = np.asarray(phase, float)
    s = np.clip(phase / toe_off, 0.0, 1.0)
    f = GRF_SCALE * (np.sin(math.pi * s) + 0.25 * np.sin(3.0 * math.pi * s))
    return np.where(phase < toe_off, f, 0.0)


@dataclass(frozen=True, eq=False)
class SensorStream:
    t: np.ndarray
    Fz: np.ndarray
    My: np.ndarray
    qk: np.ndarray
    qa: np.ndarray
    phase: np.ndarray  # within-cycle phase of every sample
    cycle: np.ndarray  # cycle ordinal of every sample
    tau_knee: np.ndarray  # reference torques, N m / kg
    tau_ankle: np.ndarray
    fs: float
    cadence: float
    body_weight: float
    se_phase: np.ndarray  # per-cycle phase where the sagittal moment changes sign
    cycles: tuple = ()

    def __len__(self):
        return self.t.size

    def samples(self):
        from .fsm import SensorSample

        for k in range(self.t.size):
            yield SensorSample(float(self.t[k]), float(self.Fz[k]), float(self.My[k]),
                               float(self.qk[k]), float(self.qa[k]))


def _stance_peak_phase(knee: GaitTrajectory, toe_off: float) -> float:
    mask = (knee.phase > 0.02) & (knee.phase < 0.5 * toe_off + 0.05)
    idx = np.flatnonzero(mask)
    return float(knee.phase[idx[np.argmax(knee.angle[idx])]])


def corpus_to_sensor_stream(cycles, cadence: float = 0.9, body_weight: float = 700.0,
                            fs: float = 100.0, toe_off: float = TOE_OFF) -> SensorStream:
    """Concatenate (knee, ankle) cycle pairs into a time stream with synthetic F_z and M_y.

    The sagittal moment is F_z times a centre-of-pressure lever that changes sign
    at the knee's stance-flexion peak, so stance extension starts there.
    """
    cycles = [tuple(c) for c in cycles]
    if not cycles:
        raise ParameterError("need at least one cycle to build a sensor stream")
    if not cadence > 0 or not fs > 0 or not body_weight > 0:
        raise ParameterError("cadence, fs and body_weight must be positive")
    for knee, ankle in cycles:
        if knee.joint != "knee" or ankle.joint != "ankle":
            raise ParameterError("cycles must be (knee, ankle) trajectory pairs")
    n = len(cycles)
    n_samples = int(round(n / cadence * fs)) + 1
    t = np.arange(n_samples) / fs
    g = t * cadence
    cyc = np.minimum(np.floor(g).astype(int), n - 1)
    phase = np.clip(g - cyc, 0.0, 1.0)
    se_phase = np.array([_stance_peak_phase(k, toe_off) for k, _ in cycles])
    qk = np.empty(n_samples)
    qa = np.empty(n_samples)
    tk = np.empty(n_samples)
    ta = np.empty(n_samples)
    for c, (knee, ankle) in enumerate(cycles):
        m = cyc == c
        qk[m] = np.interp(phase[m], knee.phase, knee.angle)
        tk[m] = np.interp(phase[m], knee.phase, knee.torque)
        qa[m] = np.interp(phase[m], ankle.phase, ankle.angle)
        ta[m] = np.interp(phase[m], ankle.phase, ankle.torque)
    Fz = body_weight * grf_profile(phase, toe_off)
    My = Fz * FOOT_LEVER * (phase - se_phase[cyc]) / toe_off
    return SensorStream(t, Fz, My, qk, qa, phase, cyc, tk, ta, float(fs), float(cadence),
                        float(body_weight), se_phase, tuple(cycles))


@dataclass(frozen=True)
class GaitEvent:
    cycle: int
    kind: str  # heel_strike, stance_extension, toe_off, swing_extension
    time: float
    sample: int  # first sample strictly after ``time``


def ground_truth_events(stream: SensorStream, thresholds) -> list[GaitEvent]:
    """Analytic threshold-crossing times of the generator's own signals.

    Continuous crossing times come from root finding on the noise-free
    profiles; ``sample`` is the first sample at which the sampled signal is
    past the threshold.
    """
    bw, to, cad, fs = stream.body_weight, TOE_OFF, stream.cadence, stream.fs
    events = []
    for c, (knee, _) in enumerate(stream.cycles):
        t0 = c / cad
        f_hs = lambda p: bw * grf_profile(p, to) - thresholds.Fz_hs  # noqa: E731
        f_to = lambda p: bw * grf_profile(p, to) - thresholds.Fz_to  # noqa: E731
        p_peak = 0.22 * to
        p_hs = brentq(f_hs, 0.0, p_peak, xtol=1e-14)
        p_to = brentq(f_to, 0.6 * to, to * (1 - 1e-12), xtol=1e-14)
        se = stream.se_phase[c]
        f_se = lambda p: (bw * grf_profile(p, to) * FOOT_LEVER * (p - se) / to  # noqa: E731
                          - thresholds.My_se)
        p_se = brentq(f_se, max(p_hs, 1e-9), min(p_to, to - 1e-9), xtol=1e-14)
        f_sw = lambda p: np.interp(p, knee.phase, knee.angle) - thresholds.qk_se  # noqa: E731
        swing = knee.phase >= to
        p_top = float(knee.phase[swing][np.argmax(knee.angle[swing])])
        p_sw = brentq(f_sw, to, p_top, xtol=1e-14) if f_sw(to) < 0 < f_sw(p_top) else float("nan")
        for kind, p in (("heel_strike", p_hs), ("stance_extension", p_se),
                        ("toe_off", p_to), ("swing_extension", p_sw)):
            time = t0 + p / cad
            sample = int(math.floor(time * fs + 1e-9)) + 1 if math.isfinite(time) else -1
            events.append(GaitEvent(c, kind, time, sample))
    return events
