"""Gait reference corpora: task labels, per-cycle joint trajectories, target features.

Angles are degrees and torques are mass-normalised (N m / kg) throughout. Phase
is a gait-cycle fraction in [0, 1]; the CSV schema stores it as a percentage.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.signal import find_peaks, peak_prominences

from .errors import DataError, FeatureExtractionError, ParameterError, ValidationError
from .persist import atomic_write_text

JOINTS = ("knee", "ankle")
GRID_SIZE = 101
MIN_GRID_SIZE = 16

CSV_COLUMNS = (
    "speed_mps",
    "incline_deg",
    "cycle_id",
    "phase_pct",
    "knee_angle_deg",
    "knee_torque_nmkg",
    "ankle_angle_deg",
    "ankle_torque_nmkg",
)


def canonical_grid(grid_size: int = GRID_SIZE) -> np.ndarray:
    return np.linspace(0.0, 1.0, grid_size)


@dataclass(frozen=True)
class TaskParams:
    """Locomotion task: walking speed (m/s), incline (deg), optional stair height (m)."""

    speed: float
    incline: float = 0.0
    stair_height: float | None = None

    def __post_init__(self):
        for name in ("speed", "incline"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValidationError(f"task {name} must be finite, got {value}")
        if self.speed <= 0:
            raise ValidationError(f"walking speed must be positive, got {self.speed}")
        if not -45.0 <= self.incline <= 45.0:
            raise ValidationError(f"incline {self.incline} deg outside [-45, 45]")
        if self.stair_height is not None and not math.isfinite(self.stair_height):
            raise ValidationError("stair_height must be finite or absent")

    def as_vector(self) -> np.ndarray:
        h = 0.0 if self.stair_height is None else self.stair_height
        return np.array([self.speed, self.incline, h], dtype=float)

    @property
    def label(self) -> str:
        text = f"v{self.speed:.3f}_i{self.incline:+.2f}"
        if self.stair_height is not None:
            text += f"_h{self.stair_height:.3f}"
        return text

    def to_dict(self) -> dict:
        out = {"speed": self.speed, "incline": self.incline}
        if self.stair_height is not None:
            out["stair_height"] = self.stair_height
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TaskParams":
        return cls(float(d["speed"]), float(d.get("incline", 0.0)),
                   None if d.get("stair_height") is None else float(d["stair_height"]))

    @classmethod
    def parse(cls, text: str) -> "TaskParams":
        """Parse ``"v=0.6,incline=5"``; ``speed``/``v``, ``incline``/``a``, ``h`` accepted."""
        aliases = {"v": "speed", "speed": "speed", "incline": "incline", "a": "incline",
                   "alpha": "incline", "h": "stair_height", "stair_height": "stair_height"}
        values: dict[str, float] = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, sep, raw = part.partition("=")
            if not sep or key.strip() not in aliases:
                raise ParameterError(f"cannot parse task component {part!r}")
            try:
                values[aliases[key.strip()]] = float(raw)
            except ValueError:
                raise ParameterError(f"task value {raw!r} is not a number") from None
        if "speed" not in values:
            raise ParameterError("task needs a speed, e.g. v=0.6")
        return cls(**values)


@dataclass(frozen=True, eq=False)
class GaitTrajectory:
    joint: str
    task: TaskParams
    cycle_id: int
    phase: np.ndarray
    angle: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        if self.joint not in JOINTS:
            raise ValidationError(f"unknown joint {self.joint!r}")
        for name in ("phase", "angle", "torque"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        phase = self.phase
        where = f"cycle {self.cycle_id} ({self.task.label}, {self.joint})"
        if phase.ndim != 1 or phase.size < 2:
            raise ValidationError(f"{where}: phase needs at least two samples")
        if self.angle.shape != phase.shape or self.torque.shape != phase.shape:
            raise ValidationError(f"{where}: angle/torque length differs from phase")
        if not (np.all(np.isfinite(phase)) and np.all(np.isfinite(self.angle))
                and np.all(np.isfinite(self.torque))):
            raise ValidationError(f"{where}: NaN or Inf sample")
        if np.any(np.diff(phase) <= 0):
            raise ValidationError(f"{where}: phase is not strictly increasing")
        if phase[0] != 0.0 or phase[-1] != 1.0:
            raise ValidationError(f"{where}: phase must span exactly [0, 1]")

    def __len__(self):
        return self.phase.size

    @property
    def key(self) -> tuple:
        return (self.task, self.cycle_id)

    def relation(self) -> "TorqueAngleRelation":
        return TorqueAngleRelation(self.joint, self.task, self.phase, self.angle, self.torque)


@dataclass(frozen=True, eq=False)
class TorqueAngleRelation:
    """A torque-angle loop, kept in gait-phase order (angle is not monotone)."""

    joint: str
    task: TaskParams
    phase: np.ndarray
    angle: np.ndarray
    torque: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.angle, self.torque])

    def __len__(self):
        return len(self.phase)


@dataclass(frozen=True)
class FeatureWindow:
    kind: str  # "angle" or "torque"
    polarity: str  # "max" or "min"
    lo: float
    hi: float

    def __post_init__(self):
        if self.kind not in ("angle", "torque") or self.polarity not in ("max", "min"):
            raise ParameterError(f"bad feature window {self}")
        if not 0.0 <= self.lo < self.hi <= 1.0:
            raise ParameterError(f"feature window [{self.lo}, {self.hi}] not inside [0, 1]")

    @property
    def name(self) -> str:
        return f"{self.kind}_{self.polarity}[{self.lo:.2f},{self.hi:.2f}]"


@dataclass(frozen=True)
class FeatureSpec:
    """Per-joint ordered feature windows (K entries per joint)."""

    windows: dict

    def for_joint(self, joint: str) -> tuple[FeatureWindow, ...]:
        try:
            return self.windows[joint]
        except KeyError:
            raise ParameterError(f"feature spec has no windows for joint {joint!r}") from None

    def to_dict(self) -> dict:
        return {j: [{"kind": w.kind, "polarity": w.polarity, "window": [w.lo, w.hi]} for w in ws]
                for j, ws in self.windows.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        windows = {}
        for joint, entries in d.items():
            ws = tuple(FeatureWindow(e["kind"], e["polarity"], float(e["window"][0]),
                                     float(e["window"][1])) for e in entries)
            windows[joint] = tuple(sorted(ws, key=lambda w: (w.lo, w.hi)))
        return cls(windows)

    @classmethod
    def default(cls) -> "FeatureSpec":
        text = resources.files("quasistiff").joinpath("data/feature_windows.json").read_text()
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Feature:
    kind: str
    polarity: str
    phase: float
    value: float
    index: int = 0  # position of the originating window in the joint's spec


@dataclass(frozen=True)
class TargetFeatureSet:
    joint: str
    task: TaskParams
    features: tuple[Feature, ...]
    warnings: tuple[str, ...] = ()

    def __len__(self):
        return len(self.features)

    @property
    def values(self) -> np.ndarray:
        return np.array([f.value for f in self.features])

    @property
    def phases(self) -> np.ndarray:
        return np.array([f.phase for f in self.features])


class Corpus:
    """An immutable collection of gait trajectories grouped by task and cycle."""

    def __init__(self, trajectories: Iterable[GaitTrajectory] = ()):
        self._trajs = tuple(trajectories)

    def __len__(self):
        return len(self._trajs)

    def __iter__(self) -> Iterator[GaitTrajectory]:
        return iter(self._trajs)

    def __bool__(self):
        return bool(self._trajs)

    @property
    def joints(self) -> tuple[str, ...]:
        present = {t.joint for t in self._trajs}
        return tuple(j for j in JOINTS if j in present)

    def tasks(self) -> list[TaskParams]:
        seen = dict.fromkeys(t.task for t in self._trajs)
        return sorted(seen, key=lambda t: (t.speed, t.incline, t.stair_height or 0.0))

    def cycle_keys(self) -> list[tuple]:
        seen = dict.fromkeys(t.key for t in self._trajs)
        return sorted(seen, key=lambda k: (k[0].speed, k[0].incline, k[0].stair_height or 0.0, k[1]))

    def joint(self, joint: str) -> list[GaitTrajectory]:
        return [t for t in self._trajs if t.joint == joint]

    def for_task(self, task: TaskParams, joint: str | None = None) -> list[GaitTrajectory]:
        return [t for t in self._trajs if t.task == task and (joint is None or t.joint == joint)]

    def by_task(self, joint: str) -> dict[TaskParams, list[GaitTrajectory]]:
        out: dict[TaskParams, list[GaitTrajectory]] = {task: [] for task in self.tasks()}
        for t in self._trajs:
            if t.joint == joint:
                out[t.task].append(t)
        return {k: v for k, v in out.items() if v}

    def select(self, keep) -> "Corpus":
        """Sub-corpus of trajectories for which ``keep(traj)`` is true."""
        return Corpus(t for t in self._trajs if keep(t))

    def with_tasks(self, tasks: Iterable[TaskParams]) -> "Corpus":
        wanted = set(tasks)
        return self.select(lambda t: t.task in wanted)

    def cycle_counts(self) -> dict[TaskParams, int]:
        counts: dict[TaskParams, int] = {}
        for task, _ in self.cycle_keys():
            counts[task] = counts.get(task, 0) + 1
        return counts


@dataclass
class ColumnMap:
    """Maps the canonical fields onto CSV column names and declares units."""

    speed: str = "speed_mps"
    incline: str = "incline_deg"
    cycle_id: str = "cycle_id"
    phase: str = "phase_pct"
    angle: dict = field(default_factory=lambda: {"knee": "knee_angle_deg", "ankle": "ankle_angle_deg"})
    torque: dict = field(default_factory=lambda: {"knee": "knee_torque_nmkg", "ankle": "ankle_torque_nmkg"})
    stair_height: str | None = None
    phase_unit: str = "pct"  # "pct" or "fraction"
    angle_unit: str = "deg"  # "deg" or "rad"
    torque_unit: str = "nmkg"  # "nmkg" or "nm" (needs body_mass)
    body_mass: float | None = None

    def phase_scale(self) -> float:
        return {"pct": 0.01, "fraction": 1.0}[self.phase_unit]

    def angle_scale(self) -> float:
        return {"deg": 1.0, "rad": 180.0 / math.pi}[self.angle_unit]

    def torque_scale(self) -> float:
        if self.torque_unit == "nmkg":
            return 1.0
        if self.torque_unit == "nm" and self.body_mass:
            return 1.0 / self.body_mass
        raise ParameterError("torque_unit 'nm' requires body_mass")


def ingest_corpus(path, schema: ColumnMap | None = None) -> Corpus:
    """Read and validate a gait corpus CSV (one row per task, cycle and phase sample)."""
    schema = schema or ColumnMap()
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus file {path} does not exist")
    scales = (schema.phase_scale(), schema.angle_scale(), schema.torque_scale())
    rows: dict[tuple, list] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            raise DataError(f"{path}: empty file (header row required)")
        needed = [schema.speed, schema.incline, schema.cycle_id, schema.phase]
        joints = [j for j in JOINTS if schema.angle.get(j) in reader.fieldnames]
        if not joints:
            raise DataError(f"{path}: no joint angle columns found")
        for j in joints:
            needed += [schema.angle[j], schema.torque[j]]
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for idx, row in enumerate(reader, start=1):
            try:
                speed = float(row[schema.speed])
                incline = float(row[schema.incline])
                h = None
                if schema.stair_height and row.get(schema.stair_height, "") != "":
                    h = float(row[schema.stair_height])
                cycle_raw = float(row[schema.cycle_id])
                if cycle_raw != int(cycle_raw):
                    raise ValueError("cycle_id must be an integer")
                phase = float(row[schema.phase]) * scales[0]
                vals = [(float(row[schema.angle[j]]) * scales[1],
                         float(row[schema.torque[j]]) * scales[2]) for j in joints]
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: malformed row {idx}: {exc}") from None
            if not all(math.isfinite(x) for x in (speed, incline, phase, *sum(vals, ()))):
                raise DataError(f"{path}: malformed row {idx}: non-finite value")
            try:
                task = TaskParams(speed, incline, h)
            except ValidationError as exc:
                raise DataError(f"{path}: malformed row {idx}: {exc}") from None
            rows.setdefault((task, int(cycle_raw)), []).append((phase, vals))
    if not rows:
        raise DataError(f"{path}: no data rows")
    trajs = []
    for (task, cycle_id), samples in rows.items():
        phase = np.array([s[0] for s in samples])
        for k, joint in enumerate(joints):
            angle = np.array([s[1][k][0] for s in samples])
            torque = np.array([s[1][k][1] for s in samples])
            trajs.append(GaitTrajectory(joint, task, cycle_id, phase, angle, torque))
    return Corpus(trajs)


def _fmt(x: float) -> str:
    return repr(float(x))


def corpus_csv_text(corpus: Corpus) -> str:
    """The corpus in the ingestion CSV schema (all joints of a cycle share phase)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for task, cycle_id in corpus.cycle_keys():
        by_joint = {t.joint: t for t in corpus.for_task(task) if t.cycle_id == cycle_id}
        phase = next(iter(by_joint.values())).phase
        for m, p in enumerate(phase):
            row = [_fmt(task.speed), _fmt(task.incline), str(cycle_id), _fmt(p * 100.0)]
            for joint in JOINTS:
                t = by_joint.get(joint)
                row += ["nan", "nan"] if t is None else [_fmt(t.angle[m]), _fmt(t.torque[m])]
            writer.writerow(row)
    return buf.getvalue()


def write_corpus_csv(corpus: Corpus, path) -> None:
    atomic_write_text(path, corpus_csv_text(corpus))


def write_corpus_dir(corpus: Corpus, directory) -> dict:
    """Persist as one CSV per task plus ``manifest.json``; returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counts = corpus.cycle_counts()
    sizes = {len(t) for t in corpus}
    entries = []
    for task in corpus.tasks():
        fname = f"task_{task.label}.csv"
        write_corpus_csv(corpus.with_tasks([task]), directory / fname)
        entries.append({"task": task.to_dict(), "file": fname, "cycles": counts[task]})
    manifest = {
        "format": "quasistiff.corpus",
        "version": 1,
        "joints": list(corpus.joints),
        "grid_size": sizes.pop() if len(sizes) == 1 else None,
        "tasks": entries,
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_corpus_dir(directory) -> Corpus:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"{directory} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    trajs: list[GaitTrajectory] = []
    for entry in manifest["tasks"]:
        trajs.extend(ingest_corpus(directory / entry["file"]))
    return Corpus(trajs)


def resample_cycle(traj: GaitTrajectory, grid_size: int = GRID_SIZE) -> GaitTrajectory:
    """Linearly interpolate onto a uniform phase grid of ``grid_size`` points."""
    if grid_size < MIN_GRID_SIZE:
        raise ParameterError(f"grid_size must be >= {MIN_GRID_SIZE}, got {grid_size}")
    grid = canonical_grid(grid_size)
    angle = np.interp(grid, traj.phase, traj.angle)
    torque = np.interp(grid, traj.phase, traj.torque)
    return replace(traj, phase=grid, angle=angle, torque=torque)


def resample_corpus(corpus: Corpus, grid_size: int = GRID_SIZE) -> Corpus:
    return Corpus(resample_cycle(t, grid_size) for t in corpus)


def mean_cycle(trajs: Sequence[GaitTrajectory], grid_size: int = GRID_SIZE) -> GaitTrajectory:
    """Average several cycles of one joint and task on the canonical grid."""
    if not trajs:
        raise DataError("cannot average an empty set of cycles")
    first = trajs[0]
    if any(t.joint != first.joint or t.task != first.task for t in trajs):
        raise DataError("mean_cycle needs cycles of a single joint and task")
    rs = [resample_cycle(t, grid_size) for t in trajs]
    return GaitTrajectory(first.joint, first.task, -1, rs[0].phase,
                          np.mean([r.angle for r in rs], axis=0),
                          np.mean([r.torque for r in rs], axis=0))


def task_means(corpus: Corpus, joint: str, grid_size: int = GRID_SIZE) -> dict[TaskParams, GaitTrajectory]:
    return {task: mean_cycle(trajs, grid_size) for task, trajs in corpus.by_task(joint).items()}


def _is_uniform(phase: np.ndarray) -> bool:
    return np.allclose(np.diff(phase), 1.0 / (phase.size - 1), rtol=1e-9, atol=1e-12)


def extract_target_features(traj: GaitTrajectory, spec: FeatureSpec | Sequence[FeatureWindow]
                            ) -> TargetFeatureSet:
    """Pick, per window, the most prominent local extremum of the declared kind.

    Ties in prominence go to the earliest phase.
    """
    if not _is_uniform(traj.phase):
        raise ParameterError("extract_target_features needs a uniformly resampled trajectory")
    windows = spec.for_joint(traj.joint) if isinstance(spec, FeatureSpec) else tuple(spec)
    feats = []
    for kappa, w in enumerate(windows):
        signal = traj.angle if w.kind == "angle" else traj.torque
        s = signal if w.polarity == "max" else -signal
        peaks, _ = find_peaks(s)
        inside = peaks[(traj.phase[peaks] >= w.lo) & (traj.phase[peaks] <= w.hi)]
        if inside.size == 0:
            err = FeatureExtractionError(
                f"{traj.joint} ({traj.task.label}): no local {w.polarity} of {w.kind} in window "
                f"[{w.lo}, {w.hi}]")
            err.window_index = kappa
            raise err
        prom = peak_prominences(s, inside)[0]
        best = inside[np.flatnonzero(prom == prom.max())[0]]
        feats.append(Feature(w.kind, w.polarity, float(traj.phase[best]), float(signal[best]), kappa))
    feats.sort(key=lambda f: f.phase)
    return TargetFeatureSet(traj.joint, traj.task, tuple(feats))


def task_features(corpus: Corpus, spec: FeatureSpec, joint: str,
                  grid_size: int = GRID_SIZE) -> dict[TaskParams, TargetFeatureSet]:
    """Target features of every task's mean cycle."""
    return {task: extract_target_features(m, spec) for task, m in task_means(corpus, joint, grid_size).items()}


def split_corpus(corpus: Corpus, fraction: float, seed: int, unit: str = "cycle"
                 ) -> tuple[Corpus, Corpus]:
    """Deterministic train/test split by task-cycle (``unit="cycle"``) or by whole task."""
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"split fraction must lie in (0, 1), got {fraction}")
    if unit == "cycle":
        units = corpus.cycle_keys()
        key = lambda t: t.key  # noqa: E731
    elif unit == "task":
        units = corpus.tasks()
        key = lambda t: t.task  # noqa: E731
    else:
        raise ParameterError(f"unknown split unit {unit!r}")
    if len(units) < 2:
        raise DataError(f"cannot split a corpus with a single {unit}")
    n_train = min(max(int(round(fraction * len(units))), 1), len(units) - 1)
    order = np.random.default_rng(seed).permutation(len(units))
    train_units = {units[i] for i in order[:n_train]}
    return (corpus.select(lambda t: key(t) in train_units),
            corpus.select(lambda t: key(t) not in train_units))
