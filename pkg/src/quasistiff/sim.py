"""End-to-end evaluation on held-out tasks and the RMSE report."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import PipelineConfig
from .errors import ParameterError, QuasiStiffError
from .fsm import FsmThresholds, make_controller, run_stream, swing_threshold
from .gait_data import Corpus, FeatureSpec, GaitTrajectory, TaskParams, extract_target_features, task_means
from .gmm import build_reference_distribution
from .gpr import gpr_fit_feature_bank
from .kmp import phase_kernel, reconstruct
from .persist import dumps
from .stiffness import SegmentationSpec, build_joint_tables, default_segmentation
from .synthetic import SyntheticGaitSpec, corpus_to_sensor_stream, ground_truth_events

Truth = Callable[[TaskParams, str], GaitTrajectory]

METRICS = (
    "feature_rmse_angle",
    "feature_rmse_torque",
    "feature_rmse_phase",
    "relation_rmse_angle",
    "relation_rmse_torque",
    "torque_range",
    "relation_rmse_torque_pct",
    "kinematics_rmse",
    "kinetics_rmse",
    "peak_torque_pred",
    "peak_torque_true",
    "n_transitions",
    "expected_transitions",
    "max_event_error_samples",
)


def rmse(a, b) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ParameterError(f"rmse: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return math.nan
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class TaskMetrics:
    task: TaskParams
    joint: str
    values: dict

    def __getitem__(self, key):
        return self.values[key]


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[TaskMetrics, ...]
    tasks: tuple[TaskParams, ...]
    config: dict = field(default_factory=dict)
    runtimes: dict = field(default_factory=dict)  # seconds per stage; excluded from to_json
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        for r in self.rows:
            for k, v in r.values.items():
                if k.endswith("rmse") or "rmse_" in k:
                    if not (v >= 0 or math.isnan(v)):
                        raise ParameterError(f"negative RMSE {k}={v}")
        have = {r.task for r in self.rows}
        missing = [t.label for t in self.tasks if t not in have]
        if missing:
            raise ParameterError(f"report lacks tasks {missing}")

    def row(self, task: TaskParams, joint: str) -> TaskMetrics:
        return next(r for r in self.rows if r.task == task and r.joint == joint)

    def column(self, key: str, joint: str) -> np.ndarray:
        return np.array([self.row(t, joint)[key] for t in self.tasks], float)

    def summary(self) -> dict:
        out = {}
        for joint in sorted({r.joint for r in self.rows}):
            for key in ("feature_rmse_angle", "feature_rmse_torque", "relation_rmse_torque_pct",
                        "kinematics_rmse", "kinetics_rmse"):
                col = self.column(key, joint)
                out[f"{joint}.{key}.mean"] = float(np.mean(col))
                out[f"{joint}.{key}.max"] = float(np.max(col))
        return out

    def to_json(self) -> str:
        doc = {
            "format": "quasistiff.eval_report",
            "tasks": [t.to_dict() for t in self.tasks],
            "rows": [{"task": r.task.to_dict(), "joint": r.joint, **r.values} for r in self.rows],
            "summary": self.summary(),
            "config": self.config,
            "notes": list(self.notes),
        }
        return dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        rows = tuple(TaskMetrics(TaskParams.from_dict(r["task"]), r["joint"],
                                 {k: r[k] for k in METRICS if k in r}) for r in doc["rows"])
        return cls(rows, tuple(TaskParams.from_dict(t) for t in doc["tasks"]), doc.get("config", {}),
                   {}, tuple(doc.get("notes", ())))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["speed_mps", "incline_deg", "stair_height_m", "joint", *METRICS])
        for r in self.rows:
            h = "" if r.task.stair_height is None else repr(r.task.stair_height)
            w.writerow([repr(r.task.speed), repr(r.task.incline), h, r.joint,
                        *(repr(float(r.values[k])) for k in METRICS)])
        return buf.getvalue()

    @classmethod
    def concat(cls, reports: Sequence["EvalReport"]) -> "EvalReport":
        rows = tuple(r for rep in reports for r in rep.rows)
        tasks = tuple(t for rep in reports for t in rep.tasks)
        runtimes: dict = {}
        for rep in reports:
            for k, v in rep.runtimes.items():
                runtimes[k] = runtimes.get(k, 0.0) + v
        notes = tuple(n for rep in reports for n in rep.notes)
        return cls(rows, tasks, reports[0].config if reports else {}, runtimes, notes)


@contextlib.contextmanager
def _stage(name: str, runtimes: dict):
    t0 = time.perf_counter()
    try:
        yield
    except QuasiStiffError as exc:
        exc.stage = name
        exc.args = (f"[{name}] {exc}",)
        raise
    finally:
        runtimes[name] = runtimes.get(name, 0.0) + time.perf_counter() - t0


def _cycle_pairs(corpus: Corpus, task: TaskParams) -> list[tuple[GaitTrajectory, GaitTrajectory]]:
    knee = {t.cycle_id: t for t in corpus.for_task(task, "knee")}
    ankle = {t.cycle_id: t for t in corpus.for_task(task, "ankle")}
    return [(knee[c], ankle[c]) for c in sorted(set(knee) & set(ankle))]


def feature_spec_from_config(cfg: PipelineConfig) -> FeatureSpec:
    if cfg.feature_spec is None:
        return FeatureSpec.default()
    return FeatureSpec.from_dict(json.loads(open(cfg.feature_spec, encoding="utf-8").read()))


def fit_models(train: Corpus, cfg: PipelineConfig, runtimes: dict | None = None,
               joints: Sequence[str] = ("knee", "ankle")) -> dict:
    """Feature banks and reference distributions for every joint."""
    runtimes = {} if runtimes is None else runtimes
    spec = feature_spec_from_config(cfg)
    g = cfg.gmm
    out = {}
    for joint in joints:
        with _stage("gpr", runtimes):
            bank = gpr_fit_feature_bank(train, spec, joint, cfg.grid_size,
                                        length_grid=cfg.gpr.length_grid, noise_grid=cfg.gpr.noise_grid)
        with _stage("gmm", runtimes):
            ref = build_reference_distribution(train, joint, g.n_components, g.seed, cfg.grid_size,
                                               cov_floor=g.cov_floor, L_range=range(g.L_min, g.L_max + 1),
                                               max_iter=g.max_iter, tol=g.tol)
        out[joint] = (bank, ref)
    return out


def segmentation_for(knee_relation, cfg: PipelineConfig) -> SegmentationSpec:
    if cfg.segmentation.boundaries is not None:
        return SegmentationSpec(tuple(cfg.segmentation.boundaries))
    return default_segmentation(knee_relation, cfg.segmentation.toe_off)


def thresholds_for(knee_relation, cfg: PipelineConfig) -> FsmThresholds:
    f = cfg.fsm
    qk_se = swing_threshold(knee_relation.angle, knee_relation.phase, cfg.segmentation.toe_off, f.swing_margin)
    return FsmThresholds.from_body_weight(f.body_weight, qk_se, f.My_se, f.hs_fraction, f.to_fraction,
                                          debounce_samples=f.debounce_samples, blend_window=f.blend_window)


def evaluate_pipeline(train: Corpus, test: Corpus, config: PipelineConfig | None = None,
                      truth: Truth | None = None, resubstitution: bool = False,
                      models: dict | None = None) -> EvalReport:
    """Run the full chain for every test task and score it against ground truth.

    ``truth(task, joint)`` supplies a noise-free reference cycle; without it the
    test corpus's per-task mean cycle is the reference.
    """
    cfg = config or PipelineConfig()
    if not resubstitution and set(train.cycle_keys()) & set(test.cycle_keys()):
        raise ParameterError("train and test corpora share cycles (pass resubstitution=True to allow)")
    if not test:
        raise ParameterError("empty test corpus")
    runtimes: dict = {}
    models = models or fit_models(train, cfg, runtimes)
    spec = feature_spec_from_config(cfg)
    kernel = phase_kernel(cfg.kmp.length_scale)
    means = {j: task_means(test, j, cfg.grid_size) for j in models}
    rows, notes = [], []
    for task in test.tasks():
        recs, refs = {}, {}
        for joint, (bank, ref) in models.items():
            with _stage("kmp", runtimes), warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                recs[joint] = reconstruct(bank, ref, task, kernel, cfg.kmp.lam, cfg.kmp.via_eps, cfg.grid_size)
            notes.extend(str(w.message) for w in caught)
            refs[joint] = truth(task, joint) if truth is not None else means[joint][task]
        with _stage("stiffness", runtimes), warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            seg = segmentation_for(recs["knee"].relation, cfg)
            tables = build_joint_tables([r.relation for r in recs.values()], seg,
                                        {"task": task.label})
        notes.extend(str(w.message) for w in caught)
        with _stage("fsm", runtimes):
            th = thresholds_for(recs["knee"].relation, cfg)
            stream = corpus_to_sensor_stream(_cycle_pairs(test, task), cfg.fsm.cadence,
                                             cfg.fsm.body_weight, cfg.fsm.fs, cfg.segmentation.toe_off)
            log = run_stream(make_controller(tables), stream.samples(), th)
            events = ground_truth_events(stream, th)
            n_expected = sum(1 for e in events if e.sample >= 0)
            errs = _event_errors(log.transitions, events)
        for joint, rec in recs.items():
            ref_traj = refs[joint]
            rel = rec.relation
            f_true = extract_target_features(ref_traj, spec.for_joint(joint))
            pred = {f.index: f for f in rec.features.features}
            tru = {f.index: f for f in f_true.features}
            ang = [i for i in tru if tru[i].kind == "angle"]
            tq = [i for i in tru if tru[i].kind == "torque"]
            t_ref = np.interp(rel.phase, ref_traj.phase, ref_traj.torque)
            a_ref = np.interp(rel.phase, ref_traj.phase, ref_traj.angle)
            trange = float(np.ptp(t_ref))
            tau_ref = _reference_torque(stream, joint, truth, task, ref_traj)
            vals = {
                "feature_rmse_angle": rmse([pred[i].value for i in ang], [tru[i].value for i in ang]),
                "feature_rmse_torque": rmse([pred[i].value for i in tq], [tru[i].value for i in tq]),
                "feature_rmse_phase": rmse([pred[i].phase for i in tru], [tru[i].phase for i in tru]),
                "relation_rmse_angle": rmse(rel.angle, a_ref),
                "relation_rmse_torque": rmse(rel.torque, t_ref),
                "torque_range": trange,
                "relation_rmse_torque_pct": 100.0 * rmse(rel.torque, t_ref) / trange if trange > 0 else math.nan,
                "kinematics_rmse": rmse(rel.angle, a_ref),
                "kinetics_rmse": rmse(log.commands[joint], tau_ref),
                "peak_torque_pred": float(np.max(rel.torque)),
                "peak_torque_true": float(np.max(t_ref)),
                "n_transitions": float(len(log.transitions)),
                "expected_transitions": float(n_expected),
                "max_event_error_samples": errs,
            }
            rows.append(TaskMetrics(task, joint, vals))
    return EvalReport(tuple(rows), tuple(test.tasks()), {**cfg.to_dict(), "output_dir": None}, runtimes, tuple(notes))


def _reference_torque(stream, joint, truth, task, ref_traj) -> np.ndarray:
    if truth is None:
        return stream.tau_knee if joint == "knee" else stream.tau_ankle
    return np.interp(stream.phase, ref_traj.phase, ref_traj.torque)


def _event_errors(transitions, events) -> float:
    """Largest |sample offset| between matched transitions and ground-truth events."""
    kinds = {"stance_flexion": "heel_strike", "stance_extension": "stance_extension",
             "swing_flexion": "toe_off", "swing_extension": "swing_extension"}
    pool = {}
    for e in events:
        if e.sample >= 0:
            pool.setdefault(e.kind, []).append(e.sample)
    worst = 0
    for tr in transitions:
        cands = pool.get(kinds[tr.target.value], [])
        if not cands:
            return math.inf
        worst = max(worst, min(abs(tr.sample - c) for c in cands))
    return float(worst)


# --- experiment helpers ----------------------------------------------------

def synthetic_spec(cfg: PipelineConfig, tasks: Sequence[TaskParams] | None = None) -> SyntheticGaitSpec:
    s = cfg.synth
    if tasks is None:
        tasks = [TaskParams(float(v), float(a)) for a in s.inclines for v in s.speeds]
    return SyntheticGaitSpec(tuple(tasks), s.n_cycles, dict(s.noise_sigma), s.seed, cfg.grid_size,
                             cfg.fsm.cadence)


def leave_one_task_out(corpus: Corpus, cfg: PipelineConfig | None = None, truth: Truth | None = None,
                       tasks: Sequence[TaskParams] | None = None) -> EvalReport:
    """Hold out each task in turn, training on the rest."""
    cfg = cfg or PipelineConfig()
    reports = []
    for held in tasks or corpus.tasks():
        train = corpus.select(lambda t, h=held: t.task != h)
        test = corpus.with_tasks([held])
        reports.append(evaluate_pipeline(train, test, cfg, truth))
    return EvalReport.concat(reports)


def spearman(x, y) -> float:
    """Spearman rank correlation; without ties the integer rank formula keeps +-1 exact."""
    from scipy.stats import rankdata, spearmanr

    rx, ry = rankdata(x), rankdata(y)
    n = len(rx)
    if len(set(rx)) < n or len(set(ry)) < n:
        return float(spearmanr(x, y)[0])
    d2 = int(np.sum((rx - ry) ** 2))
    return 1.0 - 6.0 * d2 / (n * (n * n - 1))
