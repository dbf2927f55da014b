"""Command-line pipeline: one subcommand per stage, artifacts under one output root.

Layout of the output root::

    corpus/                  ingest, synth       per-task CSVs + manifest.json
    synth.json               synth               generator description (ground truth)
    features/                extract-features    features.json, features.csv
    models/                  train               feature banks, reference distributions
    reconstruct/<task>/      reconstruct         relation CSV, via-points, SVG
    stiffness/<task>/        stiffness           controller.json, tables CSV, SVG
    simulate/<task>/         simulate            stream, trace and transitions CSVs
    evaluation/              evaluate            report.json, report.csv, SVG

Every stage writes ``config.json`` (the resolved configuration, including the
model-format version) next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .config import PipelineConfig, load_config
from .errors import DataError, MissingArtifactError, ParameterError, QuasiStiffError
from .fsm import FsmThresholds, make_controller, read_stream_csv, run_stream, samples_from_arrays, write_stream_csv
from .gait_data import (
    ColumnMap,
    Corpus,
    TaskParams,
    ingest_corpus,
    read_corpus_dir,
    resample_corpus,
    split_corpus,
    task_features,
    write_corpus_dir,
)
from .gmm import ReferenceDistribution
from .gpr import FeatureBank
from .kmp import phase_kernel, reconstruct
from .persist import FORMAT_VERSION, atomic_write_text, dumps, load_model, save_model
from .sim import (
    evaluate_pipeline,
    feature_spec_from_config,
    fit_models,
    segmentation_for,
    synthetic_spec,
    thresholds_for,
)
from .stiffness import build_joint_tables, load_tables, save_tables
from .synthetic import SyntheticGaitSpec, corpus_to_sensor_stream, generate_synthetic_corpus

log = logging.getLogger("quasistiff")

JOINTS = ("knee", "ankle")


# --- helpers ---------------------------------------------------------------

def _write_config(directory: Path, cfg: PipelineConfig, extra: dict | None = None) -> None:
    doc = cfg.to_dict()
    doc["package_version"] = __version__
    doc["model_format_version"] = FORMAT_VERSION
    if extra:
        doc["run"] = extra
    atomic_write_text(directory / "config.json", dumps(doc))


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, producer)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_corpus(root: Path) -> Corpus:
    return read_corpus_dir(_require(root / "corpus" / "manifest.json", ("synth", "ingest")).parent)


def _truth(root: Path):
    path = root / "synth.json"
    if not path.exists():
        return None
    doc = load_model(path, "synth")
    spec = SyntheticGaitSpec(tuple(TaskParams.from_dict(t) for t in doc["tasks"]), doc["n_cycles"],
                             doc["noise_sigma"], doc["seed"], doc["grid_size"], doc["cadence"])
    return spec.truth


def _task_dir(task: TaskParams) -> str:
    return task.label


def _load_models(root: Path):
    models = {}
    for joint in JOINTS:
        bank_path = root / "models" / f"feature_bank_{joint}.json"
        ref_path = root / "models" / f"reference_{joint}.json"
        if not bank_path.exists() and not ref_path.exists():
            continue
        bank = FeatureBank.from_dict(load_model(_require(bank_path, "train"), "feature_bank")["bank"])
        ref = ReferenceDistribution.from_dict(load_model(_require(ref_path, "train"), "reference")["reference"])
        models[joint] = (bank, ref)
    if not models:
        raise MissingArtifactError(root / "models", "train")
    return models


# --- subcommands -----------------------------------------------------------

def cmd_synth(args, cfg: PipelineConfig, root: Path) -> int:
    spec = synthetic_spec(cfg)
    corpus = generate_synthetic_corpus(spec)
    write_corpus_dir(corpus, root / "corpus")
    save_model(root / "synth.json", "synth", {
        "tasks": [t.to_dict() for t in spec.tasks], "n_cycles": spec.n_cycles,
        "noise_sigma": dict(spec.noise_sigma), "seed": spec.seed, "grid_size": spec.grid_size,
        "cadence": spec.cadence,
    })
    _write_config(root / "corpus", cfg, {"command": "synth"})
    print(f"synthetic corpus: {len(spec.tasks)} tasks x {spec.n_cycles} cycles -> {root / 'corpus'}")
    return 0


def cmd_ingest(args, cfg: PipelineConfig, root: Path) -> int:
    src = args.corpus or cfg.corpus
    if not src:
        raise ParameterError("ingest needs --corpus PATH (or corpus in the config)")
    schema = ColumnMap()
    if args.schema:
        try:
            schema = ColumnMap(**json.loads(Path(args.schema).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ParameterError(f"bad schema file {args.schema}: {exc}") from None
    corpus = resample_corpus(ingest_corpus(src, schema), cfg.grid_size)
    counts = corpus.cycle_counts()
    write_corpus_dir(corpus, root / "corpus")
    _write_config(root / "corpus", cfg, {"command": "ingest", "source": str(src)})
    for task, n in counts.items():
        print(f"{task.label}: {n} cycles")
    return 0


def cmd_extract_features(args, cfg: PipelineConfig, root: Path) -> int:
    corpus = _load_corpus(root)
    spec = feature_spec_from_config(cfg)
    out_dir = root / "features"
    doc, lines = {"tasks": []}, ["speed_mps,incline_deg,joint,index,kind,polarity,phase,value"]
    for joint in corpus.joints:
        for task, fs in task_features(corpus, spec, joint, cfg.grid_size).items():
            doc["tasks"].append({"task": task.to_dict(), "joint": joint, "features": [
                {"index": f.index, "kind": f.kind, "polarity": f.polarity, "phase": f.phase, "value": f.value}
                for f in fs.features]})
            for f in fs.features:
                lines.append(",".join([repr(task.speed), repr(task.incline), joint, str(f.index), f.kind,
                                       f.polarity, repr(f.phase), repr(f.value)]))
    save_model(out_dir / "features.json", "features", doc)
    atomic_write_text(out_dir / "features.csv", "\n".join(lines) + "\n")
    _write_config(out_dir, cfg, {"command": "extract-features"})
    print(f"features for {len(doc['tasks'])} task/joint pairs -> {out_dir}")
    return 0


def cmd_train(args, cfg: PipelineConfig, root: Path) -> int:
    corpus = _load_corpus(root)
    if args.exclude_task:
        drop = {TaskParams.parse(t) for t in args.exclude_task}
        corpus = corpus.select(lambda t: t.task not in drop)
        if not corpus:
            raise DataError("every task was excluded from training")
    out_dir = root / "models"
    models = fit_models(corpus, cfg, joints=corpus.joints)
    for joint, (bank, ref) in models.items():
        save_model(out_dir / f"feature_bank_{joint}.json", "feature_bank", {"bank": bank.to_dict()})
        save_model(out_dir / f"reference_{joint}.json", "reference", {"reference": ref.to_dict()})
        print(f"{joint}: {len(bank)} feature GPs, reference over {len(ref)} phases")
    _write_config(out_dir, cfg, {"command": "train", "tasks": [t.label for t in corpus.tasks()]})
    return 0


def _reconstruct_task(cfg, root, task):
    models = _load_models(root)
    out, notes = {}, []
    for joint, (bank, ref) in models.items():
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out[joint] = reconstruct(bank, ref, task, phase_kernel(cfg.kmp.length_scale), cfg.kmp.lam,
                                     cfg.kmp.via_eps, cfg.grid_size)
        notes.extend(str(w.message) for w in caught)
    return models, out, notes


def _relation_csv(rel, pred) -> str:
    lines = ["phase,angle_deg,torque_nmkg,angle_var,torque_var,cov"]
    for i in range(len(rel)):
        c = pred.cov[i]
        lines.append(",".join(repr(float(x)) for x in (rel.phase[i], rel.angle[i], rel.torque[i],
                                                       c[0, 0], c[1, 1], c[0, 1])))
    return "\n".join(lines) + "\n"


def cmd_reconstruct(args, cfg: PipelineConfig, root: Path) -> int:
    from .plots import plot_reconstruction

    task = TaskParams.parse(args.task)
    models, recs, notes = _reconstruct_task(cfg, root, task)
    out_dir = root / "reconstruct" / _task_dir(task)
    truth = _truth(root)
    for joint, rec in recs.items():
        atomic_write_text(out_dir / f"relation_{joint}.csv", _relation_csv(rec.relation, rec.prediction))
        save_model(out_dir / f"vias_{joint}.json", "vias", {
            "task": task.to_dict(), "joint": joint,
            "features": [{"index": f.index, "kind": f.kind, "phase": f.phase, "value": f.value}
                         for f in rec.features.features],
            "vias": [{"index": v.index, "mean": v.mean, "cov": v.cov} for v in rec.vias],
        })
        if not args.no_plots:
            plot_reconstruction(out_dir / f"reconstruction_{joint}.svg", models[joint][1], rec,
                                truth(task, joint) if truth else None)
    for note in notes:
        log.warning(note)
    _write_config(out_dir, cfg, {"command": "reconstruct", "task": task.to_dict(), "notes": notes})
    print(f"reconstructed {', '.join(recs)} for {task.label} -> {out_dir}")
    return 0


def _read_relation(path: Path, joint: str, task: TaskParams):
    import numpy as np

    from .gait_data import TorqueAngleRelation

    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return TorqueAngleRelation(joint, task, data[:, 0], data[:, 1], data[:, 2])


def cmd_stiffness(args, cfg: PipelineConfig, root: Path) -> int:
    from .plots import plot_stiffness

    task = TaskParams.parse(args.task)
    rec_dir = root / "reconstruct" / _task_dir(task)
    rels = []
    for joint in JOINTS:
        path = rec_dir / f"relation_{joint}.csv"
        if joint == "knee" or path.exists():
            rels.append(_read_relation(_require(path, "reconstruct"), joint, task))
    knee = rels[0]
    prov = {"task": task.label}
    for joint in JOINTS:
        p = root / "models" / f"reference_{joint}.json"
        if p.exists():
            prov[f"reference_{joint}_sha256"] = _sha256(p)
        p = root / "models" / f"feature_bank_{joint}.json"
        if p.exists():
            prov[f"feature_bank_{joint}_sha256"] = _sha256(p)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        tables = build_joint_tables(rels, segmentation_for(knee, cfg), prov)
    for w in caught:
        log.warning(str(w.message))
    thresholds = thresholds_for(knee, cfg)
    out_dir = root / "stiffness" / _task_dir(task)
    save_tables(out_dir / "controller.json", tables, thresholds.to_dict())
    for joint, table in tables.items():
        atomic_write_text(out_dir / f"stiffness_{joint}.csv", table.to_csv())
        if not args.no_plots:
            plot_stiffness(out_dir / f"stiffness_{joint}.svg", next(r for r in rels if r.joint == joint), table)
    _write_config(out_dir, cfg, {"command": "stiffness", "task": task.to_dict()})
    for joint, table in tables.items():
        print(table.to_csv(), end="")
    return 0


def cmd_simulate(args, cfg: PipelineConfig, root: Path) -> int:
    task = TaskParams.parse(args.task)
    ctrl_path = _require(root / "stiffness" / _task_dir(task) / "controller.json", "stiffness")
    tables = load_tables(ctrl_path)
    th_doc = load_model(ctrl_path, "stiffness").get("thresholds")
    thresholds = FsmThresholds.from_dict(th_doc) if th_doc else None
    if thresholds is None:
        raise DataError(f"{ctrl_path} has no FSM thresholds")
    out_dir = root / "simulate" / _task_dir(task)
    if args.stream:
        samples = read_stream_csv(args.stream)
    else:
        corpus = _load_corpus(root)
        pairs = _pairs_for(corpus, task, root, args.cycles)
        stream = corpus_to_sensor_stream(pairs, cfg.fsm.cadence, cfg.fsm.body_weight, cfg.fsm.fs,
                                         cfg.segmentation.toe_off)
        samples = samples_from_arrays(stream.t, stream.Fz, stream.My, stream.qk, stream.qa)
    write_stream_csv(samples, out_dir / "stream.csv")
    trace = run_stream(make_controller(tables), samples, thresholds)
    atomic_write_text(out_dir / "trace.csv", trace.to_csv())
    atomic_write_text(out_dir / "transitions.csv", trace.transitions_csv())
    _write_config(out_dir, cfg, {"command": "simulate", "task": task.to_dict()})
    print(f"{len(trace)} samples, {len(trace.transitions)} transitions -> {out_dir}")
    return 0


def _pairs_for(corpus: Corpus, task: TaskParams, root: Path, n_cycles: int):
    knee = {t.cycle_id: t for t in corpus.for_task(task, "knee")}
    ankle = {t.cycle_id: t for t in corpus.for_task(task, "ankle")}
    ids = sorted(set(knee) & set(ankle))
    if ids:
        return [(knee[i], ankle[i]) for i in ids][:n_cycles] if n_cycles else [(knee[i], ankle[i]) for i in ids]
    truth = _truth(root)
    if truth is None:
        raise DataError(f"corpus has no cycles for {task.label} and no synthetic ground truth to replay")
    k, a = truth(task, "knee"), truth(task, "ankle")
    return [(k, a)] * max(n_cycles, 1)


def cmd_evaluate(args, cfg: PipelineConfig, root: Path) -> int:
    from .plots import plot_evaluation

    corpus = _load_corpus(root)
    train, test = split_corpus(corpus, cfg.split.train_fraction, cfg.split.seed, unit=cfg.split.unit)
    report = evaluate_pipeline(train, test, cfg, _truth(root))
    out_dir = root / "evaluation"
    atomic_write_text(out_dir / "report.json", report.to_json())
    atomic_write_text(out_dir / "report.csv", report.to_csv())
    atomic_write_text(out_dir / "timing.json", dumps(report.runtimes))
    if not args.no_plots:
        plot_evaluation(out_dir / "evaluation.svg", report)
    _write_config(out_dir, cfg, {"command": "evaluate", "train_tasks": [t.label for t in train.tasks()],
                                 "test_tasks": [t.label for t in test.tasks()]})
    for key, value in report.summary().items():
        print(f"{key}: {value:.6g}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "extract-features": cmd_extract_features,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "stiffness": cmd_stiffness,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline configuration")
    common.add_argument("--out", help="output root (default: config output_dir, then $QUASISTIFF_OUTPUT_ROOT, then ./runs)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set gmm.n_components=8")
    common.add_argument("--seed", type=int, help="seed for synthesis, splitting and EM")
    common.add_argument("--no-plots", action="store_true", help="skip SVG output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="quasistiff", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ingest", parents=[common], help="validate and resample a corpus CSV")
    p.add_argument("--corpus", help="corpus CSV in the documented schema")
    p.add_argument("--schema", help="JSON column map for non-default column names/units")
    sub.add_parser("extract-features", parents=[common], help="target features per task")
    p = sub.add_parser("train", parents=[common], help="fit feature GPs and the GMM/GMR reference")
    p.add_argument("--exclude-task", action="append", default=[], metavar="TASK",
                   help="hold a task out of training (repeatable)")
    for name, text in (("reconstruct", "KMP torque-angle relation for a new task"),
                       ("stiffness", "per-sub-phase quasi-stiffness tables"),
                       ("simulate", "replay a sensor stream through the FSM controller")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--task", required=True, help="task, e.g. v=0.6,incline=0")
        if name == "simulate":
            p.add_argument("--stream", help="sensor CSV t_s,Fz_N,My_Nm,qk_deg,qa_deg (default: synthesize)")
            p.add_argument("--cycles", type=int, default=0, help="cycles to synthesize (default: all)")
    sub.add_parser("evaluate", parents=[common], help="held-out evaluation report")
    sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"synth.seed={args.seed}", f"split.seed={args.seed}", f"gmm.seed={args.seed}"]
    if args.out:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    return cfg.with_overrides(overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        cfg = resolve_config(args)
        root = cfg.resolve_output()
        return COMMANDS[args.command](args, cfg, root)
    except QuasiStiffError as exc:
        stage = getattr(exc, "stage", None)
        where = f"{args.command}/{stage}" if stage else args.command
        print(f"quasistiff {where}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
