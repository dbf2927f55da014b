"""SVG figures: reference envelopes, reconstructions, stiffness overlays, evaluation panels."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .stiffness import QuasiStiffnessTable, segment_masks  # noqa: E402

_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_reconstruction(path, reference, reconstruction, truth=None):
    """Reference band (mean +- 2 sd), via-points and the reconstructed trajectory."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    grid, sd = reference.index, reference.std()
    rel = reconstruction.relation
    for d, (ax, label) in enumerate(zip(axes[:2], ("angle [deg]", "torque [N m/kg]"))):
        m = reference.means[:, d]
        ax.fill_between(grid, m - 2 * sd[:, d], m + 2 * sd[:, d], color="0.85", label="reference +-2sd")
        ax.plot(grid, m, color="0.4", lw=1, label="reference mean")
        ax.plot(rel.phase, (rel.angle, rel.torque)[d], color="C0", lw=1.6, label="reconstructed")
        if truth is not None:
            ax.plot(truth.phase, (truth.angle, truth.torque)[d], "k--", lw=1, label="ground truth")
        vias = [(v.index, v.mean[d]) for v, f in zip(reconstruction.vias, reconstruction.features.features)
                if (f.kind == "angle") == (d == 0)]
        if vias:
            ax.plot(*zip(*vias), "o", color="C3", ms=5, label="via-points")
        ax.set_xlabel("gait phase")
        ax.set_ylabel(label)
    axes[0].legend(fontsize=7)
    ax = axes[2]
    ax.plot(reference.means[:, 0], reference.means[:, 1], color="0.4", lw=1, label="reference")
    ax.plot(rel.angle, rel.torque, color="C0", lw=1.6, label="reconstructed")
    if truth is not None:
        ax.plot(truth.angle, truth.torque, "k--", lw=1, label="ground truth")
    ax.set_xlabel("angle [deg]")
    ax.set_ylabel("torque [N m/kg]")
    ax.legend(fontsize=7)
    fig.suptitle(f"{rel.joint}, {rel.task.label}")
    fig.tight_layout()
    return _save(fig, path)


def plot_stiffness(path, relation, table: QuasiStiffnessTable):
    """Torque-angle loop with one regression line per sub-phase."""
    fig, ax = plt.subplots(figsize=(5, 4))
    masks = segment_masks(relation.phase, table.segmentation)
    for i, (sp, m) in enumerate(masks.items()):
        th = relation.angle[m]
        ax.plot(th, relation.torque[m], ".", color=f"C{i}", ms=3)
        xs = np.linspace(th.min(), th.max(), 2)
        e = table[sp]
        ax.plot(xs, e.torque(xs), "-", color=f"C{i}", lw=1.5,
                label=f"{sp.short}: k={e.k:.4f}, th_e={e.theta_e:.1f}, r2={e.r_squared:.2f}")
    ax.set_xlabel("angle [deg]")
    ax.set_ylabel("torque [N m/kg]")
    ax.set_title(f"{table.joint}, {table.task.label}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_evaluation(path, report):
    """Per-task RMSE panels: features, relation, kinematics and kinetics."""
    keys = (("feature_rmse_angle", "feature angle RMSE [deg]"),
            ("relation_rmse_torque_pct", "relation torque RMSE [% range]"),
            ("kinematics_rmse", "kinematics RMSE [deg]"),
            ("kinetics_rmse", "kinetics RMSE [N m/kg]"))
    fig, axes = plt.subplots(1, len(keys), figsize=(14, 3.4))
    labels = [t.label for t in report.tasks]
    x = np.arange(len(labels))
    joints = sorted({r.joint for r in report.rows})
    width = 0.8 / max(len(joints), 1)
    for ax, (key, title) in zip(axes, keys):
        for j, joint in enumerate(joints):
            ax.bar(x + j * width, report.column(key, joint), width, label=joint)
        ax.set_title(title, fontsize=9)
        ax.set_xticks(x + width * (len(joints) - 1) / 2, labels, rotation=90, fontsize=6)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
