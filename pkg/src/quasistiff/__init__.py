"""Task-adaptive quasi-stiffness control for a powered knee-ankle prosthesis.

Pipeline: GP regression of target features from task parameters, GMM/GMR
reference encoding, kernelized movement primitive reconstruction through the
predicted via-points, per-sub-phase linear stiffness fitting, and a four-state
finite-state machine that commands torque.
"""

from .gait_data import (
    Corpus,
    FeatureSpec,
    FeatureWindow,
    GaitTrajectory,
    TargetFeatureSet,
    TaskParams,
    TorqueAngleRelation,
)

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "FeatureSpec",
    "FeatureWindow",
    "GaitTrajectory",
    "TargetFeatureSet",
    "TaskParams",
    "TorqueAngleRelation",
]
