import warnings

import numpy as np
import pytest

from quasistiff.gait_data import GaitTrajectory, TaskParams, canonical_grid
from quasistiff.synthetic import SyntheticGaitSpec, generate_synthetic_corpus

SPEEDS = (0.6, 0.8, 1.0, 1.2, 1.4)


@pytest.fixture(scope="session")
def speed_spec():
    return SyntheticGaitSpec(tuple(TaskParams(v) for v in SPEEDS), n_cycles=3, seed=3)


@pytest.fixture(scope="session")
def speed_corpus(speed_spec):
    return generate_synthetic_corpus(speed_spec)


@pytest.fixture(scope="session")
def clean_spec():
    return SyntheticGaitSpec(tuple(TaskParams(v) for v in SPEEDS), n_cycles=2, noise_sigma={}, seed=0)


@pytest.fixture(scope="session")
def clean_corpus(clean_spec):
    return generate_synthetic_corpus(clean_spec)


def make_traj(angle, torque=None, joint="knee", task=None, cycle_id=0, phase=None):
    angle = np.asarray(angle, float)
    phase = canonical_grid(angle.size) if phase is None else np.asarray(phase, float)
    torque = np.zeros_like(angle) if torque is None else np.asarray(torque, float)
    return GaitTrajectory(joint, task or TaskParams(1.0), cycle_id, phase, angle, torque)


@pytest.fixture
def no_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        yield


LOSO_SPEEDS = tuple(round(float(v), 4) for v in np.linspace(0.6, 1.4, 7))


@pytest.fixture(scope="session")
def speed_loso():
    """Leave-one-speed-out report over the 7-speed synthetic family (slow: ~45 s)."""
    from quasistiff.config import PipelineConfig
    from quasistiff.sim import leave_one_task_out, synthetic_spec

    cfg = PipelineConfig()
    spec = synthetic_spec(cfg, [TaskParams(v) for v in LOSO_SPEEDS])
    corpus = generate_synthetic_corpus(spec)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = leave_one_task_out(corpus, cfg, spec.truth)
    return spec, report


ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None) or dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = ACCEPTANCE.get(crit, "PASS")
        ACCEPTANCE[crit] = "PASS" if prev == "PASS" and report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE, key=lambda c: int(c.split()[0])):
        terminalreporter.write_line(f"{ACCEPTANCE[crit]}  criterion {crit}")
