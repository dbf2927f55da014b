"""Pipeline configuration: nested frozen dataclasses loaded from one JSON file.

Unknown keys are rejected at every level. ``apply_overrides`` takes dotted
``section.key=value`` strings so command-line flags can override file values.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .gpr import LENGTH_GRID, NOISE_GRID
from .kmp import DEFAULT_LAMBDA, DEFAULT_LENGTH, VIA_EPS
from .persist import FORMAT_VERSION, dumps

OUTPUT_ENV = "QUASISTIFF_OUTPUT_ROOT"


@dataclass(frozen=True)
class GprConfig:
    length_grid: tuple[float, ...] = LENGTH_GRID
    noise_grid: tuple[float, ...] = NOISE_GRID


@dataclass(frozen=True)
class GmmConfig:
    n_components: int | None = None  # None selects by BIC over [L_min, L_max]
    L_min: int = 3
    L_max: int = 12
    max_iter: int = 300
    tol: float = 1e-7
    cov_floor: float = 1e-6
    seed: int = 0


@dataclass(frozen=True)
class KmpConfig:
    length_scale: float = DEFAULT_LENGTH
    lam: float = DEFAULT_LAMBDA
    via_eps: float = VIA_EPS


@dataclass(frozen=True)
class SegmentationConfig:
    toe_off: float = 0.6
    boundaries: tuple[float, ...] | None = None  # explicit start phases override the default


@dataclass(frozen=True)
class FsmConfig:
    body_weight: float = 700.0  # N
    hs_fraction: float = 0.15
    to_fraction: float = 0.05
    My_se: float = 0.0
    swing_margin: float = 5.0
    debounce_samples: int = 3
    blend_window: float = 0.05
    cadence: float = 0.9  # cycles per second
    fs: float = 100.0


@dataclass(frozen=True)
class SynthConfig:
    speeds: tuple[float, ...] = (0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4)
    inclines: tuple[float, ...] = (-5.0, 0.0, 5.0)
    n_cycles: int = 5
    seed: int = 0
    noise_sigma: dict = field(default_factory=lambda: {"knee_angle": 1.0, "knee_torque": 0.02,
                                                       "ankle_angle": 0.5, "ankle_torque": 0.02})


@dataclass(frozen=True)
class SplitConfig:
    unit: str = "task"
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.unit not in ("task", "cycle"):
            raise ConfigError(f"split.unit must be 'task' or 'cycle', not {self.unit!r}")


@dataclass(frozen=True)
class PipelineConfig:
    corpus: str | None = None
    feature_spec: str | None = None  # path to a feature-window JSON; None uses the bundled default
    output_dir: str | None = None
    grid_size: int = 101
    gpr: GprConfig = field(default_factory=GprConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    kmp: KmpConfig = field(default_factory=KmpConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    fsm: FsmConfig = field(default_factory=FsmConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, **_plain(dataclasses.asdict(self))}

    def dumps(self) -> str:
        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d.pop("format_version", None)
        return _build(cls, d, "")

    def resolve_output(self, default: str = "runs") -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ENV, default))

    def with_overrides(self, overrides) -> "PipelineConfig":
        return apply_overrides(self, overrides)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {where or '<root>'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config key {where + unknown[0]!r}")
    kwargs = {}
    for name, value in d.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{where}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section {where or '<root>'}: {exc}") from None


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return PipelineConfig.from_dict(doc)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: PipelineConfig, overrides) -> PipelineConfig:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    doc = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(text)
    return PipelineConfig.from_dict(doc)
