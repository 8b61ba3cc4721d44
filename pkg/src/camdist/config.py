"""Run configuration: nested TOML sections mapped onto the module configs.

A config file has up to six tables, each mirroring one dataclass::

    [data]        DataConfig        dataset sizes, seeds, detector noise
    [lifter]      LifterConfig      network shape
    [train]       TrainConfig       pretraining and meta-training
    [adapt]       AdaptConfig       test-time adaptation
    [eval]        EvalConfig        evaluation presets
    [experiment]  ExperimentConfig  scripted experiments and trend thresholds

Every field has a default, so an empty file is a valid config. Unknown
tables or keys are rejected. Precedence is: command-line flag, then config
file, then default.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import tomli_w

from .adaptation import AdaptConfig
from .camera import PRESETS
from .datagen import NoiseConfig
from .errors import ConfigError, InvalidInputError
from .lifter import LifterConfig
from .training import TrainConfig

OUT_ENV = "CAMDIST_OUT"  # default output directory when --out is not given
DEFAULT_OUT = "camdist-out"


@dataclass(frozen=True)
class DataConfig:
    n_clips: int = 30
    n_frames: int = 300
    seed: int = 0
    test_clips: int = 4
    test_seed: int = 1000
    adapt_clips: int = 10  # labeled clips recorded with the target camera (scenario 1)
    adapt_seed: int = 2000
    noise_sigma: float = 2.0
    outlier_prob: float = 0.01
    outlier_max: float = 30.0

    def __post_init__(self):
        if min(self.n_clips, self.test_clips, self.adapt_clips) < 1:
            raise InvalidInputError("clip counts must be >= 1")
        if self.n_frames < 2:
            raise InvalidInputError("n_frames must be >= 2")
        self.noise  # validates

    @property
    def noise(self):
        return NoiseConfig(self.noise_sigma, self.outlier_prob, self.outlier_max)


@dataclass(frozen=True)
class EvalConfig:
    presets: tuple = ("none", "d1", "d2", "d3", "d4")
    source: str = "predicted"  # test keypoints carry detector jitter

    def __post_init__(self):
        object.__setattr__(self, "presets", tuple(self.presets))
        for p in self.presets:
            if p not in PRESETS:
                raise InvalidInputError(f"unknown preset {p!r}; known: {sorted(PRESETS)}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "desk"
    kind: str = "all"
    heavy: tuple = ("d1", "d2")
    moderate: tuple = ("d3", "d4")
    checkpoint: str = ""  # undistorted-trained model for the degradation run; trained if empty
    # per-scenario adaptation overrides on top of [adapt]
    s1_lr: float = 0.0
    s1_optimizer: str = ""
    s2_lr: float = 0.0
    s2_optimizer: str = ""
    s2_frames: int = 0  # unlabeled frames per test clip for ISO; 0 uses whole clips
    undistorted_epochs: int = 0  # pretraining epochs of the undistorted model; 0 uses train.pretrain_epochs
    # trend thresholds checked by the acceptance suite
    degradation_ratio: float = 1.5
    dynamics_drop: float = 0.10

    KINDS = ("all", "degradation", "dynamics", "ablation", "generation_path")

    def __post_init__(self):
        object.__setattr__(self, "heavy", tuple(self.heavy))
        object.__setattr__(self, "moderate", tuple(self.moderate))
        if self.kind not in self.KINDS:
            raise InvalidInputError(f"experiment kind must be one of {self.KINDS}, got {self.kind!r}")
        if not self.name or any(c in self.name for c in "/\\"):
            raise InvalidInputError(f"invalid experiment name {self.name!r}")
        for p in self.heavy + self.moderate:
            if p not in PRESETS:
                raise InvalidInputError(f"unknown preset {p!r}")

    def adapt_for(self, base: AdaptConfig, scenario):
        lr, opt = (self.s1_lr, self.s1_optimizer) if scenario == 1 else (self.s2_lr, self.s2_optimizer)
        kw = {"scenario": scenario}
        if lr:
            kw["lr"] = lr
        if opt:
            kw["optimizer"] = opt
        return replace(base, **kw)


SECTIONS = {
    "data": DataConfig,
    "lifter": LifterConfig,
    "train": TrainConfig,
    "adapt": AdaptConfig,
    "eval": EvalConfig,
    "experiment": ExperimentConfig,
}


@dataclass(frozen=True)
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    lifter: LifterConfig = field(default_factory=LifterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self):
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def dumps(self):
        return tomli_w.dumps(self.to_dict())

    def with_seed(self, seed):
        """One master seed for data, initialization, training and adaptation."""
        return replace(
            self,
            data=replace(self.data, seed=seed),
            lifter=replace(self.lifter, seed=seed),
            train=replace(self.train, seed=seed),
            adapt=replace(self.adapt, seed=seed),
        )


def _section_dict(obj):
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(section, f, value):
    default = f.default
    where = f"{section}.{f.name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean (true/false), got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(value)
    return value


def _build_section(name, cls, table, base):
    if not isinstance(table, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    kw = {k: _coerce(name, known[k], v) for k, v in table.items()}
    try:
        return replace(base, **kw)
    except InvalidInputError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def from_dict(d, base=None):
    base = base or Config()
    unknown = sorted(set(d) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    kw = {name: _build_section(name, SECTIONS[name], d[name], getattr(base, name)) for name in d}
    return replace(base, **kw)


def loads(text, base=None):
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    return from_dict(d, base)


def load(path, base=None):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text, base)


def parse_override(text):
    """``section.key=value`` with a TOML value, e.g. ``train.epochs=3``."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    section, name = key.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()  # bare words are taken as strings
    return {section: {name: value}}


def apply_overrides(cfg, overrides):
    for text in overrides:
        cfg = from_dict(parse_override(text), cfg)
    return cfg


def resolve(path=None, overrides=(), seed=None):
    """Defaults, then the file, then ``--set`` overrides, then ``--seed``."""
    cfg = load(path) if path else Config()
    cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def default_out_dir(flag=None):
    if flag:
        return Path(flag)
    return Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)


def bundled_config(name):
    """Path of a config shipped with the package (``configs/<name>.toml``)."""
    p = Path(__file__).with_name("configs") / f"{name}.toml"
    if not p.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return p
