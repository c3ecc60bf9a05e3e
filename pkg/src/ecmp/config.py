"""Experiment configuration: YAML sections mapped onto validated dataclasses.

Unknown keys are rejected and ``load(dump(cfg)) == cfg`` holds.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .engine import EngineConfig, parse_family
from .errors import ValidationError

BUILDERS = ("oned", "rotation")
METRICS = ("kl", "qq", "roc", "predictive")


@dataclass
class ModelConfig:
    builder: str = "oned"
    T: int = 100
    observation: str = "gaussian"
    # 1D testbed
    n: Optional[int] = 64
    n_neighb: int = 1
    eps_a: float = 0.025
    v_sys: float = 0.25
    s: float = 0.0
    v_obs: float = 0.0625
    p_obs: float = 0.75
    # 2D rotation model (n is the number of mesh vertices; mesh_h is used when n is null)
    radius: float = 10.0
    mesh_h: float = 1.0
    w: float = 0.4
    eps_w: float = 0.05
    sigma2: float = 1.0
    dt: float = 1.0

    def validate(self):
        if self.builder not in BUILDERS:
            raise ValidationError(f"model.builder must be one of {BUILDERS}")
        if self.T < 2:
            raise ValidationError("model.T must be at least 2")
        if self.observation not in ("gaussian", "poisson", "lgcp"):
            raise ValidationError("model.observation must be gaussian, poisson or lgcp")
        if self.builder == "oned" and self.observation == "lgcp":
            raise ValidationError("the 1D testbed has no mesh for point-process data")
        if self.builder == "oned" and (self.n is None or self.n < 2):
            raise ValidationError("model.n must be at least 2 for the 1D testbed")
        for name in ("v_sys", "v_obs", "radius", "mesh_h", "sigma2", "dt"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"model.{name} must be positive")
        if not 0 < self.p_obs <= 1:
            raise ValidationError("model.p_obs must lie in (0, 1]")


@dataclass
class InferenceConfig:
    family: str = "chordal:amd"
    schedule: str = "sequential"
    k: int = 1
    tol: float = 1e-8
    max_iters: int = 200
    damping: float = 1.0
    power: float = 1.0
    gh_nodes: int = 32
    site_rule: str = "laplace"
    inner_iters: int = 20

    def validate(self):
        self.engine()

    def engine(self) -> EngineConfig:
        try:
            return EngineConfig(family=self.family, schedule=self.schedule, k=self.k, tol=self.tol,
                                max_iters=self.max_iters, damping=self.damping, power=self.power,
                                gh_nodes=self.gh_nodes, site_rule=self.site_rule,
                                inner_iters=self.inner_iters)
        except ValidationError:
            raise
        except (ValueError, TypeError) as exc:
            raise ValidationError(str(exc)) from exc


@dataclass
class LearningConfig:
    v_slab: float = 1.0
    p_slab: float = 0.5
    k: float = 1.0
    tau: float = 1.0
    v_b: float = 1.0
    v1: float = 1.0
    max_outer: int = 100
    outer_tol: float = 1e-6
    learn_Q: bool = True
    Q_fixed: Optional[float] = None
    row_damping: float = 1.0
    order: list = field(default_factory=lambda: ["A", "Q", "B"])
    candidate: str = "model"  # model | diagonal | band:k

    def validate(self):
        for name in ("v_slab", "k", "tau", "v_b", "v1", "outer_tol"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"learning.{name} must be positive")
        if not 0 < self.p_slab <= 1:
            raise ValidationError("learning.p_slab must lie in (0, 1]")
        if self.max_outer < 0:
            raise ValidationError("learning.max_outer must be non-negative")
        if self.Q_fixed is not None and not self.Q_fixed > 0:
            raise ValidationError("learning.Q_fixed must be positive")
        if not 0 < self.row_damping <= 1:
            raise ValidationError("learning.row_damping must lie in (0, 1]")
        if sorted(self.order) != ["A", "B", "Q"]:
            raise ValidationError("learning.order must be a permutation of A, Q, B")
        c = self.candidate
        if c not in ("model", "diagonal") and not (c.startswith("band:") and c[5:].isdigit()):
            raise ValidationError("learning.candidate must be model, diagonal or band:k")


@dataclass
class EvaluationConfig:
    metric: str = "kl"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    families: list = field(default_factory=lambda: ["diag", "band:1", "band:2", "band:4", "band:8", "band:16"])
    n_neighb: list = field(default_factory=lambda: [1, 4])
    s: list = field(default_factory=lambda: [-1.0, 1.0])
    T_grid: list = field(default_factory=lambda: [10, 50])
    bins: int = 50
    reference_family: str = "full"

    def validate(self):
        if self.metric not in METRICS:
            raise ValidationError(f"evaluation.metric must be one of {METRICS}")
        if not self.seeds or any(int(s) < 0 for s in self.seeds):
            raise ValidationError("evaluation.seeds must be a non-empty list of non-negative integers")
        for f in list(self.families) + [self.reference_family]:
            try:
                parse_family(f)
            except ValueError as exc:
                raise ValidationError(str(exc)) from exc
        if any(t < 2 for t in self.T_grid):
            raise ValidationError("evaluation.T_grid entries must be at least 2")
        if self.bins < 2:
            raise ValidationError("evaluation.bins must be at least 2")


@dataclass
class BenchConfig:
    n_list: list = field(default_factory=lambda: [362, 562, 1008])
    families: list = field(default_factory=lambda: ["full", "diag", "chordal:amd", "tsp"])
    T: int = 200
    timeout: float = 3600.0
    repeats: int = 1
    max_rounds: dict = field(default_factory=dict)  # per-family cap on message-passing rounds

    def validate(self):
        if not self.n_list or any(n < 4 for n in self.n_list):
            raise ValidationError("bench.n_list entries must be at least 4")
        for f in self.families:
            try:
                parse_family(f)
            except ValueError as exc:
                raise ValidationError(str(exc)) from exc
        if self.T < 2 or not self.timeout > 0 or self.repeats < 1:
            raise ValidationError("bench.T >= 2, timeout > 0 and repeats >= 1 are required")
        for f, r in self.max_rounds.items():
            if f not in self.families or isinstance(r, bool) or not isinstance(r, int) or r < 1:
                raise ValidationError("bench.max_rounds maps benchmarked families to positive round counts")


SECTIONS = dict(model=ModelConfig, inference=InferenceConfig, learning=LearningConfig,
                evaluation=EvaluationConfig, bench=BenchConfig)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self):
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()


def _coerce(cls, name, value, default):
    """Light type checking against the default's type."""
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{cls.__name__}.{name} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{cls.__name__}.{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{cls.__name__}.{name} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError(f"{cls.__name__}.{name} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ValidationError(f"{cls.__name__}.{name} must be a list")
        return list(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ValidationError(f"{cls.__name__}.{name} must be a mapping")
        return dict(value)
    return value


def _section(cls, data):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValidationError(f"section {cls.__name__} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ValidationError(f"unknown keys in {cls.__name__}: {', '.join(unknown)}")
    proto = cls()
    kwargs = {k: _coerce(cls, k, v, getattr(proto, k)) for k, v in data.items()}
    return cls(**kwargs)


def from_dict(data) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValidationError("configuration must be a mapping of sections")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ValidationError(f"unknown configuration sections: {', '.join(unknown)}")
    cfg = ExperimentConfig(**{k: _section(SECTIONS[k], data.get(k)) for k in SECTIONS})
    return cfg.validate()


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"configuration is not valid YAML: {exc}") from exc
    return from_dict(data)


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read configuration {path}: {exc}") from exc
    return loads(text)
