"""Experiment configuration: YAML files, strict parsing, dotted-path overrides.

Config files are nested YAML. Every key is checked against the schema below;
unknown keys fail loudly with their dotted path so typos never pass silently.
Command-line overrides use ``section.key=value`` with YAML scalar parsing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .schemes import TrainingScheme

TASKS = ("toy", "seismic")


class ConfigError(ValueError):
    pass


@dataclass
class SolverSection:
    variant: str = "gd"
    iterations: int = 10
    step_size: float = 0.1
    x0_rule: str = "adjoint"


@dataclass
class NetSection:
    type: str = "mlp"
    role: str = "gradient"
    widths: list = field(default_factory=lambda: [2, 32, 32, 2])
    activation: str = "tanh"
    depth: int = 5
    channels: int = 64
    kernel_len: int = 3
    seed_offset: int = 0


@dataclass
class SchemeSection:
    tag: str = "mse"
    epochs: int = 500
    batch_size: int = 256
    learning_rate: float = 1e-4
    epsilon: float = 0.0
    attack_steps: int = 1
    attack_step_size: float = 0.0
    sigma_w2: float = 0.0
    jitter_sigma2: float | list = 0.0

    def to_scheme(self) -> TrainingScheme:
        return TrainingScheme(tag=self.tag, epochs=self.epochs, batch_size=self.batch_size,
                              learning_rate=self.learning_rate, epsilon=self.epsilon,
                              attack_steps=self.attack_steps,
                              attack_step_size=self.attack_step_size,
                              sigma_w2=self.sigma_w2, jitter_sigma2=self.jitter_sigma2)


@dataclass
class DatasetSection:
    kind: str = "toy"
    n_train: int = 200
    n_test: int = 50
    n_ood: int = 50
    sigma2_z: float = 0.01
    per_coordinate_variance: bool = False
    ood_bias: list = field(default_factory=lambda: [0.005, 0.0])
    sparsity: float = 0.05
    amp_low: float = 0.3
    amp_high: float = 1.0
    layer_magnitude: float = 0.1
    layer_time: int = 32
    train_path: str | None = None
    test_path: str | None = None
    ood_path: str | None = None


@dataclass
class AttackSection:
    epsilon: float = 0.0
    steps: int = 0
    step_size: float = 0.0


@dataclass
class AverageCaseSection:
    sampling: str = "uniform_ball"
    radius: float = 0.0
    sigma_e2: float = 0.0


@dataclass
class GeneralizationSection:
    shift: list | None = None
    sigma_g2: float = 0.0


@dataclass
class EvalSection:
    draws: int = 16
    attack: AttackSection = field(default_factory=AttackSection)
    average_case: AverageCaseSection = field(default_factory=AverageCaseSection)
    generalization: GeneralizationSection = field(default_factory=GeneralizationSection)


@dataclass
class ExperimentConfig:
    task: str = "toy"
    output_dir: str = "runs"
    seeds: list = field(default_factory=lambda: [0])
    deterministic: bool = True
    operator: dict = field(default_factory=lambda: {"kind": "identity", "shape": [2]})
    solver: SolverSection = field(default_factory=SolverSection)
    net: NetSection = field(default_factory=NetSection)
    scheme: SchemeSection = field(default_factory=SchemeSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.scheme.tag == "spgd_jitter" and self.solver.variant != "pgd":
            raise ConfigError("scheme.tag=spgd_jitter requires solver.variant=pgd")
        if self.solver.variant == "pgd" and self.net.role != "proximal":
            raise ConfigError("solver.variant=pgd requires net.role=proximal")
        if self.solver.variant == "gd" and self.net.role != "gradient":
            raise ConfigError("solver.variant=gd requires net.role=gradient")
        if self.net.type not in ("mlp", "dncnn1d"):
            raise ConfigError(f"net.type must be mlp or dncnn1d, got {self.net.type!r}")

    def to_dict(self) -> dict:
        return _as_plain(self)

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


_SECTION_TYPES = {
    "solver": SolverSection,
    "net": NetSection,
    "scheme": SchemeSection,
    "dataset": DatasetSection,
    "eval": EvalSection,
    "attack": AttackSection,
    "average_case": AverageCaseSection,
    "generalization": GeneralizationSection,
}


def _as_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _as_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _as_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    return obj


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, indent=2)


def _build_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {path}.{key}" if path else
                              f"unknown config key {key}")
        sub = _SECTION_TYPES.get(key)
        if sub is not None and dataclasses.is_dataclass(sub) and key != "operator":
            kwargs[key] = _build_section(sub, value, f"{path}.{key}" if path else key)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build_section(ExperimentConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides or []:
        apply_override(data, item)
    return config_from_dict(data)


def apply_override(data: dict, item: str) -> None:
    """Apply one ``dotted.path=value`` override, YAML-parsing the value."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    dotted, raw = item.split("=", 1)
    keys = dotted.strip().split(".")
    if not all(keys):
        raise ConfigError(f"override {item!r} has an empty path segment")
    node = data
    for key in keys[:-1]:
        nxt = node.get(key)
        if nxt is None:
            nxt = {}
            node[key] = nxt
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {dotted}: {key} is not a section")
        node = nxt
    node[keys[-1]] = yaml.safe_load(raw)
