"""Experiment configuration: dataclasses, YAML loading and validation."""
from __future__ import annotations

import dataclasses
import os
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional

import yaml

from .errors import InputError
from .tasks import TRAINING_TASKS

ALGOS = ("fedavg", "fedprox")
VARIANTS = ("base", "global_finetune", "llm_finetune")
SCOPES = ("single", "multi")


@dataclass
class FederationConfig:
    num_clients: int = 5
    num_rounds: int = 10
    algo: str = "fedavg"
    lam: float = 0.01
    variant: str = "base"
    scope: str = "multi"
    task: Optional[str] = None          # single scope: restrict to one task
    local_epochs: int = 1
    local_lr: float = 1e-4
    batch_size: int = 32
    foundation_lr: float = 5e-4
    injection_epochs: int = 1
    finetune_lr: float = 1e-4
    finetune_epochs: int = 1
    finetune_every_round: bool = True
    compensated: bool = False
    threads: int = 1


@dataclass
class ModelConfig:
    enc_dim: int = 16
    dec_hidden: int = 32
    d_k: int = 32
    n_blocks: int = 2
    block_hidden: int = 64
    rank: int = 4
    n_experts: int = 4
    vocab_size: int = 512
    router_mlp: bool = True


@dataclass
class DataConfig:
    n_per_task: int = 600
    n_validation: int = 200
    margin: float = 1.0
    tasks: List[str] = field(default_factory=lambda: [t.name for t in TRAINING_TASKS])


@dataclass
class EvalConfig:
    zero_shot: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    federation: FederationConfig = field(default_factory=FederationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def replace(self, **fed) -> "ExperimentConfig":
        return dataclasses.replace(self, federation=dataclasses.replace(self.federation, **fed))

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


_SECTIONS = {"federation": FederationConfig, "model": ModelConfig, "data": DataConfig,
             "eval": EvalConfig}
# file key -> dataclass field where they differ
_ALIASES = {("federation", "lambda"): "lam", ("federation", "lam"): "lam"}


def _build(section: str, raw: Any, cls):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise InputError(f"{section}: expected a mapping, got {type(raw).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in raw.items():
        attr = _ALIASES.get((section, key), key)
        if attr not in names:
            raise InputError(f"{section}.{key}: unknown key")
        default = getattr(cls(), attr)
        kwargs[attr] = _coerce(f"{section}.{key}", val, default)
    return cls(**kwargs)


def _coerce(path: str, val: Any, default: Any) -> Any:
    if default is None or val is None:
        return val
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise InputError(f"{path}: expected true/false, got {val!r}")
        return val
    if isinstance(default, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise InputError(f"{path}: expected an integer, got {val!r}")
        return val
    if isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise InputError(f"{path}: expected a number, got {val!r}")
        return float(val)
    if isinstance(default, list):
        if not isinstance(val, list):
            raise InputError(f"{path}: expected a list, got {val!r}")
        return list(val)
    if isinstance(default, str) and not isinstance(val, str):
        raise InputError(f"{path}: expected a string, got {val!r}")
    return val


def from_mapping(raw: Optional[Mapping]) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, Mapping):
        raise InputError("config root must be a mapping")
    unknown = set(raw) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise InputError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = ExperimentConfig(
        seed=_coerce("seed", raw.get("seed", 0), 0),
        **{k: _build(k, raw.get(k), cls) for k, cls in _SECTIONS.items()})
    fed = raw.get("federation") or {}
    return validate(cfg, lambda_given="lambda" in fed or "lam" in fed)


def parse_config(path: Optional[str], overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Load ``path`` (YAML; may be empty) and apply flag ``overrides``.

    Override keys are ``seed`` or federation field names (``rounds`` and
    ``clients`` are accepted as short forms).
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        if not os.path.isfile(path):
            raise InputError(f"config file not found: {path}")
        with open(path) as f:
            try:
                raw = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise InputError(f"config file is not valid YAML: {e}") from None
    raw = {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in raw.items()}
    short = {"rounds": "num_rounds", "clients": "num_clients", "lambda": "lam"}
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key == "seed":
            raw["seed"] = val
            continue
        fed = raw.setdefault("federation", {}) or {}
        raw["federation"] = fed
        attr = short.get(key, key)
        file_key = "lambda" if attr == "lam" else attr
        fed.pop("lam" if file_key == "lambda" else "lambda", None)
        fed[file_key] = val
    return from_mapping(raw)


def validate(cfg: ExperimentConfig, lambda_given: bool = False) -> ExperimentConfig:
    f = cfg.federation
    f.algo = f.algo.lower()
    if f.algo not in ALGOS:
        raise InputError(f"federation.algo: expected one of {ALGOS}, got {f.algo!r}")
    if f.variant not in VARIANTS:
        raise InputError(f"federation.variant: expected one of {VARIANTS}, got {f.variant!r}")
    if f.scope not in SCOPES:
        raise InputError(f"federation.scope: expected one of {SCOPES}, got {f.scope!r}")
    if f.num_clients < 1:
        raise InputError("federation.num_clients: must be >= 1")
    if f.num_rounds < 0:
        raise InputError("federation.num_rounds: must be >= 0")
    if f.lam < 0:
        raise InputError("federation.lambda: must be >= 0")
    if f.batch_size < 1:
        raise InputError("federation.batch_size: must be >= 1")
    if f.threads < 1:
        raise InputError("federation.threads: must be >= 1")
    if f.algo == "fedavg" and lambda_given:
        warnings.warn("federation.lambda is set but algo is fedavg; lambda is ignored",
                      stacklevel=2)
    if not cfg.data.tasks:
        raise InputError("data.tasks: at least one training task is required")
    known = {t.name for t in TRAINING_TASKS}
    for t in cfg.data.tasks:
        if t not in known:
            raise InputError(f"data.tasks: unknown training task {t!r}")
    if f.task is not None:
        if f.scope == "multi":
            raise InputError("federation.task: only valid with scope 'single' (scope is 'multi')")
        if f.task not in cfg.data.tasks:
            raise InputError(f"federation.task: {f.task!r} is not among data.tasks")
    if cfg.data.n_per_task < 4 * f.num_clients:
        raise InputError("data.n_per_task: too few samples to give every client training data")
    return cfg
