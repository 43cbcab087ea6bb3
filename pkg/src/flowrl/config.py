"""YAML experiment configuration with full defaults and ablation presets."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ArtifactIOError, ConfigError
from .grpo import GrpoConfig


@dataclass
class DataConfig:
    kind: str = "regular"
    sizes: list = field(default_factory=lambda: [[4, 4], [5, 5], [6, 6]])
    frames: int = 36
    cond_shape: list = field(default_factory=lambda: [6, 6])
    trap_fraction: float = 0.2
    demo_count: int = 100000
    train_count: int = 40
    heldout_count: int = 20
    nav_frames: int = 24
    nav_train_count: int = 16
    nav_heldout_count: int = 16


@dataclass
class ModelConfig:
    hidden: int = 256
    init_seed: int = 0


@dataclass
class SftConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64


@dataclass
class EvalConfig:
    s_infer: int = 50
    noise_scale: float = 0.5
    ks: list = field(default_factory=lambda: [1, 4, 8, 12, 16])
    sample_seed: int = 0


@dataclass
class ExperimentConfig:
    seed: int = 0
    task: str = "maze"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)


REQUIRED = ("task",)

PRESETS: dict[str, dict] = {
    "kl-0": {"grpo": {"beta_kl": 0.0}},
    "kl-0.04": {"grpo": {"beta_kl": 0.04}},
    "kl-0.1": {"grpo": {"beta_kl": 0.1}},
    "steps-5": {"grpo": {"s_train": 5}},
    "steps-30": {"grpo": {"s_train": 30}},
    "steps-50": {"grpo": {"s_train": 50}},
    "reward-em-only": {"grpo": {"reward": {"name": "em_only"}}},
    "reward-dense": {"grpo": {"reward": {"name": "game"}}},
    "with-sft": {"sft": {"epochs": 20}},
    "without-sft": {"sft": {"epochs": 0}},
    "nav": {"task": "nav", "grpo": {"reward": {"name": "embedding"}}},
}


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown field {path + '.' if path else ''}{unknown[0]}")
    default = cls()
    kwargs = {}
    for name, f in known.items():
        where = f"{path}.{name}" if path else name
        if name not in raw:
            continue
        value = raw[name]
        current = getattr(default, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, where)
        else:
            kwargs[name] = _coerce(value, current, where)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"field {where}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field {where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field {where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"field {where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"field {where}: expected a list")
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError(f"field {where}: expected a mapping")
    return copy.deepcopy(value)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "reward":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.task not in ("maze", "nav"):
        raise ConfigError(f"field task: expected 'maze' or 'nav', got {cfg.task!r}")
    d = cfg.data
    if not d.sizes or any(len(s) != 2 for s in d.sizes):
        raise ConfigError("field data.sizes: expected a list of [width, height] pairs")
    if len(d.cond_shape) != 2:
        raise ConfigError("field data.cond_shape: expected [rows, cols]")
    if any(h > d.cond_shape[0] or w > d.cond_shape[1] for w, h in d.sizes):
        raise ConfigError("field data.cond_shape: smaller than the largest maze")
    for name in ("frames", "train_count", "heldout_count", "nav_frames"):
        if getattr(d, name) < 1:
            raise ConfigError(f"field data.{name}: must be >= 1")
    if cfg.model.hidden < 1:
        raise ConfigError("field model.hidden: must be >= 1")
    if cfg.sft.epochs < 0 or cfg.sft.lr <= 0:
        raise ConfigError("field sft: epochs must be >= 0 and lr > 0")
    if cfg.eval.s_infer < 2 or any(k < 1 for k in cfg.eval.ks):
        raise ConfigError("field eval: s_infer must be >= 2 and every K >= 1")


def config_from_dict(raw: dict | None, presets: list[str] | tuple[str, ...] = ()) -> ExperimentConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing required field {missing[0]}")
    for name in presets:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
        raw = _merge(raw, PRESETS[name])
    cfg = _build(ExperimentConfig, raw, "")
    _validate(cfg)
    return cfg


def load_config(path: str | Path, presets: list[str] | tuple[str, ...] = ()) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ArtifactIOError(path, f"cannot read config: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}: YAML syntax error{where}") from exc
    return config_from_dict(raw, presets)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
