"""Flat `key = value` experiment configuration files.

Keys are grouped by dotted prefixes (model., train., quant., data.); lines
starting with # and blank lines are ignored.  Every parse error is anchored
to its line.  A config fully determines a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .model import ACTIVATION_TAGS, WEIGHT_TAGS, ModelConfig
from .train import Regime, TrainConfig


class ConfigFileError(ValueError):
    pass


def _to_bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "on", "yes"):
        return True
    if low in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _to_list(v: str) -> list[str]:
    return [p.strip() for p in v.split(",") if p.strip()]


@dataclass
class ExperimentConfig:
    task: str = "translate-toy"
    seed: int = 0
    regime: str = "fullyqt"
    bucketing: bool = True
    allow_early_quant: bool = False
    only_points: list = field(default_factory=list)
    disable_points: list = field(default_factory=list)
    post_trials: int = 20
    post_steps: int = 300
    beam: int = 4
    length_penalty: float = 0.6
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        kw = dict(self.model)
        if vocab_size is not None:
            kw["vocab_size"] = vocab_size
        if "vocab_size" not in kw:
            raise ConfigFileError("model.vocab_size is required (or derived from data)")
        return ModelConfig(**kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)

    def validate(self) -> None:
        if self.task not in ("translate-toy", "lm"):
            raise ConfigFileError(f"unknown task {self.task!r}")
        try:
            Regime.parse(self.regime, allow_early=self.allow_early_quant)
        except ValueError as e:
            raise ConfigFileError(f"quant.regime: {e}") from e
        valid = set(WEIGHT_TAGS) | set(ACTIVATION_TAGS)
        for name in list(self.only_points) + list(self.disable_points):
            if name not in valid:
                raise ConfigFileError(
                    f"unknown quant point {name!r}; valid names: {sorted(valid)}")


_TOP_KEYS = {
    "task": str,
    "seed": int,
}

_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "seed"}

_QUANT_KEYS = {
    "regime": str,
    "bucketing": _to_bool,
    "allow_early": _to_bool,
    "only": _to_list,
    "disable": _to_list,
    "post_trials": int,
    "post_steps": int,
    "beam": int,
    "length_penalty": float,
}

_DATA_KEYS = {
    "kind": str,
    "vocab": int,
    "min_len": int,
    "max_len": int,
    "train_pairs": int,
    "val_pairs": int,
    "test_pairs": int,
    "seed": int,
    "train_path": str,
    "valid_path": str,
    "test_path": str,
    "lanes": int,
    "seq_len": int,
}

_MODEL_CASTS = {"int": int, "float": float, "bool": _to_bool, "str": str,
                "int | None": int, "dict | None": None}


def _cast(caster, raw: str):
    if caster is int or caster == "int" or caster == "int | None":
        return int(raw)
    if caster is float or caster == "float":
        return float(raw)
    if caster is bool or caster == "bool":
        return _to_bool(raw)
    if caster is str or caster == "str":
        return raw
    if callable(caster):
        return caster(raw)
    raise ValueError(f"cannot parse value for this key")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        try:
            if key in _TOP_KEYS:
                setattr(cfg, key, _cast(_TOP_KEYS[key], raw))
            elif key.startswith("model."):
                sub = key[6:]
                if sub not in _MODEL_KEYS:
                    raise ValueError(f"unknown key {key!r}")
                cfg.model[sub] = _cast(_MODEL_KEYS[sub], raw)
            elif key.startswith("train."):
                sub = key[6:]
                if sub not in _TRAIN_KEYS:
                    raise ValueError(f"unknown key {key!r}")
                cfg.train[sub] = _cast(_TRAIN_KEYS[sub], raw)
            elif key.startswith("quant."):
                sub = key[6:]
                if sub not in _QUANT_KEYS:
                    raise ValueError(f"unknown key {key!r}")
                value = _cast(_QUANT_KEYS[sub], raw)
                if sub == "only":
                    cfg.only_points = value
                elif sub == "disable":
                    cfg.disable_points = value
                elif sub == "allow_early":
                    cfg.allow_early_quant = value
                else:
                    setattr(cfg, sub, value)
            elif key.startswith("data."):
                sub = key[5:]
                if sub not in _DATA_KEYS:
                    raise ValueError(f"unknown key {key!r}")
                cfg.data[sub] = _cast(_DATA_KEYS[sub], raw)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as e:
            raise ConfigFileError(f"{source}:{lineno}: {e}") from e
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    from pathlib import Path

    p = Path(path)
    if not p.exists():
        raise ConfigFileError(f"config file not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"), source=str(path))
