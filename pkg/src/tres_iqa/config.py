"""Flat ``section.key = value`` configuration covering every tunable of a run."""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import SyntheticSpec
from .encoder import EncoderConfig
from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelOptions:
    head_hidden: int = 64
    use_transformer: bool = True


@dataclass
class DataOptions:
    manifest: str | None = None
    test_manifest: str | None = None
    split_seed: int = 0
    split_ratio: float = 0.8


@dataclass
class RunOptions:
    workers: int = 0
    log_level: str = "info"

    def resolved_workers(self) -> int:
        return self.workers if self.workers > 0 else min(os.cpu_count() or 1, 8)


def _train_config_cls():
    from .trainer import TrainConfig

    return TrainConfig


def _sections():
    return {
        "backbone": BackboneConfig,
        "encoder": EncoderConfig,
        "model": ModelOptions,
        "loss": LossWeights,
        "train": _train_config_cls(),
        "synth": SyntheticSpec,
        "data": DataOptions,
        "run": RunOptions,
    }


_SKIP = {("train", "weights")}


def schema() -> dict[str, tuple[str, str, object, object]]:
    """Every accepted key -> (section, field, type, default)."""
    out = {}
    for section, cls in _sections().items():
        hints = typing.get_type_hints(cls)
        inst = cls()
        for f in dataclasses.fields(cls):
            if (section, f.name) in _SKIP:
                continue
            out[f"{section}.{f.name}"] = (section, f.name, hints[f.name], getattr(inst, f.name))
    return out


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _strip_optional(tp):
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def parse_value(text: str, tp):
    text = text.strip()
    tp, optional = _strip_optional(tp)
    if optional and text.lower() in ("none", ""):
        return None
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        item = args[0]
        if len(args) != 2 or args[1] is not Ellipsis:
            if len(parts) != len(args):
                raise ConfigError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(parse_value(p, item) for p in parts)
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if tp is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"expected an integer, got {text!r}") from None
    if tp is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"expected a number, got {text!r}") from None
    return text


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    known = schema()
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelOptions = field(default_factory=ModelOptions)
    loss: LossWeights = field(default_factory=LossWeights)
    train: object = field(default_factory=lambda: _train_config_cls()())
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    data: DataOptions = field(default_factory=DataOptions)
    run: RunOptions = field(default_factory=RunOptions)

    @classmethod
    def from_flat(cls, values: dict[str, str]) -> "RunConfig":
        known = schema()
        by_section: dict[str, dict] = {name: {} for name in _sections()}
        for key, text in values.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r}")
            section, name, tp, _ = known[key]
            try:
                by_section[section][name] = parse_value(text, tp)
            except ConfigError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        built = {}
        for section, cls_ in _sections().items():
            try:
                built[section] = cls_(**by_section[section])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}] {exc}") from None
        built["train"].weights = built["loss"]
        return cls(**built)

    def flat(self) -> dict[str, object]:
        return {key: getattr(getattr(self, section), name)
                for key, (section, name, _, _) in schema().items()}

    def dump(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.flat().items())

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.backbone, self.encoder, self.model.head_hidden, self.model.use_transformer)


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    return RunConfig.from_flat(values)


# --- checkpoint metadata helpers ---------------------------------------------

def _flatten(section: str, obj) -> dict[str, object]:
    return {f"{section}.{f.name}": getattr(obj, f.name) for f in dataclasses.fields(obj)
            if (section, f.name) not in _SKIP}


def flatten_model_config(config: ModelConfig) -> dict[str, object]:
    out = _flatten("backbone", config.backbone)
    out.update(_flatten("encoder", config.encoder))
    out.update({"model.head_hidden": config.head_hidden, "model.use_transformer": config.use_transformer})
    return out


def flatten_train_config(config) -> dict[str, object]:
    out = _flatten("train", config)
    out.update(_flatten("loss", config.weights))
    return out


def model_config_from_flat(meta: dict[str, str]) -> ModelConfig:
    keys = [k for k in meta if k.split(".")[0] in ("backbone", "encoder", "model")]
    rc = RunConfig.from_flat({k: meta[k] for k in keys})
    return rc.model_config()


def train_config_from_flat(meta: dict[str, str]):
    keys = [k for k in meta if k.split(".")[0] in ("train", "loss")]
    return RunConfig.from_flat({k: meta[k] for k in keys}).train
