"""Run configuration: one dataclass per INI section, with overrides."""

from __future__ import annotations

import configparser
import io
import os
import typing
from dataclasses import dataclass, field, fields, replace

from .data import SynthConfig
from .networks import ModelConfig


class ConfigError(ValueError):
    """Unknown key, bad value or unreadable config file."""


@dataclass
class TrainConfig:
    lambda1: float = 0.05
    lambda2: float = 0.02
    batch_size: int = 4
    epochs: int = 35
    warmup_epochs: int = 1
    lr_g: float = 3e-4
    lr_d: float = 2e-4
    weight_decay: float = 1e-4
    confidence_threshold: float = 0.9
    min_pixels: int = 4
    include_background: bool = False
    seg_weight: float = 1.0
    cycle_weight: float = 10.0
    adv_img_weight: float = 1.0
    adv_seg_weight: float = 1.0
    disc_start_epoch: int = 0
    augment: bool = True
    # how per-path L_sim / L_cl terms combine: "sum" (like L_base) or "mean"
    path_reduction: str = "sum"
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lr_g", "lr_d", "weight_decay", "seg_weight", "cycle_weight",
                     "adv_img_weight", "adv_seg_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("train.warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not 0 < self.confidence_threshold <= 1:
            raise ConfigError("train.confidence_threshold must lie in (0, 1]")
        if self.path_reduction not in ("sum", "mean"):
            raise ConfigError(f"train.path_reduction {self.path_reduction!r} is not one of sum, mean")


@dataclass
class DictConfig:
    # 0 selects the scale-dependent default (400 / 20, or 100 / 5 at image_size <= 32)
    dict_size: int = 0
    topk: int = 0
    tau: float = 1.0
    aggregation: str = "mean_top_k"
    query_source: bool = True
    query_target_to_source: bool = True
    query_source_to_target: bool = True
    query_target: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("dict.tau must be > 0")
        if self.dict_size < 0 or self.topk < 0:
            raise ConfigError("dict.dict_size and dict.topk must be >= 0")
        if self.aggregation not in ("mean_top_k", "mean_all", "max_similarity"):
            raise ConfigError(f"dict.aggregation {self.aggregation!r} is not one of mean_top_k, mean_all, max_similarity")

    def resolved(self, image_size: int) -> tuple[int, int]:
        small = image_size <= 32
        size = self.dict_size or (100 if small else 400)
        k = self.topk or (5 if small else 20)
        return size, k


@dataclass
class EvalConfig:
    eval_every: int = 1
    feature_points: int = 600

    def __post_init__(self):
        if self.eval_every < 1:
            raise ConfigError("eval.eval_every must be >= 1")


@dataclass
class Config:
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dict: DictConfig = field(default_factory=DictConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("data", "model", "train", "dict", "eval")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section in self.SECTIONS:
            obj = getattr(self, section)
            parser[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    def with_overrides(self, overrides: typing.Iterable[str]) -> "Config":
        cfg = self
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            key, value = item.split("=", 1)
            section, name = key.strip().split(".", 1)
            cfg = cfg._set(section, {name: value.strip()})
        return cfg

    def _set(self, section: str, values: dict[str, str]) -> "Config":
        if section not in self.SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        obj = getattr(self, section)
        known = {f.name: f for f in fields(obj)}
        hints = typing.get_type_hints(type(obj))
        parsed = {}
        for name, raw in values.items():
            if name not in known:
                raise ConfigError(f"unknown config key {section}.{name}")
            parsed[name] = _parse(raw, hints[name], f"{section}.{name}")
        try:
            return replace(self, **{section: replace(obj, **parsed)})
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if origin is tuple:
            args = typing.get_args(hint)
            elem = args[0]
            items = [p.strip() for p in raw.split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(elem(p) for p in items)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} values")
            return tuple(t(p) for t, p in zip(args, items))
    except ValueError as exc:
        raise ConfigError(f"invalid value {raw!r} for {key}: {exc}") from None
    raise ConfigError(f"unsupported type for {key}")


def parse_config(text: str) -> Config:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = Config()
    for section in parser.sections():
        cfg = cfg._set(section, dict(parser[section]))
    return cfg


def load_config(path: str | os.PathLike | None) -> Config:
    if path is None:
        return Config()
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
