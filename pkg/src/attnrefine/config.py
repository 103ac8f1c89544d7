"""Run configuration: one file with dotted sections, overridable from the command line.

Recognized sections are ``data.*`` (synthetic generator), ``train.*`` (training
loop), ``loss.*``, ``model.*`` and ``eval.*``. Files may be YAML or JSON and may
use nested mappings or flat dotted keys interchangeably.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import SyntheticConfig
from .losses import LossConfig
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("data", "train", "loss", "model", "eval")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot, such as ``5e-4``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                   |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                   |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                   |[-+]?\.(?:inf|Inf|INF)
                   |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _yaml_load(text: str):
    return yaml.load(text, Loader=_Loader)


class ConfigError(ValueError):
    """Invalid or unreadable configuration; the message names the offending key."""


@dataclass(frozen=True)
class EvalConfig:
    n_overlays: int = 8
    overlay_seed: int = 0

    def __post_init__(self):
        if self.n_overlays < 0:
            raise ValueError(f"eval.n_overlays must be >= 0, got {self.n_overlays}")


@dataclass(frozen=True)
class RunConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        m = self.train.model
        if (m.image_size, m.patch_size) != (self.data.image_size, self.data.patch_size):
            raise ConfigError(
                f"model.image_size/model.patch_size ({m.image_size}/{m.patch_size}) must match "
                f"data.image_size/data.patch_size ({self.data.image_size}/{self.data.patch_size})"
            )

    def to_dict(self) -> dict:
        train = asdict(self.train)
        d = {
            "data": self.data.to_dict(),
            "train": {k: v for k, v in train.items() if k not in ("loss", "model")},
            "loss": train["loss"],
            "model": train["model"],
            "eval": asdict(self.eval),
        }
        return json.loads(json.dumps(d))  # tuples become lists

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, data=replace(self.data, seed=seed), train=replace(self.train, seed=seed))


def flatten(d: dict, prefix: str = "") -> dict:
    """Nested mapping to dotted keys. ``data.findings`` stays a list."""
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key != "data.findings":
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _section_kwargs(flat: dict, section: str, cls) -> dict:
    names = {f.name for f in fields(cls)}
    kw = {}
    for key, value in flat.items():
        head, _, name = key.partition(".")
        if head != section:
            continue
        if section == "train" and name in ("loss", "model"):
            raise ConfigError(f"use the top-level {name}.* section instead of train.{name}")
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, list) and name != "findings":
            value = tuple(value)
        kw[name] = value
    return kw


def build_config(values: dict | None = None) -> RunConfig:
    """RunConfig from nested or dotted ``values``; unknown keys and bad values raise ConfigError."""
    flat = flatten(values or {})
    for key in flat:
        if key.partition(".")[0] not in SECTIONS or "." not in key:
            raise ConfigError(f"unknown config key {key!r}; sections are {', '.join(SECTIONS)}")
    try:
        data = SyntheticConfig.from_dict(_section_kwargs(flat, "data", SyntheticConfig))
        loss = LossConfig(**_section_kwargs(flat, "loss", LossConfig))
        model_kw = _section_kwargs(flat, "model", ModelConfig)
        model_kw.setdefault("image_size", data.image_size)
        model_kw.setdefault("patch_size", data.patch_size)
        model = ModelConfig(**model_kw)
        train = TrainConfig(loss=loss, model=model, **_section_kwargs(flat, "train", TrainConfig))
        ev = EvalConfig(**_section_kwargs(flat, "eval", EvalConfig))
        return RunConfig(data, train, ev)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def parse_override(item: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as YAML, so numbers and lists keep their types."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not of the form key=value")
    try:
        return key.strip(), _yaml_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value for {key!r}: {e}") from e


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    try:
        values = json.loads(text) if path.suffix == ".json" else _yaml_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config file {path}: {e}") from e
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must contain a mapping at top level")
    return values


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """File values, then ``key=value`` overrides, then ``seed`` (applied to data and train)."""
    flat = flatten(read_config_file(path)) if path else {}
    for item in overrides:
        key, value = parse_override(item)
        flat[key] = value
    if seed is not None:
        flat["data.seed"] = seed
        flat["train.seed"] = seed
    return build_config(flat)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
