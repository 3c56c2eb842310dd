"""Training configuration and its ``key = value`` text format.

Sections are ``[model]``, ``[train]``, ``[data]``, ``[loss]`` and ``[filter]``.
Unknown sections or keys are rejected; every key has a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .losses import LossWeights
from .model import EncoderSpec
from .spectral import FilterSpec


class ConfigError(ValueError):
    pass


# (section, key) for every TrainConfig field, in serialization order
LAYOUT = {
    "model": ("channels", "in_channels", "leaky_slope"),
    "loss": ("alpha", "beta"),
    "filter": ("filter_kind", "gamma", "gamma_square_weight"),
    "train": ("lr0", "t_max", "eta_min", "epochs", "batch_size", "seed",
              "grad_clip", "adam_beta1", "adam_beta2", "adam_eps"),
    "data": ("augment", "multiscale", "scales", "max_shift"),
}
# keys as written in the file where they differ from the attribute name
FILE_KEYS = {"filter_kind": "kind"}


@dataclass
class TrainConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    in_channels: int = 1
    leaky_slope: float = 0.01
    alpha: float = 0.01
    beta: float = 1.0
    filter_kind: str = "lowpass"
    gamma: float = 3.0
    gamma_square_weight: bool = True
    lr0: float = 1e-4
    t_max: int = 25
    eta_min: float = 1e-7
    epochs: int = 30
    batch_size: int = 4
    seed: int = 42
    grad_clip: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True
    multiscale: bool = True
    scales: tuple[float, ...] = (0.5, 1.0, 1.25)
    max_shift: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lr0", "t_max", "batch_size", "gamma", "in_channels"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "eta_min", "grad_clip", "max_shift", "seed", "leaky_slope"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        try:
            self.encoder_spec()
            self.filter_spec()
            self.loss_weights()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(list(self.channels), self.in_channels)

    def filter_spec(self) -> FilterSpec:
        return FilterSpec(self.filter_kind, self.gamma, self.gamma_square_weight)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def with_overrides(self, overrides: list[str]) -> "TrainConfig":
        """Apply ``section.key=value`` overrides."""
        changes = {}
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            lhs, value = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            attr = _attr_for(section, key.strip())
            changes[attr] = _parse_value(attr, value.strip())
        return replace(self, **changes)


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _attr_for(section: str, key: str) -> str:
    if section not in LAYOUT:
        raise ConfigError(f"unknown section [{section}]")
    for attr in LAYOUT[section]:
        if FILE_KEYS.get(attr, attr) == key:
            return attr
    raise ConfigError(f"unknown key {key!r} in [{section}]")


def _parse_value(attr: str, text: str):
    kind = _TYPES[attr]
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple[int, ...]":
            return tuple(int(t) for t in text.split(","))
        if kind == "tuple[float, ...]":
            return tuple(float(t) for t in text.split(","))
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {attr}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(cfg: TrainConfig) -> str:
    out = []
    for section, attrs in LAYOUT.items():
        out.append(f"[{section}]")
        for attr in attrs:
            out.append(f"{FILE_KEYS.get(attr, attr)} = {_format_value(getattr(cfg, attr))}")
        out.append("")
    return "\n".join(out)


def parse(text: str) -> TrainConfig:
    cp = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                   interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    values = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            attr = _attr_for(section, key)
            values[attr] = _parse_value(attr, raw)
    return TrainConfig(**values)


def load(path) -> TrainConfig:
    with open(path) as fh:
        return parse(fh.read())
