"""key=value configuration files.

Keys are dotted: ``net.*`` mirrors NetworkConfig, ``train.*`` TrainConfig,
``mask.*`` and ``data.*`` are listed below. ``#`` starts a comment, later
lines override earlier ones, and an unknown key is an error.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .network import NetworkConfig
from .trainer import TrainConfig


@dataclass
class MaskConfig:
    path: str = ""            # CorrMask file; empty means estimate from the training data
    threshold: float = 0.05
    radius: int = 10
    pseudo_clean: bool = False  # median-smoothed reference when no clean images exist


@dataclass
class DataConfig:
    val_count: int = 8        # trailing pairs with clean references held out for metrics


@dataclass
class Config:
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    data: DataConfig = field(default_factory=DataConfig)

    GROUPS = ("net", "train", "mask", "data")

    def set(self, key: str, raw: str) -> None:
        group, _, name = key.partition(".")
        if group not in self.GROUPS or not name:
            raise KeyError(f"unknown config key {key!r}")
        target = getattr(self, group)
        known = {f.name: f for f in fields(target)}
        if name not in known:
            raise KeyError(f"unknown config key {key!r}")
        setattr(target, name, parse_value(raw, getattr(type(target)(), name), key))

    def items(self) -> list[tuple[str, object]]:
        out = []
        for group in self.GROUPS:
            target = getattr(self, group)
            out += [(f"{group}.{f.name}", getattr(target, f.name)) for f in fields(target)]
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={format_value(v)}\n" for k, v in self.items())


def parse_value(raw: str, default, key: str = ""):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_lines(lines, cfg: Config | None = None) -> Config:
    cfg = cfg or Config()
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ValueError(f"line {n}: expected key=value, got {line.rstrip()!r}")
        key, raw = text.split("=", 1)
        cfg.set(key.strip(), raw)
    return cfg


def parse(text: str) -> Config:
    return parse_lines(text.splitlines())


def load(path: str | Path) -> Config:
    return parse(Path(path).read_text())


def documented_defaults() -> str:
    return Config().to_text()
