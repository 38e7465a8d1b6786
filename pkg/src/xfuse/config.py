"""Run configuration: dataclass, flat ``key = value`` file format, overrides."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

STAGES = ("seg-train", "map-gen", "cls-train", "eval", "ablate")


@dataclass
class RunConfig:
    seed: int = 0
    size: int = 64
    # model scale
    patch: int = 4
    embed_dim: int = 24
    depths: tuple[int, ...] = (2, 2)
    heads: tuple[int, ...] = (3, 3)
    window: int = 4
    mlp_ratio: int = 4
    decoder_widths: tuple[int, ...] = (24, 16, 8)
    block_dropout: float = 0.0
    head_dropout: float = 0.1
    patch_norm: bool = True
    relative_position_bias: bool = False
    # optimisation
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    seg_epochs: int = 30
    cls_epochs: int = 30
    milestones: tuple[float, ...] = (0.6, 0.85)
    lr_factor: float = 0.1
    # pipeline
    stage: str = "ablate"
    fusion: bool = True
    transfer: bool = True
    freeze_encoder: bool = False
    augment: bool = True
    seg_samples: int = 800
    cls_samples: int = 600
    seg_splits: tuple[float, ...] = (0.8, 0.1, 0.1)
    cls_splits: tuple[float, ...] = (0.396, 0.123, 0.481)
    seeds: int = 1
    cells: str = "all"
    out: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seg_epochs < 0 or self.cls_epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if any(not 0 < m <= 1 for m in self.milestones):
            raise ConfigError(f"milestones are epoch fractions in (0, 1], got {self.milestones}")
        if not 0 < self.lr_factor <= 1:
            raise ConfigError("lr_factor must lie in (0, 1]")
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {', '.join(STAGES)}")
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ConfigError("depths and heads must have the same non-zero length")
        for i, h in enumerate(self.heads):
            width = self.embed_dim * 2**i
            if h < 1 or width % h:
                raise ConfigError(f"stage {i} width {width} not divisible by {h} heads")
        unit = self.patch * 2 ** (len(self.depths) - 1) * self.window
        if self.size < unit or self.size % unit:
            raise ConfigError(f"size {self.size} must be a multiple of patch*2^(stages-1)*window = {unit}")
        if self.patch < 1 or self.patch & (self.patch - 1):
            raise ConfigError("patch must be a power of two")
        if len(self.decoder_widths) != self.decoder_levels:
            raise ConfigError(f"decoder_widths needs {self.decoder_levels} entries")
        for name in ("block_dropout", "head_dropout"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        for name in ("seg_splits", "cls_splits"):
            fr = getattr(self, name)
            if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
                raise ConfigError(f"{name} must be three non-negative fractions summing to 1")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if self.seg_samples < 0 or self.cls_samples < 0:
            raise ConfigError("sample counts must be non-negative")
        parse_cells(self.cells)

    @property
    def decoder_levels(self) -> int:
        return len(self.depths) - 1 + self.patch.bit_length() - 1

    def milestone_epochs(self, epochs: int) -> list[int]:
        return [int(round(m * epochs)) for m in self.milestones]

    def lr_at(self, epoch: int, epochs: int) -> float:
        passed = sum(1 for m in self.milestone_epochs(epochs) if m <= epoch)
        return self.lr * self.lr_factor**passed

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash64(self) -> int:
        """Stable hash of every setting except paths and the stage selector."""
        text = "\n".join(
            f"{f.name}={_format(getattr(self, f.name))}" for f in fields(self) if f.name not in ("out", "stage")
        )
        return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def parse_cells(text: str) -> list[tuple[bool, bool]]:
    """``all`` or comma-separated ``fusion:transfer`` pairs such as ``on:off``."""
    if text == "all":
        return [(False, False), (False, True), (True, False), (True, True)]
    cells = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 2:
            raise ConfigError(f"bad cell {item!r}; expected fusion:transfer like on:off")
        cells.append((parse_on_off(parts[0]), parse_on_off(parts[1])))
    return cells


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_on_off(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off, got {text!r}")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, text: str) -> Any:
    kind = _FIELD_TYPES[key]
    try:
        if kind == "bool":
            return parse_on_off(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple[int, ...]":
            return tuple(int(v) for v in text.split(","))
        if kind == "tuple[float, ...]":
            return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def parse_overrides(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    changes = {}
    for key, text in pairs.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse_value(key, text)
    return base.replace(**changes)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return parse_overrides(pairs, base)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)
