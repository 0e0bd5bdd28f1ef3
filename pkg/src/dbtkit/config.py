"""Pipeline constants and the key-value config file format.

A config file holds one ``key = value`` pair per line.  Blank lines and
lines starting with ``#`` are ignored.  Unknown keys are rejected so that a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass(frozen=True)
class Config:
    cell_size: int = 96
    anchor_size: int = 256
    crop_rows: int = 1056
    crop_cols: int = 672
    erosion_radius: int = 5
    max_score_ratio: float = 10.0
    min_iou: float = 0.5
    min_distance_px: float = 100.0
    z_fraction: float = 0.25
    patience: int = 25
    score_threshold: float = 0.0
    localization_weight: float = 1.0
    gamma: float = 2.0
    focal_threshold: float = 0.5

    def __post_init__(self):
        if self.cell_size <= 0 or self.anchor_size <= 0:
            raise ValueError("cell_size and anchor_size must be positive")
        if self.crop_rows <= 0 or self.crop_cols <= 0:
            raise ValueError("crop dimensions must be positive")
        if self.erosion_radius < 0:
            raise ValueError("erosion_radius must be >= 0")
        if self.max_score_ratio < 1:
            raise ValueError("max_score_ratio must be >= 1")
        if not 0 < self.min_iou <= 1:
            raise ValueError("min_iou must be in (0, 1]")
        if self.min_distance_px <= 0:
            raise ValueError("min_distance_px must be positive")
        if not 0 < self.z_fraction <= 0.5:
            raise ValueError("z_fraction must be in (0, 0.5]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 <= self.score_threshold <= 1:
            raise ValueError("score_threshold must be in [0, 1]")
        if not 0 < self.focal_threshold < 1:
            raise ValueError("focal_threshold must be in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    def overrides(self) -> dict:
        """Fields whose value differs from the default."""
        default = Config()
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if getattr(self, f.name) != getattr(default, f.name)
        }

    def digest(self) -> str:
        text = "\n".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


def parse_config(text: str) -> Config:
    types = {f.name: f.type for f in fields(Config)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = int(value) if types[key] == "int" else float(value)
        except ValueError:
            raise ValueError(f"config line {lineno}: bad value for {key}: {value!r}") from None
    return Config(**values)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(config: Config) -> str:
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in fields(config))
