"""Domain types, run configuration and risk-status discretization."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

TOKEN_SIDE = 16


class RiskStatus(enum.Enum):
    LOW = 0
    HIGH = 1
    UNDEFINED = -1


class Source(enum.Enum):
    TUMOR = "tumor"
    NORMAL = "normal"


def risk_status(time_months: float, event: int, T_r: float) -> RiskStatus:
    """Discretize a survival record against the clinical threshold ``T_r``.

    HIGH when the patient died at or before ``T_r``; LOW when observed past
    ``T_r`` (censored or not); UNDEFINED when censored at or before ``T_r``.
    """
    if time_months < 0 or not math.isfinite(time_months):
        raise ValueError(f"time_months must be a finite nonnegative number, got {time_months}")
    if T_r <= 0:
        raise ValueError(f"T_r must be positive, got {T_r}")
    if time_months > T_r:
        return RiskStatus.LOW
    if int(event) == 1:
        return RiskStatus.HIGH
    return RiskStatus.UNDEFINED


@dataclass(frozen=True)
class SurvivalRecord:
    time_months: float
    event: int
    T_r: float = 36.0
    predicted_risk: Optional[float] = None

    def __post_init__(self):
        if self.time_months < 0:
            raise ValueError(f"negative survival time {self.time_months}")
        if int(self.event) not in (0, 1):
            raise ValueError(f"event must be 0 or 1, got {self.event}")

    @property
    def risk_status(self) -> RiskStatus:
        return risk_status(self.time_months, self.event, self.T_r)


@dataclass(frozen=True)
class TilePyramid:
    """One instance: aligned tiles ordered coarse -> fine.

    Each tile is a float array in [0, 1] of shape (side, side); sides double
    from one level to the next.
    """

    tiles: tuple
    coordinates: tuple = (0, 0)

    def __post_init__(self):
        validate_pyramid(self.tiles)

    @property
    def n_levels(self) -> int:
        return len(self.tiles)


def validate_pyramid(tiles: Sequence[np.ndarray]) -> None:
    if len(tiles) < 1:
        raise ValueError("a tile pyramid needs at least one magnification level")
    prev = None
    for s, tile in enumerate(tiles):
        h, w = tile.shape[:2]
        if h != w:
            raise ValueError(f"level {s + 1}: tile must be square, got {h}x{w}")
        if h % TOKEN_SIDE:
            raise ValueError(f"level {s + 1}: tile side {h} is not divisible by {TOKEN_SIDE}")
        if prev is not None and h != 2 * prev:
            raise ValueError(f"level {s + 1}: side {h} is not twice the previous side {prev}")
        prev = h


@dataclass(frozen=True)
class Bag:
    patient_id: str
    instances: tuple
    survival: SurvivalRecord
    source: Source = Source.TUMOR

    def __post_init__(self):
        if len(self.instances) < 1:
            raise ValueError(f"bag {self.patient_id} has no instances")

    @property
    def risk_status(self) -> RiskStatus:
        # normal tissue never receives a risk label
        if self.source is Source.NORMAL:
            return RiskStatus.UNDEFINED
        return self.survival.risk_status

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    def level(self, s: int) -> np.ndarray:
        """Stack level ``s`` (0-based) of every instance: (N_n, side, side)."""
        return np.stack([inst.tiles[s] for inst in self.instances])


@dataclass
class RunConfig:
    # architecture
    S: int = 3
    tile_side: int = 128
    token_dim: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    dropout: float = 0.0
    N_B: int = 8
    D: int = 64
    D_B: int = 32
    D_hat: int = 32
    aggregator_hidden: int = 32
    # curriculum I
    T_r: float = 36.0
    iota: float = 0.4
    eta: float = 1e-3
    beta_omega: float = 1e-5
    beta_R: float = 1.0
    lr_c1: float = 1e-3
    batch_size_c1: int = 32
    epochs_pretrain: int = 6
    epochs_joint: int = 4
    patience: int = 5
    self_paced: bool = False
    # curriculum II
    kappa: float = 1.0
    beta_tcl: float = 1.0
    beta_adc: float = 0.1
    beta_s: float = 1e-4
    gumbel_temperature: float = 0.5
    literal_selection: bool = False
    lr_c2: float = 1e-2
    momentum_c2: float = 0.9
    grad_clip_c2: float = 1.0  # max gradient norm per update; 0 disables
    batch_size_c2: int = 64
    epochs_c2: int = 60
    normal_buffer_size: int = 16
    # evaluation / run
    mc_passes: int = 30
    mc_dropout: float = 0.1
    k_folds: int = 5
    val_fraction: float = 0.2
    dataset: str = "synthetic"
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("beta_omega", "beta_R", "beta_tcl", "beta_adc", "beta_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")
        if self.N_B < 1:
            raise ValueError("N_B must be at least 1")
        if not 0.0 <= self.iota <= 1.0:
            raise ValueError("iota must lie in [0, 1]")
        if self.gumbel_temperature <= 0:
            raise ValueError("gumbel_temperature must be positive")
        if self.grad_clip_c2 < 0:
            raise ValueError("grad_clip_c2 must be nonnegative")
        if self.S < 1:
            raise ValueError("S must be at least 1")
        if self.token_dim % self.n_heads:
            raise ValueError("token_dim must be divisible by n_heads")
        coarsest = self.tile_side >> (self.S - 1)
        if coarsest < TOKEN_SIDE or coarsest % TOKEN_SIDE:
            raise ValueError(f"coarsest tile side {coarsest} must be a positive multiple of {TOKEN_SIDE}")

    @property
    def tile_sides(self) -> list:
        """Tile side per branch, coarse -> fine."""
        return [self.tile_side >> (self.S - 1 - s) for s in range(self.S)]

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # flat ``key = value`` text format
    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, extra: Optional[dict] = None) -> "RunConfig":
        """Parse ``key = value`` lines. Keys with a dotted prefix (``synthetic.n_patients``)
        are collected into ``extra`` instead of the config."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if "." in key and extra is not None:
                extra[key] = value
                continue
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(value, types[key], key)
        return cls(**values)

    @classmethod
    def load(cls, path, extra: Optional[dict] = None) -> "RunConfig":
        return cls.loads(Path(path).read_text(), extra)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(text: str, typ: str, key: str):
    try:
        if typ == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        return text
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {text!r} as {typ}") from None
