"""Synthetic multi-magnification cohorts and ingestion of pre-tiled directories."""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .core import TOKEN_SIDE, Bag, Source, SurvivalRecord, TilePyramid, validate_pyramid

log = logging.getLogger(__name__)

MANIFEST_HEAD = ["patient_id", "source", "time_months", "event"]


@dataclass(frozen=True)
class Texture:
    mean: float
    stripe_freq: float  # cycles per tile side, identical at every magnification
    stripe_amp: float
    noise: float = 0.04


DEFAULT_TEXTURES = {
    "benign": Texture(mean=0.35, stripe_freq=2.0, stripe_amp=0.10),
    "lesion": Texture(mean=0.65, stripe_freq=6.0, stripe_amp=0.15),
}


@dataclass
class SyntheticSpec:
    n_patients: int = 60
    n_normals: int = 8
    instances_per_bag: tuple = (12, 16)
    lesion_fraction_range: tuple = (0.0, 0.8)
    # draw f from the two endpoints of the range instead of uniformly
    bimodal: bool = True
    baseline_hazard: float = 1.0 / 200.0
    hazard_multiplier: float = 316.0
    censoring_rate: float = 0.1
    texture_params: dict = field(default_factory=lambda: dict(DEFAULT_TEXTURES))
    tile_side: int = 128
    S: int = 3
    T_r: float = 36.0
    rng_seed: int = 0

    def validate(self) -> None:
        lo, hi = self.instances_per_bag
        if lo < 1 or hi < lo:
            raise ValueError(f"instances_per_bag must be a nonempty range, got {self.instances_per_bag}")
        flo, fhi = self.lesion_fraction_range
        if not 0.0 <= flo <= fhi <= 1.0:
            raise ValueError(f"lesion_fraction_range must be an interval in [0, 1], got {self.lesion_fraction_range}")
        if self.n_patients < 0 or self.n_normals < 0:
            raise ValueError("patient counts must be nonnegative")
        if self.baseline_hazard <= 0 or self.hazard_multiplier <= 0:
            raise ValueError("baseline_hazard and hazard_multiplier must be positive")
        if not 0.0 <= self.censoring_rate <= 1.0:
            raise ValueError("censoring_rate must lie in [0, 1]")
        if set(self.texture_params) != {"benign", "lesion"}:
            raise ValueError("texture_params needs exactly the classes 'benign' and 'lesion'")
        coarsest = self.tile_side >> (self.S - 1)
        if coarsest < TOKEN_SIDE or coarsest % TOKEN_SIDE:
            raise ValueError(f"coarsest tile side {coarsest} must be a multiple of {TOKEN_SIDE}")


def bag_rng(seed: int, patient_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(patient_id.encode())])


def _texture(rng, side: int, tex: Texture) -> np.ndarray:
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:side, 0:side] / side
    stripes = np.sin(2 * np.pi * tex.stripe_freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return tex.mean + tex.stripe_amp * stripes + tex.noise * rng.standard_normal((side, side))


def make_pyramid(rng, side: int, S: int, lesion: bool, textures: dict, coords=(0, 0)) -> TilePyramid:
    """Render the finest tile, then average-pool down to the coarser levels."""
    fine = _texture(rng, side, textures["benign"])
    if lesion:
        # at least two quadrants carry lesion texture
        patch = _texture(rng, side, textures["lesion"])
        quads = np.zeros(4, bool)
        quads[rng.choice(4, size=int(rng.integers(2, 5)), replace=False)] = True
        h = side // 2
        for q in np.flatnonzero(quads):
            r, c = divmod(int(q), 2)
            fine[r * h:(r + 1) * h, c * h:(c + 1) * h] = patch[r * h:(r + 1) * h, c * h:(c + 1) * h]
    fine = np.round(np.clip(fine, 0.0, 1.0) * 255.0) / 255.0
    levels = [fine]
    for _ in range(S - 1):
        a = levels[0]
        levels.insert(0, np.round(a.reshape(a.shape[0] // 2, 2, a.shape[1] // 2, 2).mean(axis=(1, 3)) * 255.0) / 255.0)
    return TilePyramid(tiles=tuple(lv.astype(np.float32) for lv in levels), coordinates=tuple(coords))


def generate_cohort(spec: SyntheticSpec):
    """Generate tumor and normal bags with a planted log-linear hazard.

    Returns ``(bags, truth)`` where ``truth`` is a list of dicts holding the
    lesion fraction and latent event time of every bag.
    """
    spec.validate()
    bags, truth = [], []
    flo, fhi = spec.lesion_fraction_range
    for n in range(spec.n_patients + spec.n_normals):
        tumor = n < spec.n_patients
        pid = f"P{n:04d}" if tumor else f"N{n - spec.n_patients:04d}"
        rng = bag_rng(spec.rng_seed, pid)
        n_inst = int(rng.integers(spec.instances_per_bag[0], spec.instances_per_bag[1] + 1))
        if tumor:
            f = (fhi if rng.random() < 0.5 else flo) if spec.bimodal else float(rng.uniform(flo, fhi))
        else:
            f = 0.0
        n_lesion = int(round(f * n_inst))
        lesion = np.zeros(n_inst, bool)
        lesion[rng.permutation(n_inst)[:n_lesion]] = True
        grid = int(np.ceil(np.sqrt(n_inst)))
        instances = tuple(
            make_pyramid(rng, spec.tile_side, spec.S, bool(lesion[i]), spec.texture_params, divmod(i, grid))
            for i in range(n_inst)
        )
        if tumor:
            rate = spec.baseline_hazard * spec.hazard_multiplier ** f
            latent = float(rng.exponential(1.0 / rate))
            if rng.random() < spec.censoring_rate:
                time, event = float(rng.uniform(0.0, latent)), 0
            else:
                time, event = latent, 1
            record = SurvivalRecord(time, event, spec.T_r)
        else:
            latent = float("nan")
            record = SurvivalRecord(0.0, 0, spec.T_r)
        bags.append(Bag(pid, instances, record, Source.TUMOR if tumor else Source.NORMAL))
        truth.append({
            "patient_id": pid,
            "source": "tumor" if tumor else "normal",
            "lesion_fraction": f,
            "n_lesion": n_lesion,
            "n_instances": n_inst,
            "latent_time": latent,
            "time_months": record.time_months,
            "event": record.event,
            "lesion_mask": lesion.tolist(),
        })
    return bags, truth


def oracle_c_index(truth) -> float:
    """Concordance of the planted lesion fraction with observed survival.

    Pairs tied in lesion fraction are left out: they carry no ordering
    information, and counting them as half-concordant would cap a two-point
    planted signal near 0.75. Without any untied comparable pair the signal
    carries no ordering and the oracle is 0.5.
    """
    from .metrics import concordance_index

    rows = [t for t in truth if t["source"] == "tumor"]
    try:
        return concordance_index(
            [r["time_months"] for r in rows],
            [r["event"] for r in rows],
            [r["lesion_fraction"] for r in rows],
            tie_credit=None,
        )
    except ValueError:
        return 0.5


def write_cohort(bags, truth, out_dir) -> Path:
    """Write tiles as 8-bit PNG plus ``manifest.csv`` and ``ground_truth.csv``."""
    out = Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    S = bags[0].instances[0].n_levels if bags else 0
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEAD + [f"tile_{s + 1}" for s in range(S)] + ["row", "col"])
        for bag in bags:
            (out / "tiles" / bag.patient_id).mkdir(exist_ok=True)
            for i, inst in enumerate(bag.instances):
                paths = []
                for s, tile in enumerate(inst.tiles):
                    rel = Path("tiles") / bag.patient_id / f"{i:03d}_s{s + 1}.png"
                    Image.fromarray(np.round(tile * 255).astype(np.uint8), mode="L").save(out / rel)
                    paths.append(rel.as_posix())
                w.writerow([bag.patient_id, bag.source.value, repr(bag.survival.time_months),
                            bag.survival.event, *paths, *inst.coordinates])
    with open(out / "ground_truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["patient_id", "source", "lesion_fraction", "n_lesion", "n_instances",
                "latent_time", "time_months", "event"]
        w.writerow(cols)
        for t in truth:
            w.writerow([repr(t[c]) if isinstance(t[c], float) else t[c] for c in cols])
    return out / "manifest.csv"


class TileError(ValueError):
    """A tile is missing, unreadable, or violates the pyramid geometry."""


def _load_tile(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise TileError(f"missing tile {path}") from None
    except OSError as exc:
        raise TileError(f"unreadable tile {path}: {exc}") from None
    return arr


def ingest_tiles(root_path, manifest, T_r: float = 36.0) -> list:
    """Build bags from a CSV manifest of tile paths (relative to ``root_path``).

    One manifest row per instance; tile columns ``tile_1..tile_S`` are ordered
    coarse -> fine. Optional ``row``/``col`` columns give grid coordinates.
    """
    root = Path(root_path)
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    if not rows:
        return []
    if header[:4] != MANIFEST_HEAD:
        raise ValueError(f"manifest header must start with {MANIFEST_HEAD}, got {header[:4]}")
    tile_cols = [c for c in header if c.startswith("tile_")]
    if not tile_cols:
        raise TileError("manifest has no tile columns")

    grouped: dict = {}
    for row in rows:
        grouped.setdefault(row["patient_id"], []).append(row)

    bags = []
    for pid, group in grouped.items():
        first = group[0]
        instances = []
        for i, row in enumerate(group):
            paths = [row[c] for c in tile_cols]
            missing = [c for c, p in zip(tile_cols, paths) if not p]
            if missing:
                raise TileError(f"{pid} instance {i}: missing magnification level(s) {missing}")
            tiles = [_load_tile(root / p) for p in paths]
            try:
                validate_pyramid(tiles)
            except ValueError as exc:
                raise TileError(f"{pid} instance {i}: {exc}") from None
            coords = (int(row.get("row") or i), int(row.get("col") or 0))
            instances.append(TilePyramid(tuple(tiles), coords))
        source = Source(first["source"].strip().lower())
        record = SurvivalRecord(float(first["time_months"]), int(first["event"]), T_r)
        bags.append(Bag(pid, tuple(instances), record, source))
    return bags
