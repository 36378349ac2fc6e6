"""Synthetic worlds and virtual species with known characteristic scales.

A world is two co-registered raster stacks: a coarse one (bioclim-like) and
a fine one (satellite-like).  Each virtual species responds logistically to
the mean of one band over a w x w window around a site, so the window side
w is the species' true spatial scale.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, optimize

from .errors import OutOfBounds
from .geodata import (
    GeoRaster,
    GeoTransform,
    OccurrenceTable,
    compute_band_stats,
    merge_po_records,
    write_grb,
    write_pa_csv,
    write_po_csv,
    write_species_list,
)


@dataclass
class RasterSpec:
    bands: int
    size: int  # square, pixels
    pixel_km: float
    blur: float = 0.0  # gaussian sigma in pixels


@dataclass
class WorldSpec:
    seed: int = 0
    coarse: RasterSpec = field(default_factory=lambda: RasterSpec(5, 96, 0.6, 0.0))
    fine: RasterSpec = field(default_factory=lambda: RasterSpec(4, 576, 0.1, 0.0))

    def __post_init__(self):
        if isinstance(self.coarse, dict):
            self.coarse = RasterSpec(**self.coarse)
        if isinstance(self.fine, dict):
            self.fine = RasterSpec(**self.fine)
        for r in (self.coarse, self.fine):
            if r.blur < 0:
                raise ValueError("blur radius must be >= 0")
        extent_c = self.coarse.size * self.coarse.pixel_km
        extent_f = self.fine.size * self.fine.pixel_km
        if not np.isclose(extent_c, extent_f):
            raise ValueError(f"coarse ({extent_c} km) and fine ({extent_f} km) rasters must cover the same extent")

    @property
    def extent_km(self) -> float:
        return self.coarse.size * self.coarse.pixel_km


@dataclass
class VirtualSpeciesSpec:
    species_id: str
    modality: str  # "coarse" | "fine"
    band: int
    window: int
    direction: int = 1
    steepness: float = 1.0
    offset: float = 0.0
    prevalence: float = 0.3

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("species window must be odd")
        if not 0 < self.prevalence < 1:
            raise ValueError("prevalence must be in (0, 1)")
        if self.direction not in (-1, 1):
            raise ValueError("direction must be +1 or -1")


@dataclass
class World:
    spec: WorldSpec
    rasters: dict[str, GeoRaster]


def _noise_band(rng: np.random.Generator, size: int, blur: float) -> np.ndarray:
    band = rng.standard_normal((size, size))
    if blur > 0:
        band = ndimage.gaussian_filter(band, blur, mode="wrap")
    band = (band - band.mean()) / band.std()
    return band.astype(np.float32)


def gen_world(spec: WorldSpec) -> World:
    """Seeded white noise per band, blurred and standardized; deterministic per seed."""
    rasters = {}
    streams = np.random.SeedSequence(spec.seed).spawn(2)
    for (name, rs), ss in zip((("coarse", spec.coarse), ("fine", spec.fine)), streams):
        rng = np.random.default_rng(ss)
        data = np.stack([_noise_band(rng, rs.size, rs.blur) for _ in range(rs.bands)])
        transform = GeoTransform(0.0, spec.extent_km, rs.pixel_km, rs.pixel_km, "synthetic-km")
        raster = GeoRaster(data, transform, tuple(f"{name}_{b}" for b in range(rs.bands)), name=name)
        rasters[name] = compute_band_stats(raster)
    return World(spec, rasters)


def window_means(raster: GeoRaster, band: int, window: int, lon, lat) -> np.ndarray:
    """Mean of ``band`` over the centered window at each site, from the window's pixels only."""
    t = raster.transform
    lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
    lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
    cols = np.floor((lon - t.origin_x) / t.pixel_size_x).astype(np.int64)
    rows = np.floor((t.origin_y - lat) / t.pixel_size_y).astype(np.int64)
    h = window // 2
    if (rows - h < 0).any() or (cols - h < 0).any() or (rows + h >= raster.height).any() or (cols + h >= raster.width).any():
        raise OutOfBounds(f"{window}x{window} window leaves raster {raster.name}")
    views = np.lib.stride_tricks.sliding_window_view(raster.data[band], (window, window))
    return views[rows - h, cols - h].astype(np.float64).mean(axis=(1, 2))


def _logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def suitability(world: World, sp: VirtualSpeciesSpec, lon, lat) -> np.ndarray:
    m = window_means(world.rasters[sp.modality], sp.band, sp.window, lon, lat)
    return _logistic(sp.steepness * sp.direction * m + sp.offset)


def interior_bounds(world: World, margin_km: float) -> tuple[float, float, float, float]:
    e = world.spec.extent_km
    return (margin_km, margin_km, e - margin_km, e - margin_km)


def margin_for(world: World, species: list[VirtualSpeciesSpec], extra_scales: dict[str, int] | None = None) -> float:
    """Half the largest window (species or model scale) in km, plus one pixel."""
    margin = 0.0
    sizes: list[tuple[str, int]] = [(sp.modality, sp.window) for sp in species]
    sizes += list((extra_scales or {}).items())
    for modality, w in sizes:
        px = world.rasters[modality].transform.pixel_size_x
        margin = max(margin, (w // 2 + 1) * px)
    return margin


def uniform_sites(world: World, n: int, margin_km: float, rng: np.random.Generator):
    x0, y0, x1, y1 = interior_bounds(world, margin_km)
    return rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)


def calibrate_species(
    world: World, sp: VirtualSpeciesSpec, margin_km: float, seed: int = 0, n_sites: int = 1000
) -> VirtualSpeciesSpec:
    """Rescale steepness to window-mean std units and set the offset so mean suitability hits prevalence."""
    rng = np.random.default_rng(seed)
    lon, lat = uniform_sites(world, n_sites, margin_km, rng)
    m = window_means(world.rasters[sp.modality], sp.band, sp.window, lon, lat)
    alpha = sp.steepness / m.std()
    z = alpha * sp.direction * m

    def gap(beta):
        return _logistic(z + beta).mean() - sp.prevalence

    beta = optimize.brentq(gap, -50.0, 50.0, xtol=1e-10)
    return VirtualSpeciesSpec(sp.species_id, sp.modality, sp.band, sp.window, sp.direction, float(alpha), float(beta), sp.prevalence)


def bias_field(world: World, strength: float, seed: int) -> tuple[np.ndarray, float]:
    """Low-frequency multiplicative sampling intensity on the coarse grid.

    ``strength`` is the max/min density ratio; 1 means uniform sampling.
    """
    size = world.spec.coarse.size
    if strength <= 1:
        return np.ones((size, size)), world.spec.coarse.pixel_km
    rng = np.random.default_rng(seed)
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 6, mode="wrap")
    field_ = (field_ - field_.min()) / (field_.max() - field_.min())
    return strength ** field_, world.spec.coarse.pixel_km


def sample_occurrences(
    world: World,
    species: list[VirtualSpeciesSpec],
    n_po: int,
    n_pa: int,
    seed: int,
    *,
    bias_strength: float = 2.0,
    margin_km: float | None = None,
    n_dates: int = 12,
) -> tuple[OccurrenceTable, OccurrenceTable, list[tuple[float, float, str, str]]]:
    """PA sites on a uniform interior grid, PO sites drawn under a sampling bias.

    Returns (merged PO table, PA table, raw PO records).
    """
    if n_po < 1 or n_pa < 1:
        raise ValueError("n_po and n_pa must be >= 1")
    if margin_km is None:
        margin_km = margin_for(world, species)
    ids = [sp.species_id for sp in species]
    pa_ss, po_ss, bias_ss = np.random.SeedSequence(seed).spawn(3)
    x0, y0, x1, y1 = interior_bounds(world, margin_km)

    # presence-absence: regular grid
    nx = int(np.ceil(np.sqrt(n_pa)))
    ny = int(np.ceil(n_pa / nx))
    gx = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    gy = y1 - (np.arange(ny) + 0.5) * (y1 - y0) / ny
    lat, lon = (a.ravel()[:n_pa] for a in np.meshgrid(gy, gx, indexing="ij"))
    rng = np.random.default_rng(pa_ss)
    probs = np.stack([suitability(world, sp, lon, lat) for sp in species], axis=1)
    labels = (rng.random(probs.shape) < probs).astype(np.uint8)
    pa = OccurrenceTable("PA", ids, lon, lat, labels, [f"pa{i:05d}" for i in range(n_pa)])

    # presence-only: biased rejection sampling, empty sites redrawn
    intensity, cell = bias_field(world, bias_strength, int(np.random.default_rng(bias_ss).integers(2**31)))
    rng = np.random.default_rng(po_ss)
    fine_px = world.spec.fine.pixel_km
    top = intensity.max()
    raw: list[tuple[float, float, str, str]] = []
    n_sites = 0
    while n_sites < n_po:
        need = n_po - n_sites
        cand = max(64, 2 * need)
        cx = rng.uniform(x0, x1, cand)
        cy = rng.uniform(y0, y1, cand)
        # snap to fine pixel centers so repeated visits share coordinates
        cx = (np.floor(cx / fine_px) + 0.5) * fine_px
        cy = (np.floor(cy / fine_px) + 0.5) * fine_px
        ci = np.clip((world.spec.extent_km - cy) // cell, 0, intensity.shape[0] - 1).astype(int)
        cj = np.clip(cx // cell, 0, intensity.shape[1] - 1).astype(int)
        keep = rng.random(cand) < intensity[ci, cj] / top
        cx, cy = cx[keep], cy[keep]
        if not len(cx):
            continue
        p = np.stack([suitability(world, sp, cx, cy) for sp in species], axis=1)
        present = rng.random(p.shape) < p
        dates = rng.integers(0, n_dates, len(cx))
        for i in np.flatnonzero(present.any(axis=1))[:need]:
            date = f"2023-{dates[i] + 1:02d}-01"
            for j in np.flatnonzero(present[i]):
                raw.append((float(cx[i]), float(cy[i]), date, ids[j]))
            n_sites += 1
    po = merge_po_records(raw, ids)
    return po, pa, raw


@dataclass
class SynthConfig:
    world: WorldSpec
    species: list[VirtualSpeciesSpec]
    n_po: int = 5000
    n_pa: int = 800
    seed: int = 0
    bias_strength: float = 2.0
    margin_scales: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        world_d = dict(d.get("world", {}))
        world_d.setdefault("seed", int(d.get("seed", 0)))
        world = WorldSpec(**world_d)
        species = []
        for i, s in enumerate(d["species"]):
            s = dict(s)
            s.setdefault("species_id", f"sp{i:02d}")
            species.append(VirtualSpeciesSpec(**s))
        return cls(
            world, species,
            int(d.get("n_po", 5000)), int(d.get("n_pa", 800)), int(d.get("seed", 0)),
            float(d.get("bias_strength", 2.0)), dict(d.get("margin_scales", {})),
        )

    def to_dict(self) -> dict:
        return {
            "world": asdict(self.world),
            "species": [asdict(s) for s in self.species],
            "n_po": self.n_po,
            "n_pa": self.n_pa,
            "seed": self.seed,
            "bias_strength": self.bias_strength,
            "margin_scales": dict(self.margin_scales),
        }


@dataclass
class Dataset:
    world: World
    species: list[VirtualSpeciesSpec]
    po: OccurrenceTable
    pa: OccurrenceTable
    raw_po: list
    margin_km: float


def synthesize(cfg: SynthConfig) -> Dataset:
    world = gen_world(cfg.world)
    margin = margin_for(world, cfg.species, cfg.margin_scales)
    species = [calibrate_species(world, sp, margin, seed=cfg.seed + 1 + i) for i, sp in enumerate(cfg.species)]
    po, pa, raw = sample_occurrences(
        world, species, cfg.n_po, cfg.n_pa, cfg.seed, bias_strength=cfg.bias_strength, margin_km=margin
    )
    return Dataset(world, species, po, pa, raw, margin)


def write_dataset(ds: Dataset, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "coarse": out / "coarse.grb",
        "fine": out / "fine.grb",
        "species": out / "species.csv",
        "po": out / "po.csv",
        "pa": out / "pa.csv",
        "truth": out / "truth.json",
    }
    write_grb(ds.world.rasters["coarse"], paths["coarse"])
    write_grb(ds.world.rasters["fine"], paths["fine"])
    write_species_list(ds.po.species_ids, paths["species"])
    write_po_csv(ds.raw_po, paths["po"])
    write_pa_csv(ds.pa, paths["pa"])
    truth = {
        "species": [asdict(s) for s in ds.species],
        "margin_km": ds.margin_km,
        "n_po_sites": len(ds.po),
        "n_po_records": len(ds.raw_po),
        "n_pa_sites": len(ds.pa),
        "pa_prevalence": {sid: float(p) for sid, p in zip(ds.pa.species_ids, ds.pa.labels.mean(axis=0))},
    }
    paths["truth"].write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
