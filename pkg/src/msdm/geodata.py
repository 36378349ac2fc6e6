"""Georeferenced rasters, occurrence tables and centered patch extraction.

Rasters use a north-up affine grid: ``origin`` is the outer corner of pixel
(0, 0), columns grow eastward and rows grow southward.  Patches are always
odd-sized and centered on the pixel that contains the query coordinate.
Windows that cross the raster edge or touch a nodata pixel are rejected
rather than padded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateBand,
    FormatError,
    NodataInWindow,
    OutOfBounds,
    UnknownSpecies,
)

GRB_MAGIC = "GRB1"


@dataclass(frozen=True)
class GeoTransform:
    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float
    crs_label: str = ""

    def __post_init__(self):
        if not (self.pixel_size_x > 0 and self.pixel_size_y > 0):
            raise ValueError("pixel sizes must be positive")

    def to_pixel(self, x: float, y: float) -> tuple[int, int]:
        # boundary coordinates belong to the higher-index cell
        col = math.floor((x - self.origin_x) / self.pixel_size_x)
        row = math.floor((self.origin_y - y) / self.pixel_size_y)
        return row, col

    def to_world(self, row: float, col: float) -> tuple[float, float]:
        """World coordinate of the center of pixel (row, col)."""
        x = self.origin_x + (col + 0.5) * self.pixel_size_x
        y = self.origin_y - (row + 0.5) * self.pixel_size_y
        return x, y


@dataclass(frozen=True, eq=False)
class GeoRaster:
    data: np.ndarray  # (bands, height, width) float32, read-only
    transform: GeoTransform
    band_names: tuple[str, ...]
    nodata: tuple[float | None, ...] | None = None
    band_stats: tuple[tuple[float, float], ...] | None = None
    name: str = ""

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3:
            raise ValueError(f"raster data must be (bands, height, width), got {data.shape}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        if len(self.band_names) != data.shape[0]:
            raise ValueError("band_names length does not match band count")
        object.__setattr__(self, "band_names", tuple(self.band_names))
        if self.nodata is not None:
            nd = tuple(self.nodata)
            if len(nd) == 1 and data.shape[0] > 1:
                nd = nd * data.shape[0]
            if len(nd) != data.shape[0]:
                raise ValueError("nodata must have one entry per band")
            object.__setattr__(self, "nodata", nd)
        if self.band_stats is not None:
            stats = tuple((float(m), float(s)) for m, s in self.band_stats)
            if len(stats) != data.shape[0]:
                raise ValueError("band_stats must have one entry per band")
            if any(not s > 0 for _, s in stats):
                raise ValueError("band std must be positive")
            object.__setattr__(self, "band_stats", stats)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(min_x, min_y, max_x, max_y)"""
        t = self.transform
        return (
            t.origin_x,
            t.origin_y - self.height * t.pixel_size_y,
            t.origin_x + self.width * t.pixel_size_x,
            t.origin_y,
        )

    def valid_mask(self) -> np.ndarray:
        """Boolean (bands, H, W) mask of pixels that are not nodata."""
        mask = np.isfinite(self.data)
        if self.nodata is not None:
            for b, nd in enumerate(self.nodata):
                if nd is not None and not math.isnan(nd):
                    mask[b] &= self.data[b] != np.float32(nd)
        return mask

    def with_stats(self, stats) -> "GeoRaster":
        return replace(self, band_stats=tuple(stats))


def world_to_pixel(raster: GeoRaster, lon: float, lat: float) -> tuple[int, int]:
    row, col = raster.transform.to_pixel(lon, lat)
    if not (0 <= row < raster.height and 0 <= col < raster.width):
        raise OutOfBounds(f"({lon}, {lat}) lies outside raster {raster.name or ''}".rstrip())
    return row, col


def pixel_to_world(raster: GeoRaster, row: int, col: int) -> tuple[float, float]:
    return raster.transform.to_world(row, col)


def compute_band_stats(raster: GeoRaster) -> GeoRaster:
    """Population mean/std per band over valid pixels; returns a raster carrying them."""
    mask = raster.valid_mask()
    stats = []
    for b in range(raster.bands):
        vals = raster.data[b][mask[b]].astype(np.float64)
        if vals.size < 2:
            raise DegenerateBand(f"band {raster.band_names[b]!r} has fewer than 2 valid pixels")
        mean = vals.mean()
        std = vals.std()
        if not std > 0:
            raise DegenerateBand(f"band {raster.band_names[b]!r} is constant")
        stats.append((float(mean), float(std)))
    return raster.with_stats(stats)


@dataclass(frozen=True)
class Patch:
    modality: str
    center: tuple[float, float]
    size: int
    values: np.ndarray  # (bands, size, size) float32


def _check_size(size: int) -> None:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"patch size must be odd and >= 1, got {size}")


def _normalize(raster: GeoRaster, window: np.ndarray) -> np.ndarray:
    if raster.band_stats is None:
        raise ValueError("raster has no band statistics; run compute_band_stats first")
    mean = np.array([m for m, _ in raster.band_stats], dtype=np.float32)
    std = np.array([s for _, s in raster.band_stats], dtype=np.float32)
    # (bands, k, k) or (n, bands, k, k)
    shape = (-1, 1, 1) if window.ndim == 3 else (1, -1, 1, 1)
    return ((window - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)


def extract_patch(raster: GeoRaster, center: tuple[float, float], size: int) -> Patch:
    _check_size(size)
    row, col = world_to_pixel(raster, *center)
    h = size // 2
    r0, c0 = row - h, col - h
    if r0 < 0 or c0 < 0 or row + h >= raster.height or col + h >= raster.width:
        raise OutOfBounds(f"{size}x{size} window at {center} crosses the raster edge")
    window = raster.data[:, r0 : r0 + size, c0 : c0 + size]
    if not raster.valid_mask()[:, r0 : r0 + size, c0 : c0 + size].all():
        raise NodataInWindow(f"nodata inside {size}x{size} window at {center}")
    return Patch(raster.name, (float(center[0]), float(center[1])), size, _normalize(raster, window))


class PatchSampler:
    """Vectorized patch extraction for many coordinates at once.

    Validity (edge and nodata checks) is resolved once per coordinate set so
    batch assembly only gathers windows.
    """

    def __init__(self, raster: GeoRaster, size: int):
        _check_size(size)
        if raster.band_stats is None:
            raise ValueError("raster has no band statistics")
        self.raster = raster
        self.size = size
        self._views = np.lib.stride_tricks.sliding_window_view(raster.data, (size, size), axis=(1, 2))
        invalid = (~raster.valid_mask()).any(axis=0).astype(np.int64)
        # window sums of the invalid mask via a summed-area table (integer, exact)
        sat = np.zeros((raster.height + 1, raster.width + 1), dtype=np.int64)
        sat[1:, 1:] = invalid.cumsum(0).cumsum(1)
        self._sat = sat

    def locate(self, lon: np.ndarray, lat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel rows/cols and a status array: 0 ok, 1 out of bounds, 2 nodata."""
        t = self.raster.transform
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        cols = np.floor((lon - t.origin_x) / t.pixel_size_x).astype(np.int64)
        rows = np.floor((t.origin_y - lat) / t.pixel_size_y).astype(np.int64)
        h = self.size // 2
        inside = (rows - h >= 0) & (cols - h >= 0) & (rows + h < self.raster.height) & (cols + h < self.raster.width)
        status = np.where(inside, 0, 1)
        r0 = np.where(inside, rows - h, 0)
        c0 = np.where(inside, cols - h, 0)
        k = self.size
        s = self._sat
        bad = s[r0 + k, c0 + k] - s[r0, c0 + k] - s[r0 + k, c0] + s[r0, c0]
        status = np.where(inside & (bad > 0), 2, status)
        return rows, cols, status

    def gather(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """(n, bands, k, k) normalized windows; rows/cols must be valid."""
        h = self.size // 2
        win = self._views[:, rows - h, cols - h]  # (bands, n, k, k)
        return _normalize(self.raster, np.ascontiguousarray(win.transpose(1, 0, 2, 3)))


class SitePatches:
    """Per-site patch availability across modalities for one occurrence table.

    A site is usable only if every modality's window is in bounds and free of
    nodata; the rest are counted in ``skipped``.
    """

    def __init__(self, table: "OccurrenceTable", samplers: dict[str, PatchSampler]):
        self.samplers = samplers
        self._rc = {}
        ok = np.ones(len(table), dtype=bool)
        self.status = {}
        for name, sampler in samplers.items():
            rows, cols, status = sampler.locate(table.lon, table.lat)
            self._rc[name] = (rows, cols)
            self.status[name] = status
            ok &= status == 0
        self.valid_idx = np.flatnonzero(ok)
        self.skipped = int(len(table) - len(self.valid_idx))

    def inputs(self, idx) -> dict[str, np.ndarray]:
        idx = np.asarray(idx)
        return {name: s.gather(self._rc[name][0][idx], self._rc[name][1][idx]) for name, s in self.samplers.items()}


def footprint(size: int, pixel_ground_size: float) -> tuple[float, float]:
    """Ground side length and area covered by a ``size`` pixel square patch.

    Computed in decimal so that e.g. 115 x 0.01 km gives exactly 1.3225 km2.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    side = Decimal(size) * Decimal(repr(float(pixel_ground_size)))
    return float(side), float(side * side)


def round_half_up(value: float, places: int = 2) -> str:
    """Round the shortest repr of ``value`` in decimal, halves away from zero."""
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


# ---------------------------------------------------------------------------
# GRB1 raster files


def _fmt_float(v: float | None) -> str:
    if v is None:
        return "none"
    return repr(float(v))


def _parse_float(s: str) -> float | None:
    s = s.strip()
    if s.lower() == "none":
        return None
    return float(s)


def write_grb(raster: GeoRaster, path: str | Path) -> None:
    t = raster.transform
    lines = [
        f"magic: {GRB_MAGIC}",
        f"name: {raster.name}",
        f"bands: {raster.bands}",
        f"height: {raster.height}",
        f"width: {raster.width}",
        f"origin_x: {_fmt_float(t.origin_x)}",
        f"origin_y: {_fmt_float(t.origin_y)}",
        f"pixel_size_x: {_fmt_float(t.pixel_size_x)}",
        f"pixel_size_y: {_fmt_float(t.pixel_size_y)}",
        f"crs: {t.crs_label}",
        "nodata: " + (",".join(_fmt_float(v) for v in raster.nodata) if raster.nodata else "none"),
        "band_names: " + ",".join(raster.band_names),
    ]
    if raster.band_stats is not None:
        lines.append("band_means: " + ",".join(_fmt_float(m) for m, _ in raster.band_stats))
        lines.append("band_stds: " + ",".join(_fmt_float(s) for _, s in raster.band_stats))
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raster.data.astype("<f4").tobytes(order="C"))


def read_grb(path: str | Path) -> GeoRaster:
    blob = Path(path).read_bytes()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise FormatError(f"{path}: missing header terminator")
    meta: dict[str, str] = {}
    for line in blob[:sep].decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        meta[key.strip()] = value.strip()
    if meta.get("magic") != GRB_MAGIC:
        raise FormatError(f"{path}: not a {GRB_MAGIC} file")
    try:
        bands, height, width = int(meta["bands"]), int(meta["height"]), int(meta["width"])
        transform = GeoTransform(
            float(meta["origin_x"]),
            float(meta["origin_y"]),
            float(meta["pixel_size_x"]),
            float(meta["pixel_size_y"]),
            meta.get("crs", ""),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from exc
    payload = blob[sep + 2 :]
    expected = bands * height * width * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(bands, height, width)
    names = tuple(meta.get("band_names", "").split(",")) if meta.get("band_names") else tuple(
        f"b{i}" for i in range(bands)
    )
    nodata_raw = meta.get("nodata", "none")
    nodata = None if nodata_raw.lower() == "none" else tuple(_parse_float(v) for v in nodata_raw.split(","))
    stats = None
    if "band_means" in meta and "band_stds" in meta:
        means = [float(v) for v in meta["band_means"].split(",")]
        stds = [float(v) for v in meta["band_stds"].split(",")]
        stats = tuple(zip(means, stds))
    return GeoRaster(data, transform, names, nodata, stats, meta.get("name", Path(path).stem))


# ---------------------------------------------------------------------------
# occurrences


@dataclass
class OccurrenceTable:
    kind: str  # "PO" or "PA"
    species_ids: list[str]
    lon: np.ndarray
    lat: np.ndarray
    labels: np.ndarray  # (n_sites, n_species) uint8 multi-hot
    keys: list[str] = field(default_factory=list)  # date tag (PO) or site id (PA)

    def __post_init__(self):
        self.lon = np.asarray(self.lon, dtype=np.float64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(len(self.lon), len(self.species_ids))
        if self.kind not in ("PO", "PA"):
            raise ValueError(f"kind must be PO or PA, got {self.kind!r}")
        if not self.keys:
            self.keys = [str(i) for i in range(len(self.lon))]

    def __len__(self) -> int:
        return len(self.lon)

    @property
    def n_species(self) -> int:
        return len(self.species_ids)

    def positives_per_species(self) -> np.ndarray:
        return self.labels.sum(axis=0, dtype=np.int64)

    def subset(self, idx) -> "OccurrenceTable":
        idx = np.asarray(idx)
        return OccurrenceTable(
            self.kind, list(self.species_ids), self.lon[idx], self.lat[idx], self.labels[idx],
            [self.keys[i] for i in np.arange(len(self))[idx]],
        )


def merge_po_records(
    raw: Iterable[tuple[float, float, str, str]], species_ids: Sequence[str]
) -> OccurrenceTable:
    """Merge raw presence records sharing (lon, lat, date) into multi-hot rows.

    Row order follows the first appearance of each key.
    """
    index = {sid: i for i, sid in enumerate(species_ids)}
    rows: dict[tuple[float, float, str], set[int]] = {}
    for lon, lat, date, sid in raw:
        sid = str(sid)
        if sid not in index:
            raise UnknownSpecies(f"species {sid!r} is not in the species list")
        rows.setdefault((float(lon), float(lat), str(date)), set()).add(index[sid])
    labels = np.zeros((len(rows), len(species_ids)), dtype=np.uint8)
    for r, present in enumerate(rows.values()):
        labels[r, sorted(present)] = 1
    keys = list(rows)
    return OccurrenceTable(
        "PO", list(species_ids),
        np.array([k[0] for k in keys], dtype=np.float64),
        np.array([k[1] for k in keys], dtype=np.float64),
        labels,
        [k[2] for k in keys],
    )


def po_records(table: OccurrenceTable) -> list[tuple[float, float, str, str]]:
    """Expand a PO table back into one raw record per (site, species)."""
    out = []
    for i in range(len(table)):
        for j in np.flatnonzero(table.labels[i]):
            out.append((float(table.lon[i]), float(table.lat[i]), table.keys[i], table.species_ids[j]))
    return out


def read_species_list(path: str | Path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"species_index", "species_id"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: expected header species_index,species_id")
        pairs = sorted((int(r["species_index"]), r["species_id"]) for r in reader)
    if [i for i, _ in pairs] != list(range(len(pairs))):
        raise FormatError(f"{path}: species_index must be 0..S-1")
    return [sid for _, sid in pairs]


def write_species_list(species_ids: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["species_index", "species_id"])
        for i, sid in enumerate(species_ids):
            w.writerow([i, sid])


def read_po_csv(path: str | Path, species_ids: Sequence[str]) -> OccurrenceTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["lon", "lat", "date", "species_id"]:
            raise FormatError(f"{path}: expected header lon,lat,date,species_id")
        try:
            raw = [(float(r["lon"]), float(r["lat"]), r["date"], r["species_id"]) for r in reader]
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return merge_po_records(raw, species_ids)


def write_po_csv(records: Iterable[tuple[float, float, str, str]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lon", "lat", "date", "species_id"])
        for lon, lat, date, sid in records:
            w.writerow([repr(float(lon)), repr(float(lat)), date, sid])


def read_pa_csv(path: str | Path, species_ids: Sequence[str]) -> OccurrenceTable:
    index = {sid: i for i, sid in enumerate(species_ids)}
    lon, lat, keys, labels = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["site_id", "lon", "lat", "species_ids"]:
            raise FormatError(f"{path}: expected header site_id,lon,lat,species_ids")
        for r in reader:
            row = np.zeros(len(species_ids), dtype=np.uint8)
            for sid in filter(None, r["species_ids"].split(";")):
                if sid not in index:
                    raise UnknownSpecies(f"species {sid!r} is not in the species list")
                row[index[sid]] = 1
            keys.append(r["site_id"])
            lon.append(float(r["lon"]))
            lat.append(float(r["lat"]))
            labels.append(row)
    labels_arr = np.array(labels, dtype=np.uint8).reshape(len(keys), len(species_ids))
    return OccurrenceTable("PA", list(species_ids), np.array(lon), np.array(lat), labels_arr, keys)


def write_pa_csv(table: OccurrenceTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "lon", "lat", "species_ids"])
        for i in range(len(table)):
            ids = ";".join(table.species_ids[j] for j in np.flatnonzero(table.labels[i]))
            w.writerow([table.keys[i], repr(float(table.lon[i])), repr(float(table.lat[i])), ids])
