"""Evaluation: per-species ROC AUC (median-aggregated) and site-averaged F1."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import MismatchedUniverse
from .geodata import SitePatches

THRESHOLD = 0.5


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # tie groups: first index of each run of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks start+1..end
    ranks = np.empty(len(x), dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def species_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with ties counted as one half; ``None`` without both classes."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binarize(pred, threshold: float = THRESHOLD) -> set[int]:
    return set(np.flatnonzero(np.asarray(pred) > threshold).tolist())


def site_f1(pred_set: Iterable[int], true_set: Iterable[int]) -> float:
    """2|P & T| / (|P| + |T|); a correct empty prediction scores 1."""
    p, t = set(pred_set), set(true_set)
    if not p and not t:
        return 1.0
    return 2.0 * len(p & t) / (len(p) + len(t))


def median(values: Sequence[float]) -> float:
    vals = sorted(v for v in values if v is not None)
    if not vals:
        return math.nan
    mid = len(vals) // 2
    if len(vals) % 2:
        return float(vals[mid])
    return (vals[mid - 1] + vals[mid]) / 2.0


@dataclass
class EvalReport:
    species_ids: list[str]
    per_species_auc: list[float | None]
    site_ids: list[str]
    site_lon: np.ndarray
    site_lat: np.ndarray
    per_site_f1: np.ndarray
    n_val: np.ndarray
    n_train: np.ndarray
    excluded_sites: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def median_auc(self) -> float:
        return median(self.per_species_auc)

    @property
    def site_f1_mean(self) -> float:
        return float(np.mean(self.per_site_f1)) if len(self.per_site_f1) else math.nan

    @property
    def undefined_auc_count(self) -> int:
        return sum(a is None for a in self.per_species_auc)

    def group_median_auc(self, species: Iterable[str]) -> float:
        idx = {s: i for i, s in enumerate(self.species_ids)}
        return median([self.per_species_auc[idx[s]] for s in species])

    def summary(self) -> dict:
        return {
            "median_auc": self.median_auc,
            "site_f1_mean": self.site_f1_mean,
            "n_species": len(self.species_ids),
            "n_species_auc_undefined": self.undefined_auc_count,
            "n_sites": len(self.site_ids),
            "n_sites_excluded": self.excluded_sites,
            "threshold": THRESHOLD,
            "empty_f1_convention": "both-empty=1.0",
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "species_metrics.csv", out / "site_metrics.csv", out / "summary.csv"]
        with open(paths[0], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["species_id", "auc", "n_train", "n_val"])
            for sid, auc, nt, nv in zip(self.species_ids, self.per_species_auc, self.n_train, self.n_val):
                w.writerow([sid, _fmt(auc), int(nt), int(nv)])
        with open(paths[1], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["site_id", "lon", "lat", "f1"])
            for sid, lon, lat, f1 in zip(self.site_ids, self.site_lon, self.site_lat, self.per_site_f1):
                w.writerow([sid, repr(float(lon)), repr(float(lat)), _fmt(f1)])
        with open(paths[2], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k, v in self.summary().items():
                w.writerow([k, _fmt(v) if isinstance(v, float) else v])
        return paths

    @classmethod
    def read(cls, out_dir: str | Path) -> "EvalReport":
        out = Path(out_dir)
        species, aucs, n_train, n_val = [], [], [], []
        with open(out / "species_metrics.csv", newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                species.append(r["species_id"])
                aucs.append(None if r["auc"] == "" else float(r["auc"]))
                n_train.append(int(r["n_train"]))
                n_val.append(int(r["n_val"]))
        sites, lon, lat, f1 = [], [], [], []
        with open(out / "site_metrics.csv", newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                sites.append(r["site_id"])
                lon.append(float(r["lon"]))
                lat.append(float(r["lat"]))
                f1.append(float(r["f1"]))
        excluded = 0
        summary = out / "summary.csv"
        if summary.exists():
            with open(summary, newline="", encoding="utf-8") as fh:
                for r in csv.DictReader(fh):
                    if r["metric"] == "n_sites_excluded":
                        excluded = int(r["value"])
        return cls(species, aucs, sites, np.array(lon), np.array(lat), np.array(f1),
                   np.array(n_val), np.array(n_train), excluded)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def report_from_predictions(
    probs: np.ndarray,
    labels: np.ndarray,
    species_ids: Sequence[str],
    site_ids: Sequence[str],
    lon: np.ndarray,
    lat: np.ndarray,
    n_train: np.ndarray | None = None,
    excluded_sites: int = 0,
    threshold: float = THRESHOLD,
) -> EvalReport:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    aucs = [species_auc(probs[:, j], labels[:, j]) for j in range(labels.shape[1])]
    f1 = np.array(
        [site_f1(binarize(probs[i], threshold), np.flatnonzero(labels[i])) for i in range(len(labels))],
        dtype=np.float64,
    )
    n_val = labels.sum(axis=0, dtype=np.int64)
    if n_train is None:
        n_train = np.zeros(len(species_ids), dtype=np.int64)
    return EvalReport(
        list(species_ids), aucs, list(site_ids), np.asarray(lon), np.asarray(lat), f1,
        n_val, np.asarray(n_train), excluded_sites,
    )


def evaluate(model, pa_table, samplers, train_table=None, batch_size: int = 512) -> EvalReport:
    """Evaluate ``model`` in eval mode on every PA site whose patches can be extracted."""
    patches = SitePatches(pa_table, samplers)
    idx = patches.valid_idx
    if len(idx):
        probs = model.predict(patches.inputs(idx), batch_size=batch_size)
    else:
        probs = np.zeros((0, pa_table.n_species), dtype=np.float32)
    n_train = train_table.positives_per_species() if train_table is not None else None
    return report_from_predictions(
        probs, pa_table.labels[idx], pa_table.species_ids,
        [pa_table.keys[i] for i in idx], pa_table.lon[idx], pa_table.lat[idx],
        n_train, patches.skipped,
    )


@dataclass
class Comparison:
    species: list[dict]
    sites: list[dict]

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "delta_species.csv", out / "delta_sites.csv"]
        for path, rows, header in (
            (paths[0], self.species, ["species_id", "auc_a", "auc_b", "delta_auc", "n_train", "n_val"]),
            (paths[1], self.sites, ["site_id", "lon", "lat", "f1_a", "f1_b", "delta_f1"]),
        ):
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for r in rows:
                    w.writerow([_fmt(r[h]) if isinstance(r[h], float) or r[h] is None else r[h] for h in header])
        return paths


def compare(a: EvalReport, b: EvalReport) -> Comparison:
    """Per-species AUC and per-site F1 differences, ``a - b``."""
    if a.species_ids != b.species_ids:
        raise MismatchedUniverse("reports cover different species lists")
    if a.site_ids != b.site_ids:
        raise MismatchedUniverse("reports cover different site lists")
    species = []
    for j, sid in enumerate(a.species_ids):
        x, y = a.per_species_auc[j], b.per_species_auc[j]
        species.append({
            "species_id": sid,
            "auc_a": x,
            "auc_b": y,
            "delta_auc": None if x is None or y is None else x - y,
            "n_train": int(a.n_train[j]),
            "n_val": int(a.n_val[j]),
        })
    sites = [
        {
            "site_id": sid,
            "lon": float(a.site_lon[i]),
            "lat": float(a.site_lat[i]),
            "f1_a": float(a.per_site_f1[i]),
            "f1_b": float(b.per_site_f1[i]),
            "delta_f1": float(a.per_site_f1[i] - b.per_site_f1[i]),
        }
        for i, sid in enumerate(a.site_ids)
    ]
    return Comparison(species, sites)
