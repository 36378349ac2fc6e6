"""Ablation sweeps: train and evaluate one model per scale configuration."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from .architecture import ModalityConfig, Model, ModelConfig
from .errors import ConfigError, MsdmError
from .geodata import GeoRaster, OccurrenceTable
from .metrics import EvalReport, evaluate
from .training import TrainConfig, make_samplers, train

log = logging.getLogger(__name__)

BASE_COLUMNS = ["name", "modalities", "scales", "median_auc", "site_f1_mean", "runtime_s", "status", "error"]


@dataclass
class SweepRun:
    name: str
    scales: dict[str, list[int]]  # modality name -> scale set

    @property
    def label(self) -> str:
        return " + ".join(f"{m}{{{','.join(map(str, s))}}}" for m, s in self.scales.items())


@dataclass
class SweepConfig:
    modalities: dict[str, dict]  # templates, minus the scales
    runs: list[SweepRun]
    model: dict = field(default_factory=dict)  # branch/head/projection widths
    train: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        if not d.get("runs"):
            raise ConfigError("sweep needs a non-empty 'runs' list")
        mods = d.get("modalities") or {}
        runs = []
        for i, r in enumerate(d["runs"]):
            scales = {str(k): [int(x) for x in v] for k, v in (r.get("scales") or {}).items()}
            if not scales:
                raise ConfigError(f"run {i} has no scales")
            for m in scales:
                if m not in mods:
                    raise ConfigError(f"run {i} uses undeclared modality {m!r}")
            runs.append(SweepRun(str(r.get("name") or f"run{i}"), scales))
        names = [r.name for r in runs]
        if len(set(names)) != len(names):
            raise ConfigError("sweep run names must be unique")
        return cls(dict(mods), runs, dict(d.get("model") or {}), dict(d.get("train") or {}), int(d.get("seed", 0)))

    def model_config(self, run: SweepRun, species_count: int, in_channels: dict[str, int]) -> ModelConfig:
        modalities = []
        for name, scales in run.scales.items():
            tpl = dict(self.modalities[name])
            tpl.setdefault("raster", name)
            tpl.setdefault("in_channels", in_channels.get(tpl["raster"], 0))
            modalities.append(ModalityConfig(name=name, scales=scales, **tpl))
        return ModelConfig(modalities, species_count, seed=self.seed, **self.model)

    def train_config(self) -> TrainConfig:
        t = dict(self.train)
        t.setdefault("shuffle_seed", self.seed)
        return TrainConfig(**t)


@dataclass
class SweepRow:
    run: SweepRun
    status: str
    runtime_s: float
    report: EvalReport | None = None
    error: str = ""
    groups: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        rep = self.report
        return {
            "name": self.run.name,
            "modalities": "+".join(self.run.scales),
            "scales": self.run.label,
            "median_auc": rep.median_auc if rep else math.nan,
            "site_f1_mean": rep.site_f1_mean if rep else math.nan,
            "runtime_s": self.runtime_s,
            "status": self.status,
            "error": self.error,
            **self.groups,
        }


def species_groups(truth: dict | None) -> dict[str, list[str]]:
    """Group virtual species by (modality, true window), e.g. ``auc_coarse_w9``."""
    groups: dict[str, list[str]] = {}
    for sp in (truth or {}).get("species", []):
        groups.setdefault(f"auc_{sp['modality']}_w{sp['window']}", []).append(sp["species_id"])
    return dict(sorted(groups.items()))


def run_sweep(
    cfg: SweepConfig,
    po: OccurrenceTable,
    pa: OccurrenceTable,
    rasters: dict[str, GeoRaster],
    out_dir: str | Path,
    truth: dict | None = None,
) -> list[SweepRow]:
    """Train and evaluate every run with the shared seed; failures are recorded, not raised."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups = species_groups(truth)
    in_channels = {k: r.bands for k, r in rasters.items()}
    rows = []
    for run in cfg.runs:
        t0 = time.perf_counter()
        try:
            mc = cfg.model_config(run, po.n_species, in_channels)
            model = Model(mc)
            tc = cfg.train_config()
            train(model, po, rasters, tc, val_table=None)
            report = evaluate(model, pa, make_samplers(model, rasters), po)
            report.write(out / run.name)
            row = SweepRow(run, "ok", time.perf_counter() - t0, report)
            row.groups = {g: report.group_median_auc(ids) for g, ids in groups.items()}
        except MsdmError as exc:
            row = SweepRow(run, "failed", time.perf_counter() - t0, error=f"{type(exc).__name__}: {exc}")
            log.error("run %s failed: %s", run.name, exc)
        except Exception as exc:  # a broken run must not abort the sweep
            row = SweepRow(run, "failed", time.perf_counter() - t0, error=f"{type(exc).__name__}: {exc}")
            log.error("run %s failed:\n%s", run.name, traceback.format_exc())
        log.info("run %s: %s median AUC %s", run.name, row.status, row.report and row.report.median_auc)
        rows.append(row)
    return rows


def write_table(rows: list[SweepRow], path: str | Path, groups: list[str] | None = None) -> Path:
    path = Path(path)
    extra = groups if groups is not None else sorted({g for r in rows for g in r.groups})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BASE_COLUMNS + extra)
        for r in rows:
            d = r.as_dict()
            w.writerow([_cell(d.get(c)) for c in BASE_COLUMNS + extra])
    return path


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def load_truth(path: str | Path | None) -> dict | None:
    if path is None or not Path(path).exists():
        return None
    return json.loads(Path(path).read_text(encoding="utf-8"))
