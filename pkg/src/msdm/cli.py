"""Command-line entry point: ``msdm <subcommand> ...``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import os

# BLAS reads its thread count at import time, so honour MSDM_THREADS before numpy loads
_threads = os.environ.get("MSDM_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict  # noqa: E402
from datetime import datetime, timezone  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .architecture import Model, ModelConfig, required_patch_size  # noqa: E402
from .checkpoint import load_checkpoint  # noqa: E402
from .config import apply_overrides, load_config, require, resolve_data  # noqa: E402
from .errors import ConfigError, DataError, MsdmError, OutOfBounds  # noqa: E402
from .geodata import (  # noqa: E402
    GeoRaster,
    OccurrenceTable,
    SitePatches,
    footprint,
    round_half_up,
    read_grb,
    read_pa_csv,
    read_po_csv,
    read_species_list,
)
from .metrics import EvalReport, compare, evaluate  # noqa: E402
from .sweep import SweepConfig, load_truth, run_sweep, species_groups, write_table  # noqa: E402
from .synthgen import SynthConfig, synthesize, write_dataset  # noqa: E402
from .training import TrainConfig, make_samplers, result_from_meta, train  # noqa: E402

log = logging.getLogger("msdm")


# ---------------------------------------------------------------------------
# run manifest


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = sha256(p)
        elif p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and f.name != "run_manifest.json" and not f.name.endswith(".tmp"):
                    out[str(f)] = sha256(f)
    return out


class Run:
    """Collects what one subcommand read, wrote and counted, then writes one manifest."""

    def __init__(self, command: str, argv: list[str]):
        self.command = command
        self.argv = argv
        self.t0 = time.perf_counter()
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.config: dict = {}
        self.seeds: dict = {}
        self.inputs: list = []
        self.outputs: list = []
        self.counts: dict = {}

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": _digests(self.inputs),
            "outputs": _digests(self.outputs),
            "counts": self.counts,
            "wall_clock": {"started_utc": self.started, "elapsed_s": round(time.perf_counter() - self.t0, 3)},
        }
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# shared loading helpers


def _resolved(args) -> tuple[dict, Path]:
    cfg, path = load_config(args.config)
    return apply_overrides(cfg, args.set or []), path


def _load_rasters(paths: dict[str, str]) -> dict[str, GeoRaster]:
    return {key: read_grb(p) for key, p in paths.items()}


def _species(data: dict) -> list[str]:
    if "species" not in data:
        raise ConfigError("data section needs a species list (data.species or data.dir)")
    return read_species_list(data["species"])


def _model_config(model: dict, species_count: int, rasters: dict[str, GeoRaster]) -> ModelConfig:
    model = dict(model)
    mods = []
    for m in model.get("modalities") or []:
        m = dict(m)
        raster = m.get("raster") or m.get("name")
        if not m.get("in_channels"):
            if raster not in rasters:
                raise ConfigError(f"modality {m.get('name')!r} needs in_channels or a loaded raster {raster!r}")
            m["in_channels"] = rasters[raster].bands
        mods.append(m)
    model["modalities"] = mods
    model["species_count"] = species_count
    mc = ModelConfig.from_dict(model)
    mc.validate()
    return mc


def _raster_overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--raster expects key=path, got {item!r}")
        out[key] = str(Path(path).resolve())
    return out


def _out_dir(path: str | Path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".msdm-write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, run: Run) -> int:
    cfg, _ = _resolved(args)
    try:
        synth = SynthConfig.from_dict(cfg)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad synth config: {exc}") from exc
    out = _out_dir(args.out)
    ds = synthesize(synth)
    paths = write_dataset(ds, out)
    run.config = synth.to_dict()
    run.seeds = {"seed": synth.seed, "world_seed": synth.world.seed}
    run.outputs = list(paths.values())
    run.counts = {"po_sites": len(ds.po), "po_records": len(ds.raw_po), "pa_sites": len(ds.pa)}
    print(f"wrote dataset to {out}: {len(ds.po)} PO sites, {len(ds.pa)} PA sites, {len(ds.species)} species")
    run.write(out / "run_manifest.json")
    return 0


def cmd_plan(args, run: Run) -> int:
    cfg, _ = _resolved(args)
    require(cfg, "model")
    model = dict(cfg["model"])
    model.setdefault("species_count", 1)
    mc = ModelConfig.from_dict(model)
    run.config = cfg
    plans = iter(_safe_plans(mc))
    rows = []
    for m in mc.modalities:
        for s in m.scales:
            side, area = footprint(s, m.pixel_km)
            rows.append((m, next(plans), side, area))
    lines = [f"{'modality':<10} {'scale':>5} {'rf':>5} {'jump':>4} {'patch':>5} {'side_km':>9} {'area_km2':>9}  layers"]
    for m, plan, side, area in rows:
        lines.append(
            f"{m.name:<10} {plan.target_scale:>5} {plan.proven_rf:>5} {plan.jump:>4} "
            f"{required_patch_size(mc, m.name):>5} {round_half_up(side):>9} {round_half_up(area):>9}  "
            f"[{', '.join(m.encoder)}] -> {plan.describe()}"
        )
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = _out_dir(args.out)
        with open(out / "plan.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["modality", "scale", "rf", "jump", "patch_size", "side_km", "area_km2", "layers"])
            for m, plan, side, area in rows:
                w.writerow([m.name, plan.target_scale, plan.proven_rf, plan.jump,
                            required_patch_size(mc, m.name), repr(side), repr(area), plan.describe()])
        run.outputs = [out / "plan.csv"]
        run.write(out / "run_manifest.json")
    else:
        run.write(args.manifest or "msdm_plan_manifest.json")
    return 0


def _safe_plans(mc: ModelConfig):
    # validate every scale first so an unreachable one names its constraint
    for m in mc.modalities:
        m.validate()
    return mc.plans()


def _train_inputs(cfg: dict):
    require(cfg, "data", "model")
    data = resolve_data(cfg["data"], Path.cwd())
    species = _species(data)
    if "po" not in data:
        raise ConfigError("data section needs a PO table (data.po or data.dir)")
    rasters = _load_rasters(data["rasters"])
    po = read_po_csv(data["po"], species)
    pa = read_pa_csv(data["pa"], species) if "pa" in data else None
    return data, species, rasters, po, pa


def cmd_train(args, run: Run) -> int:
    cfg, _ = _resolved(args)
    data, species, rasters, po, pa = _train_inputs(cfg)
    mc = _model_config(cfg["model"], len(species), rasters)
    try:
        tc = TrainConfig(**(cfg.get("train") or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc
    out = _out_dir(args.out)
    meta = {"data": data, "species_ids": species, "train": asdict(tc)}
    resume = None
    model = Model(mc)
    last = out / "last.ckpt"
    if args.resume:
        if not last.exists():
            raise ConfigError(f"--resume given but {last} does not exist")
        model, head = load_checkpoint(last)
        saved = head.get("meta", {})
        if _sans_epochs(saved.get("train")) != _sans_epochs(meta["train"]) or saved.get("model") != mc.to_dict():
            raise ConfigError("checkpoint was written with a different model or train config")
        resume = result_from_meta(model, head)
        log.info("resuming from epoch %d", head.get("epoch", 0))
    result = train(model, po, rasters, tc, val_table=pa, checkpoint_dir=out, resume=resume, meta=meta)
    hist = out / "history.csv"
    with open(hist, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "skipped", "consumed", "val_median_auc", "val_site_f1_mean"])
        for r in result.history:
            w.writerow([r.epoch, repr(r.mean_loss), r.skipped, r.consumed,
                        "" if r.val_median_auc is None else repr(r.val_median_auc),
                        "" if r.val_site_f1_mean is None else repr(r.val_site_f1_mean)])
    run.config = {**cfg, "data": data, "train": asdict(tc), "model": mc.to_dict()}
    run.seeds = {"model": mc.seed, "shuffle": tc.shuffle_seed}
    run.inputs = [*data["rasters"].values(), data["species"], data["po"], *([data["pa"]] if "pa" in data else [])]
    run.outputs = [p for p in (out / "last.ckpt", out / "best.ckpt", hist) if p.exists()]
    last_rec = result.history[-1] if result.history else None
    run.counts = {
        "po_sites_skipped": last_rec.skipped if last_rec else 0,
        "po_sites_used": last_rec.consumed if last_rec else 0,
        "steps": result.step,
    }
    if last_rec:
        print(f"trained {len(result.history)} epochs: final loss {last_rec.mean_loss:.5f}"
              + (f", val median AUC {last_rec.val_median_auc:.4f}" if last_rec.val_median_auc is not None else ""))
    run.write(out / "run_manifest.json")
    return 0


def _sans_epochs(train_cfg: dict | None) -> dict:
    # extending a run to more epochs is a legitimate resume
    return {k: v for k, v in (train_cfg or {}).items() if k != "epochs"}


def _checkpoint_context(args):
    model, head = load_checkpoint(args.checkpoint)
    meta = head.get("meta", {})
    data = dict(meta.get("data") or {})
    rasters_paths = dict(data.get("rasters") or {})
    rasters_paths.update(_raster_overrides(args.raster))
    needed = {m.raster for m in model.config.modalities}
    missing = needed - set(rasters_paths)
    if missing:
        raise ConfigError(f"no raster path for {sorted(missing)}; pass --raster key=path")
    rasters = _load_rasters({k: rasters_paths[k] for k in sorted(needed)})
    species = meta.get("species_ids") or [f"species_{i}" for i in range(model.config.species_count)]
    return model, meta, data, rasters, species, rasters_paths


def cmd_evaluate(args, run: Run) -> int:
    model, meta, data, rasters, species, rpaths = _checkpoint_context(args)
    if args.species:
        species = read_species_list(args.species)
    if len(species) != model.config.species_count:
        raise DataError(f"species list has {len(species)} entries, model predicts {model.config.species_count}")
    pa_path = args.pa or data.get("pa")
    if not pa_path:
        raise ConfigError("no PA table given (--pa)")
    pa = read_pa_csv(pa_path, species)
    po = read_po_csv(data["po"], species) if data.get("po") and Path(data["po"]).exists() else None
    report = evaluate(model, pa, make_samplers(model, rasters), po)
    if report.excluded_sites:
        log.warning("%d PA sites excluded (window out of bounds or nodata)", report.excluded_sites)
    out = _out_dir(args.out)
    paths = report.write(out)
    run.config = {"checkpoint": str(Path(args.checkpoint).resolve()), "pa": str(pa_path), "rasters": rpaths}
    run.seeds = {"model": model.seed}
    run.inputs = [args.checkpoint, pa_path, *[rpaths[k] for k in sorted(rasters)]]
    run.outputs = paths
    run.counts = {"pa_sites_evaluated": len(report.site_ids), "pa_sites_excluded": report.excluded_sites,
                  "species_auc_undefined": report.undefined_auc_count}
    print(f"median AUC {report.median_auc:.4f}  site F1 {report.site_f1_mean:.4f}  "
          f"({len(report.site_ids)} sites, {report.excluded_sites} excluded)")
    run.write(out / "run_manifest.json")
    return 0


def cmd_ablate(args, run: Run) -> int:
    cfg, _ = _resolved(args)
    require(cfg, "data")
    data = resolve_data(cfg["data"], Path.cwd())
    species = _species(data)
    sweep = SweepConfig.from_dict(cfg)
    rasters = _load_rasters(data["rasters"])
    po = read_po_csv(data["po"], species)
    pa = read_pa_csv(data["pa"], species)
    truth = load_truth(data.get("truth"))
    out = _out_dir(args.out)
    rows = run_sweep(sweep, po, pa, rasters, out, truth)
    table = write_table(rows, out / "ablation.csv", list(species_groups(truth)))
    run.config = {**cfg, "data": data}
    run.seeds = {"shared": sweep.seed}
    run.inputs = [*data["rasters"].values(), data["species"], data["po"], data["pa"]]
    run.outputs = [table, *[out / r.run.name for r in rows if r.status == "ok"]]
    run.counts = {"runs": len(rows), "failed": sum(r.status != "ok" for r in rows)}
    with open(table, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    run.write(out / "run_manifest.json")
    return 0


def cmd_compare(args, run: Run) -> int:
    a, b = EvalReport.read(args.report_a), EvalReport.read(args.report_b)
    cmp = compare(a, b)
    out = _out_dir(args.out)
    paths = cmp.write(out)
    run.config = {"report_a": str(args.report_a), "report_b": str(args.report_b)}
    run.inputs = [args.report_a, args.report_b]
    run.outputs = paths
    run.counts = {"species": len(cmp.species), "sites": len(cmp.sites)}
    print(f"{len(cmp.species)} species deltas, {len(cmp.sites)} site deltas written to {out}")
    run.write(out / "run_manifest.json")
    return 0


def cmd_predict(args, run: Run) -> int:
    if args.k < 1:
        raise ConfigError("-k must be >= 1")
    model, meta, data, rasters, species, rpaths = _checkpoint_context(args)
    site = OccurrenceTable("PA", list(species), np.array([args.lon]), np.array([args.lat]),
                           np.zeros((1, len(species)), dtype=np.uint8), ["query"])
    patches = SitePatches(site, make_samplers(model, rasters))
    if patches.skipped:
        bad = [name for name, st in patches.status.items() if st[0] != 0]
        raise OutOfBounds(f"({args.lon}, {args.lat}) has no complete window in {', '.join(bad)}")
    probs = model.predict(patches.inputs([0]))[0]
    order = sorted(range(len(species)), key=lambda j: (-float(probs[j]), j))[: args.k]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["rank", "species_id", "probability"])
    for rank, j in enumerate(order, 1):
        w.writerow([rank, species[j], f"{float(probs[j]):.6f}"])
    run.config = {"checkpoint": str(Path(args.checkpoint).resolve()), "lon": args.lon, "lat": args.lat,
                  "k": args.k, "rasters": rpaths}
    run.seeds = {"model": model.seed}
    run.inputs = [args.checkpoint, *[rpaths[k] for k in sorted(rasters)]]
    run.write(args.manifest or "msdm_predict_manifest.json")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msdm", description="Multi-scale species distribution modelling toolkit.")
    p.add_argument("--version", action="version", version=f"msdm {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("config", help="YAML config file, or the name of a packaged config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (dotted key)")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    with_config(s)
    s.add_argument("--out", required=True, help="dataset directory")

    s = sub.add_parser("plan", help="print branch plans and ground footprints")
    with_config(s)
    s.add_argument("--out", help="also write plan.csv and a manifest here")
    s.add_argument("--manifest", help="manifest path when --out is not given")

    s = sub.add_parser("train", help="train a model end to end")
    with_config(s)
    s.add_argument("--out", required=True, help="run directory for checkpoints and history")
    s.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")

    s = sub.add_parser("evaluate", help="evaluate a checkpoint on presence-absence sites")
    s.add_argument("checkpoint")
    s.add_argument("--pa", help="PA table (defaults to the one used in training)")
    s.add_argument("--species", help="species list CSV (defaults to the checkpoint's)")
    s.add_argument("--raster", action="append", metavar="KEY=PATH", help="override a raster path")
    s.add_argument("--out", required=True)

    s = sub.add_parser("ablate", help="train and evaluate a sweep of scale configurations")
    with_config(s)
    s.add_argument("--out", required=True)

    s = sub.add_parser("compare", help="per-species and per-site differences of two reports")
    s.add_argument("report_a")
    s.add_argument("report_b")
    s.add_argument("--out", required=True)

    s = sub.add_parser("predict", help="top-k species at one coordinate")
    s.add_argument("checkpoint")
    s.add_argument("--lon", type=float, required=True)
    s.add_argument("--lat", type=float, required=True)
    s.add_argument("-k", type=int, default=25)
    s.add_argument("--raster", action="append", metavar="KEY=PATH", help="override a raster path")
    s.add_argument("--manifest", help="manifest path")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "plan": cmd_plan,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "predict": cmd_predict,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    run = Run(args.command, argv)
    try:
        return COMMANDS[args.command](args, run)
    except MsdmError as exc:
        print(f"msdm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"msdm {args.command}: missing input: {exc}", file=sys.stderr)
        return DataError.exit_code
    except (ValueError, KeyError) as exc:
        print(f"msdm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
