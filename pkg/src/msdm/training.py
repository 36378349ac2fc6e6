"""Weighted multi-label objective, batch assembly and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .architecture import Model, required_patch_size
from .checkpoint import save_checkpoint
from .errors import NumericalDomain, NumericalError
from .geodata import GeoRaster, OccurrenceTable, PatchSampler, SitePatches
from .metrics import evaluate
from .nn_core import SgdConfig, sgd_step

log = logging.getLogger(__name__)

CLAMP = 1e-7


def _check_domain(pred: np.ndarray, labels: np.ndarray) -> None:
    if pred.shape != labels.shape:
        raise NumericalDomain(f"prediction shape {pred.shape} != label shape {labels.shape}")
    if not np.all(np.isfinite(pred)) or pred.min(initial=0.5) < 0 or pred.max(initial=0.5) > 1:
        raise NumericalDomain("predictions must be finite probabilities in [0, 1]")


def weighted_loss(pred, labels, pos_weight: float = 1.0) -> float:
    """Mean over all N*S terms of -[w*y*log p + (1-y)*log(1-p)], p clamped to [1e-7, 1-1e-7]."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _check_domain(pred, y)
    p = np.clip(pred, CLAMP, 1 - CLAMP)
    terms = pos_weight * y * np.log(p) + (1 - y) * np.log1p(-p)
    return float(-terms.mean())


def weighted_loss_grad(pred, labels, pos_weight: float = 1.0) -> np.ndarray:
    """d(weighted_loss)/d(pred); zero where the clamp is active."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _check_domain(pred, y)
    p = np.clip(pred, CLAMP, 1 - CLAMP)
    g = -(pos_weight * y / p - (1 - y) / (1 - p)) / y.size
    g[(pred < CLAMP) | (pred > 1 - CLAMP)] = 0.0
    return g.astype(np.float32)


def default_pos_weight(table: OccurrenceTable) -> float:
    """Species count over mean positives per site."""
    mean_pos = float(table.labels.sum(axis=1).mean()) if len(table) else 0.0
    if mean_pos <= 0:
        return 1.0
    return max(1.0, table.n_species / mean_pos)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 0.01
    weight_decay: float = 0.0001
    pos_weight: float | None = None  # None: species count / mean positives per site
    shuffle_seed: int = 0
    validate: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.weight_decay, self.shuffle_seed)


@dataclass
class Batch:
    inputs: dict[str, np.ndarray]
    labels: np.ndarray
    sites: np.ndarray


class BatchStream:
    """One epoch of batches; ``skipped + consumed == len(table)``."""

    def __init__(self, patches: SitePatches, table: OccurrenceTable, cfg: TrainConfig, epoch: int):
        self.patches = patches
        self.table = table
        self.cfg = cfg
        rng = np.random.default_rng([cfg.shuffle_seed, epoch])
        self.order = patches.valid_idx[rng.permutation(len(patches.valid_idx))]
        self.skipped = patches.skipped
        self.consumed = len(self.order)

    def __len__(self) -> int:
        return math.ceil(self.consumed / self.cfg.batch_size)

    def __iter__(self) -> Iterator[Batch]:
        bs = self.cfg.batch_size
        for start in range(0, self.consumed, bs):
            idx = self.order[start : start + bs]
            yield Batch(self.patches.inputs(idx), self.table.labels[idx].astype(np.float32), idx)


def make_samplers(model_or_config, rasters: dict[str, GeoRaster]) -> dict[str, PatchSampler]:
    config = getattr(model_or_config, "config", model_or_config)
    samplers = {}
    for m in config.modalities:
        if m.raster not in rasters:
            raise KeyError(f"no raster loaded for modality {m.name!r} (expected {m.raster!r})")
        samplers[m.name] = PatchSampler(rasters[m.raster], required_patch_size(config, m.name))
    return samplers


def make_batches(table: OccurrenceTable, samplers: dict[str, PatchSampler], cfg: TrainConfig, epoch: int) -> BatchStream:
    return BatchStream(SitePatches(table, samplers), table, cfg, epoch)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    skipped: int
    consumed: int
    val_median_auc: float | None = None
    val_site_f1_mean: float | None = None


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord] = field(default_factory=list)
    pos_weight: float = 1.0
    best_epoch: int | None = None
    best_auc: float | None = None
    step: int = 0


def train_step(model: Model, batch: Batch, pos_weight: float, sgd) -> float:
    model.zero_grad()
    probs = model.forward(batch.inputs, train=True)
    loss = weighted_loss(probs, batch.labels, pos_weight)
    if not math.isfinite(loss):
        raise NumericalError("loss is not finite")
    model.backward(weighted_loss_grad(probs, batch.labels, pos_weight))
    sgd_step(model.parameters(), sgd)
    return loss


def train(
    model: Model,
    table: OccurrenceTable,
    rasters: dict[str, GeoRaster],
    cfg: TrainConfig,
    *,
    val_table: OccurrenceTable | None = None,
    checkpoint_dir: str | Path | None = None,
    resume: TrainResult | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Train end to end; ``resume`` continues a previous result from its last epoch."""
    samplers = make_samplers(model, rasters)
    patches = SitePatches(table, samplers)
    pos_weight = cfg.pos_weight if cfg.pos_weight is not None else default_pos_weight(table)
    result = resume or TrainResult(model, pos_weight=pos_weight)
    result.model = model
    start = len(result.history)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    sgd = cfg.sgd
    for epoch in range(start, cfg.epochs):
        stream = BatchStream(patches, table, cfg, epoch)
        total, count = 0.0, 0
        for batch in stream:
            loss = train_step(model, batch, result.pos_weight, sgd)
            total += loss * len(batch.sites)
            count += len(batch.sites)
            result.step += 1
        rec = EpochRecord(epoch + 1, total / count if count else math.nan, stream.skipped, stream.consumed)
        if val_table is not None and cfg.validate:
            report = evaluate(model, val_table, samplers, table)
            rec.val_median_auc = report.median_auc
            rec.val_site_f1_mean = report.site_f1_mean
        result.history.append(rec)
        log.info("epoch %d loss %.5f val_auc %s", rec.epoch, rec.mean_loss, rec.val_median_auc)
        improved = rec.val_median_auc is not None and (
            result.best_auc is None or rec.val_median_auc > result.best_auc
        )
        if improved:
            result.best_auc, result.best_epoch = rec.val_median_auc, rec.epoch
        if checkpoint_dir is not None:
            ckpt_meta = dict(meta or {})
            ckpt_meta.update(history_meta(result))
            save_checkpoint(Path(checkpoint_dir) / "last.ckpt", model, step=result.step, epoch=rec.epoch, meta=ckpt_meta)
            if improved:
                save_checkpoint(Path(checkpoint_dir) / "best.ckpt", model, step=result.step, epoch=rec.epoch, meta=ckpt_meta)
    return result


def history_meta(result: TrainResult) -> dict:
    return {
        "history": [asdict(r) for r in result.history],
        "pos_weight": result.pos_weight,
        "best_epoch": result.best_epoch,
        "best_auc": result.best_auc,
    }


def result_from_meta(model: Model, head: dict) -> TrainResult:
    """Rebuild a TrainResult from a checkpoint header for resuming."""
    meta = head.get("meta", {})
    return TrainResult(
        model,
        [EpochRecord(**r) for r in meta.get("history", [])],
        meta.get("pos_weight", 1.0),
        meta.get("best_epoch"),
        meta.get("best_auc"),
        head.get("step", 0),
    )
