import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_raster
from msdm.architecture import ModalityConfig, Model, ModelConfig
from msdm.checkpoint import load_checkpoint
from msdm.errors import NumericalDomain
from msdm.geodata import OccurrenceTable
from msdm.training import (
    CLAMP,
    TrainConfig,
    default_pos_weight,
    make_batches,
    make_samplers,
    result_from_meta,
    train,
    weighted_loss,
    weighted_loss_grad,
)


def direct_loss(p, y, w):
    total = 0.0
    for pi, yi in zip(np.ravel(p), np.ravel(y)):
        pi = min(max(pi, CLAMP), 1 - CLAMP)
        total -= w * yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
    return total / np.size(p)


@pytest.mark.parametrize("w", [1.0, 2.5, 10.0])
def test_loss_matches_direct_sum(w):
    rng = np.random.default_rng(0)
    p = rng.uniform(0, 1, (7, 4))
    y = rng.random((7, 4)) < 0.3
    assert weighted_loss(p, y, w) == pytest.approx(direct_loss(p, y, w), abs=1e-12)


def test_pos_weight_scales_positive_terms_only():
    p = np.array([[0.2, 0.7]])
    y = np.array([[1, 0]])
    base = weighted_loss(p, y, 1.0)
    pos = -math.log(0.2) / 2
    assert weighted_loss(p, y, 3.0) - base == pytest.approx(2 * pos)
    assert weighted_loss(p, np.zeros_like(y), 3.0) == weighted_loss(p, np.zeros_like(y), 1.0)


def test_clamp_keeps_loss_finite_and_kills_gradient():
    p = np.array([[0.0, 1.0, 0.5]])
    y = np.array([[1, 0, 1]])
    loss = weighted_loss(p, y)
    assert math.isfinite(loss)
    assert loss == pytest.approx((-2 * math.log(CLAMP) - math.log(0.5)) / 3)
    g = weighted_loss_grad(p, y)
    assert g[0, 0] == 0 and g[0, 1] == 0 and g[0, 2] < 0


@pytest.mark.parametrize(
    "p,y",
    [
        (np.array([[np.nan]]), np.array([[1]])),
        (np.array([[1.5]]), np.array([[1]])),
        (np.array([[-0.1]]), np.array([[0]])),
        (np.zeros((2, 2)), np.zeros((2, 3))),
    ],
)
def test_domain_errors(p, y):
    with pytest.raises(NumericalDomain):
        weighted_loss(p, y)
    with pytest.raises(NumericalDomain):
        weighted_loss_grad(p, y)


@given(
    arrays(np.float64, (3, 4), elements=st.floats(0.01, 0.99)),
    arrays(np.uint8, (3, 4), elements=st.integers(0, 1)),
    st.floats(1.0, 20.0),
)
def test_loss_is_nonnegative_and_gradient_signs(p, y, w):
    assert weighted_loss(p, y, w) >= 0
    g = weighted_loss_grad(p, y, w)
    assert np.all(g[y == 1] < 0) and np.all(g[y == 0] > 0)


def test_default_pos_weight():
    labels = np.array([[1, 0, 0, 0], [1, 1, 0, 0], [0, 0, 0, 1]])
    t = OccurrenceTable("PO", list("abcd"), [0, 1, 2], [0, 1, 2], labels)
    # 4 species / (4 positives / 3 sites)
    assert default_pos_weight(t) == pytest.approx(3.0)
    full = OccurrenceTable("PO", ["a"], [0], [0], [[1]])
    assert default_pos_weight(full) == 1.0


# --- loop ---------------------------------------------------------------------


def toy_problem(n=120, seed=0, edge_sites=0):
    """Species 0 lives where band 0 is positive at the site, species 1 where the 3x3 mean of band 1 is."""
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((2, 30, 30))
    raster = make_raster(data, origin=(0.0, 30.0), pixel=(1.0, 1.0), name="c")
    cols = rng.integers(2, 28, n)
    rows = rng.integers(2, 28, n)
    lon, lat = cols + 0.5, 30 - rows - 0.5
    y0 = data[0, rows, cols] > 0
    y1 = np.array([data[1, r - 1 : r + 2, c - 1 : c + 2].mean() > 0 for r, c in zip(rows, cols)])
    labels = np.stack([y0, y1], 1)
    if edge_sites:
        lon = np.concatenate([lon, np.full(edge_sites, 0.5)])
        lat = np.concatenate([lat, np.full(edge_sites, 15.5)])
        labels = np.concatenate([labels, np.ones((edge_sites, 2), bool)])
    table = OccurrenceTable("PO", ["s0", "s1"], lon, lat, labels)
    cfg = ModelConfig([ModalityConfig("c", 2, [1, 3], ["conv1:8"], 1.0, raster="c")], 2, 8, 8, 8, seed=seed)
    return {"c": raster}, table, cfg


def test_training_reduces_loss():
    rasters, table, mcfg = toy_problem()
    res = train(Model(mcfg), table, rasters, TrainConfig(epochs=8, batch_size=32, learning_rate=0.1))
    losses = [r.mean_loss for r in res.history]
    assert losses[-1] < losses[0]
    assert res.step == 8 * math.ceil(120 / 32)


def test_training_is_deterministic():
    rasters, table, mcfg = toy_problem()
    cfg = TrainConfig(epochs=3, batch_size=16, learning_rate=0.1)
    a, b = Model(mcfg), Model(mcfg)
    ha = train(a, table, rasters, cfg).history
    hb = train(b, table, rasters, cfg).history
    assert [r.mean_loss for r in ha] == [r.mean_loss for r in hb]
    for (_, p), (_, q) in zip(a.named_tensors(), b.named_tensors()):
        assert np.array_equal(p.value, q.value)


def test_shuffle_seed_changes_trajectory():
    rasters, table, mcfg = toy_problem()
    ha = train(Model(mcfg), table, rasters, TrainConfig(epochs=2, batch_size=16, shuffle_seed=0)).history
    hb = train(Model(mcfg), table, rasters, TrainConfig(epochs=2, batch_size=16, shuffle_seed=1)).history
    assert [r.mean_loss for r in ha] != [r.mean_loss for r in hb]


def test_zero_learning_rate_gives_flat_loss():
    rasters, table, mcfg = toy_problem()
    model = Model(mcfg)
    before = [p.value.copy() for p in model.parameters()]
    # one batch per epoch: same statistics, only the row order (and so float rounding) changes
    res = train(model, table, rasters, TrainConfig(epochs=3, batch_size=1000, learning_rate=0.0))
    first = res.history[0].mean_loss
    assert all(r.mean_loss == pytest.approx(first, rel=1e-6) for r in res.history)
    assert all(np.array_equal(a, p.value) for a, p in zip(before, model.parameters()))


def test_out_of_bounds_sites_are_skipped_and_counted():
    rasters, table, mcfg = toy_problem(n=50, edge_sites=3)
    model = Model(mcfg)
    stream = make_batches(table, make_samplers(model, rasters), TrainConfig(batch_size=8), 0)
    assert stream.skipped == 3 and stream.consumed == 50
    assert stream.skipped + stream.consumed == len(table)
    seen = np.concatenate([b.sites for b in stream])
    assert sorted(seen.tolist()) == list(range(50))
    res = train(model, table, rasters, TrainConfig(epochs=1, batch_size=8))
    assert res.history[0].skipped == 3 and res.history[0].consumed == 50


def test_epoch_order_depends_on_epoch():
    rasters, table, mcfg = toy_problem()
    samplers = make_samplers(Model(mcfg), rasters)
    cfg = TrainConfig(batch_size=8)
    o0 = make_batches(table, samplers, cfg, 0).order
    assert np.array_equal(o0, make_batches(table, samplers, cfg, 0).order)
    assert not np.array_equal(o0, make_batches(table, samplers, cfg, 1).order)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    rasters, table, mcfg = toy_problem()
    straight = Model(mcfg)
    full = train(straight, table, rasters, TrainConfig(epochs=4, batch_size=16, learning_rate=0.1))

    part = Model(mcfg)
    train(part, table, rasters, TrainConfig(epochs=2, batch_size=16, learning_rate=0.1), checkpoint_dir=tmp_path)
    model, head = load_checkpoint(tmp_path / "last.ckpt")
    resumed = train(
        model, table, rasters, TrainConfig(epochs=4, batch_size=16, learning_rate=0.1),
        resume=result_from_meta(model, head),
    )
    assert [r.mean_loss for r in resumed.history] == [r.mean_loss for r in full.history]
    assert resumed.step == full.step
    for (_, p), (_, q) in zip(straight.named_tensors(), model.named_tensors()):
        assert np.array_equal(p.value, q.value)


def test_validation_tracks_best_checkpoint(tmp_path):
    rasters, table, mcfg = toy_problem()
    _, val, _ = toy_problem(n=60, seed=5)
    res = train(
        Model(mcfg), table, rasters, TrainConfig(epochs=3, batch_size=32, learning_rate=0.1),
        val_table=OccurrenceTable("PA", val.species_ids, val.lon, val.lat, val.labels),
        checkpoint_dir=tmp_path,
    )
    assert all(r.val_median_auc is not None for r in res.history)
    assert res.best_auc == max(r.val_median_auc for r in res.history)
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    _, head = load_checkpoint(tmp_path / "best.ckpt")
    assert head["epoch"] == res.best_epoch


def test_loss_worked_examples():
    rng = np.random.default_rng(2)
    assert weighted_loss(np.full((5, 3), 0.5), rng.random((5, 3)) < 0.5) == pytest.approx(math.log(2))
    assert weighted_loss([[0.9]], [[1]], 2.0) == pytest.approx(-2 * math.log(0.9))
    assert weighted_loss([[0.9]], [[1]], 2.0) == pytest.approx(0.2107, abs=1e-4)
    # saturated but correct predictions are clamped rather than rejected
    y = np.array([[1, 0], [0, 1]])
    assert weighted_loss(y.astype(float), y, 4.0) <= 2 * 4.0 * 1.7e-6
