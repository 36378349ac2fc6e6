import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msdm.errors import ShapeMismatch
from msdm.nn_core import (
    BatchNorm2d,
    Conv2d,
    LayerSpec,
    Linear,
    MaxPool2d,
    Parameter,
    ReLU,
    SgdConfig,
    Sequential,
    init_parameters,
    sgd_step,
    sigmoid,
    sigmoid_backward,
)

FD_STEP = 1e-6
REL_TOL = 1e-3
ABS_FLOOR = 1e-5


def _close(analytic, numeric):
    err = np.abs(analytic - numeric)
    return bool(np.all(err <= np.maximum(REL_TOL * np.abs(numeric), ABS_FLOOR)))


def _fd_check(layer, x, seed, train=True, check_input=True):
    """Central differences of L = sum(w * layer(x)) against backward()."""
    rng = np.random.default_rng(seed)
    for p in layer.parameters():
        p.cast(np.float64)
    for b in layer.buffers():
        b.cast(np.float64)
    x = x.astype(np.float64)
    y, cache = layer.forward(x, train)
    w = rng.standard_normal(y.shape)

    def loss(inp):
        saved = [b.value.copy() for b in layer.buffers()]
        out, _ = layer.forward(inp, train)
        for b, v in zip(layer.buffers(), saved):
            b.value = v
        return float((out * w).sum())

    for p in layer.parameters():
        p.zero_grad()
    dx = layer.backward(w, cache)
    if check_input:
        num = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            xp, xm = x.copy(), x.copy()
            xp[i] += FD_STEP
            xm[i] -= FD_STEP
            num[i] = (loss(xp) - loss(xm)) / (2 * FD_STEP)
        assert _close(dx, num), np.abs(dx - num).max()
    for p in layer.parameters():
        num = np.zeros_like(p.value)
        for i in np.ndindex(p.value.shape):
            orig = p.value[i]
            p.value[i] = orig + FD_STEP
            lp = loss(x)
            p.value[i] = orig - FD_STEP
            lm = loss(x)
            p.value[i] = orig
            num[i] = (lp - lm) / (2 * FD_STEP)
        assert _close(p.grad, num), (p.name, np.abs(p.grad - num).max())


SEEDS = list(range(20))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h = int(rng.integers(k, k + 4))
    layer = Conv2d(LayerSpec("conv", k, s, cin, cout), rng)
    layer.bias.value = rng.standard_normal(cout).astype(np.float32)
    _fd_check(layer, rng.standard_normal((2, h, h + 1, cin)), seed)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(seed, train):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    layer = BatchNorm2d(LayerSpec("batchnorm", in_channels=c, out_channels=c))
    layer.gamma.value = rng.uniform(0.5, 2, c).astype(np.float32)
    layer.beta.value = rng.standard_normal(c).astype(np.float32)
    layer.running_mean.value = rng.standard_normal(c).astype(np.float32)
    layer.running_var.value = rng.uniform(0.5, 2, c).astype(np.float32)
    _fd_check(layer, rng.standard_normal((3, 3, 2, c)) * 2 + 1, seed, train=train)


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 3, 2))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    _fd_check(ReLU(), x, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradients(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 4))
    s = int(rng.integers(1, 3))
    # distinct values so the argmax is stable under the perturbation
    x = rng.permutation(2 * 7 * 7 * 2).reshape(2, 7, 7, 2).astype(np.float64) * 0.01
    _fd_check(MaxPool2d(LayerSpec("maxpool", k, s)), x, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    din, dout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    layer = Linear(LayerSpec("linear", in_channels=din, out_channels=dout), rng)
    layer.bias.value = rng.standard_normal(dout).astype(np.float32)
    _fd_check(layer, rng.standard_normal((4, din)), seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_sigmoid_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(10) * 3
    w = rng.standard_normal(10)
    analytic = sigmoid_backward(w, sigmoid(z))
    numeric = np.array([
        ((sigmoid(z + FD_STEP * e) - sigmoid(z - FD_STEP * e)) * w).sum() / (2 * FD_STEP) for e in np.eye(10)
    ])
    assert _close(analytic, numeric)


@pytest.mark.parametrize("seed", range(5))
def test_sequential_stack_gradients(seed):
    rng = np.random.default_rng(seed)
    specs = [
        LayerSpec("conv", 3, 1, 2, 3), LayerSpec("batchnorm", in_channels=3, out_channels=3), LayerSpec("relu"),
        LayerSpec("maxpool", 2, 2), LayerSpec("conv", 1, 1, 3, 2),
    ]
    net = init_parameters(specs, seed)
    for p in net.parameters():
        p.cast(np.float64)
    for b in net.buffers():
        b.cast(np.float64)
    x = rng.standard_normal((2, 6, 6, 2))
    y, caches = net.forward(x)
    w = rng.standard_normal(y.shape)
    dx = net.backward(w, caches)

    def loss(inp):
        saved = [b.value.copy() for b in net.buffers()]
        out, _ = net.forward(inp)
        for b, v in zip(net.buffers(), saved):
            b.value = v
        return float((out * w).sum())

    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += FD_STEP
        xm[i] -= FD_STEP
        num[i] = (loss(xp) - loss(xm)) / (2 * FD_STEP)
    assert _close(dx, num)


def test_float32_gradients_at_coarse_perturbation():
    # the float32 path itself, with a 1e-3 perturbation on a linear layer (exact in float32 arithmetic terms)
    rng = np.random.default_rng(0)
    layer = Linear(LayerSpec("linear", in_channels=3, out_channels=2), rng)
    x = rng.standard_normal((4, 3)).astype(np.float32)
    y, cache = layer.forward(x)
    w = rng.standard_normal(y.shape).astype(np.float32)
    layer.backward(w, cache)
    for i in np.ndindex(layer.weight.value.shape):
        orig = layer.weight.value[i]
        layer.weight.value[i] = orig + np.float32(1e-3)
        lp = float((layer.forward(x)[0].astype(np.float64) * w).sum())
        layer.weight.value[i] = orig - np.float32(1e-3)
        lm = float((layer.forward(x)[0].astype(np.float64) * w).sum())
        layer.weight.value[i] = orig
        num = (lp - lm) / 2e-3
        assert abs(layer.weight.grad[i] - num) <= max(1e-3 * abs(num), 1e-3)


# --- forward semantics ------------------------------------------------------


def test_relu_example():
    y, _ = ReLU().forward(np.array([-1.0, 0.0, 2.0]))
    assert y.tolist() == [0, 0, 2]


def test_identity_1x1_conv():
    rng = np.random.default_rng(0)
    layer = Conv2d(LayerSpec("conv", 1, 1, 3, 3), rng)
    layer.weight.value = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    x = rng.standard_normal((2, 4, 5, 3)).astype(np.float32)
    y, _ = layer.forward(x)
    np.testing.assert_array_equal(y, x)


def test_valid_conv_shape():
    layer = Conv2d(LayerSpec("conv", 3, 1, 1, 1), np.random.default_rng(0))
    y, _ = layer.forward(np.zeros((1, 5, 5, 1), np.float32))
    assert y.shape == (1, 3, 3, 1)


def test_conv_matches_direct_cross_correlation():
    rng = np.random.default_rng(3)
    layer = Conv2d(LayerSpec("conv", 3, 2, 2, 3), rng)
    x = rng.standard_normal((1, 7, 8, 2)).astype(np.float64)
    layer.weight.cast(np.float64)
    layer.bias.cast(np.float64)
    y, _ = layer.forward(x)
    w = layer.weight.value
    for i in range(y.shape[1]):
        for j in range(y.shape[2]):
            win = x[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]  # (k, k, in)
            expect = np.einsum("hwc,ochw->o", win, w)
            np.testing.assert_allclose(y[0, i, j], expect, rtol=1e-12)


def test_conv_shape_mismatch():
    layer = Conv2d(LayerSpec("conv", 3, 1, 2, 2), np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        layer.forward(np.zeros((1, 2, 2, 2), np.float32))
    with pytest.raises(ShapeMismatch):
        layer.forward(np.zeros((1, 5, 5, 3), np.float32))


def test_linear_shape_mismatch():
    layer = Linear(LayerSpec("linear", in_channels=3, out_channels=1), np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        layer.forward(np.zeros((2, 4), np.float32))


def test_linear_chain_rule_example():
    layer = Linear(LayerSpec("linear", in_channels=1, out_channels=1), np.random.default_rng(0))
    layer.weight.value[:] = 2.0
    y, cache = layer.forward(np.array([[3.0]], np.float32))
    layer.backward(np.ones_like(y), cache)
    assert layer.weight.grad[0, 0] == 3.0


def test_zero_upstream_gradient_gives_zero_grads():
    specs = [LayerSpec("conv", 3, 1, 2, 3), LayerSpec("batchnorm", in_channels=3, out_channels=3), LayerSpec("relu"),
             LayerSpec("maxpool", 2, 2), LayerSpec("conv", 1, 1, 3, 2)]
    net = init_parameters(specs, 0)
    y, caches = net.forward(np.random.default_rng(0).standard_normal((2, 6, 6, 2)).astype(np.float32))
    net.backward(np.zeros_like(y), caches)
    for p in net.parameters():
        assert not p.grad.any()


@given(st.integers(1, 4), st.integers(2, 40), st.integers(0, 10_000))
def test_batchnorm_train_output_is_standardized(c, n, seed):
    rng = np.random.default_rng(seed)
    layer = BatchNorm2d(LayerSpec("batchnorm", in_channels=c, out_channels=c))
    x = (rng.standard_normal((n, 2, 2, c)) * rng.uniform(0.1, 10, c) + rng.uniform(-5, 5, c)).astype(np.float32)
    y, _ = layer.forward(x, train=True)
    flat = y.reshape(-1, c).astype(np.float64)
    assert np.all(np.abs(flat.mean(axis=0)) < 1e-4)
    var = flat.var(axis=0)
    raw_var = x.reshape(-1, c).astype(np.float64).var(axis=0)
    expect = raw_var / (raw_var + 1e-5)  # eps shrinks the variance slightly
    assert np.all(np.abs(var - expect) < 1e-3)


def test_batchnorm_eval_uses_running_stats():
    layer = BatchNorm2d(LayerSpec("batchnorm", in_channels=1, out_channels=1))
    x = np.arange(8, dtype=np.float32).reshape(2, 2, 2, 1)
    layer.forward(x, train=True)
    assert layer.running_mean.value[0] == pytest.approx(0.1 * 3.5)
    assert layer.running_var.value[0] == pytest.approx(0.9 + 0.1 * np.var(np.arange(8), ddof=1), rel=1e-6)
    y, _ = layer.forward(x, train=False)
    expect = (x - layer.running_mean.value) / np.sqrt(layer.running_var.value + 1e-5)
    np.testing.assert_allclose(y, expect, rtol=1e-5)


@given(st.integers(0, 10_000), st.integers(2, 3), st.integers(1, 2))
def test_maxpool_routes_gradient_to_argmax(seed, k, s):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 3, (2, 6, 6, 2)).astype(np.float32)  # many ties
    layer = MaxPool2d(LayerSpec("maxpool", k, s))
    y, cache = layer.forward(x)
    dy = rng.standard_normal(y.shape).astype(np.float32)
    dx = layer.backward(dy, cache)
    assert dx.sum() == pytest.approx(dy.sum(), abs=1e-4)
    ho, wo = y.shape[1], y.shape[2]
    expect = np.zeros_like(x)
    for n in range(2):
        for c in range(2):
            for i in range(ho):
                for j in range(wo):
                    win = x[n, i * s : i * s + k, j * s : j * s + k, c]
                    r, q = np.unravel_index(np.argmax(win), win.shape)  # first maximum, row-major
                    expect[n, i * s + r, j * s + q, c] += dy[n, i, j, c]
    np.testing.assert_allclose(dx, expect, rtol=1e-6, atol=1e-6)


def test_maxpool_forward_values():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    y, _ = MaxPool2d(LayerSpec("maxpool", 2, 2)).forward(x)
    assert y[0, :, :, 0].tolist() == [[5, 7], [13, 15]]


# --- init and SGD ------------------------------------------------------------


SPECS = [LayerSpec("conv", 3, 1, 2, 4), LayerSpec("batchnorm", in_channels=4, out_channels=4),
         LayerSpec("linear", in_channels=4, out_channels=3)]


def test_init_deterministic_per_seed():
    a = [p.value for p in init_parameters(SPECS, 5).parameters()]
    b = [p.value for p in init_parameters(SPECS, 5).parameters()]
    c = [p.value for p in init_parameters(SPECS, 6).parameters()]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_init_bounds_and_constants():
    net = init_parameters([LayerSpec("linear", in_channels=4, out_channels=50)], 0)
    w, b = net.layers[0].weight.value, net.layers[0].bias.value
    assert np.all(np.abs(w) <= 0.5) and np.abs(w).max() > 0.4
    assert not b.any()
    bn = init_parameters(SPECS, 0).layers[1]
    assert np.all(bn.gamma.value == 1) and not bn.beta.value.any()


def test_sgd_examples():
    p = Parameter(np.array([1.0]))
    p.grad[:] = 1.0
    sgd_step([p], SgdConfig(0.1, 0.0))
    assert p.value[0] == pytest.approx(0.9)
    q = Parameter(np.array([1.0]))
    sgd_step([q], SgdConfig(0.1, 0.0001))
    assert q.value[0] == pytest.approx(0.99999, abs=1e-7)


def test_sgd_defaults():
    cfg = SgdConfig()
    assert (cfg.learning_rate, cfg.weight_decay) == (0.01, 0.0001)


def test_sgd_rejects_negative_rates():
    with pytest.raises(ValueError):
        SgdConfig(-0.1)
    with pytest.raises(ValueError):
        SgdConfig(0.1, -1)


def test_sgd_skips_buffers_and_checks_shapes():
    buf = Parameter(np.ones(2), trainable=False)
    sgd_step([buf], SgdConfig(1.0))
    assert buf.value.tolist() == [1, 1]
    p = Parameter(np.ones(2))
    p.grad = np.ones(3, np.float32)
    with pytest.raises(ShapeMismatch):
        sgd_step([p], SgdConfig(0.1))


def test_forward_and_update_bitwise_deterministic():
    def run():
        net = init_parameters(SPECS[:2], 3)
        x = np.random.default_rng(1).standard_normal((4, 5, 5, 2)).astype(np.float32)
        y, caches = net.forward(x)
        net.backward(np.ones_like(y), caches)
        sgd_step(net.parameters(), SgdConfig(0.1))
        return y, [p.value.copy() for p in net.parameters()]

    (y1, p1), (y2, p2) = run(), run()
    assert np.array_equal(y1, y2)
    assert all(np.array_equal(a, b) for a, b in zip(p1, p2))


def test_sigmoid_is_stable_at_extremes():
    p = sigmoid(np.array([-1000.0, 0.0, 1000.0], np.float32))
    assert p.dtype == np.float32
    assert p.tolist() == [0.0, 0.5, 1.0]


def test_sequential_skip_input_gradient():
    net = Sequential.from_specs(SPECS[:2], np.random.default_rng(0))
    rng = np.random.default_rng(0)
    y, caches = net.forward(rng.standard_normal((2, 4, 4, 2)).astype(np.float32))
    assert net.backward(rng.standard_normal(y.shape).astype(np.float32), caches, need_dx=False) is None
    assert net.layers[0].weight.grad.any()
