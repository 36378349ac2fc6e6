"""A small deterministic differentiable core on numpy.

Layers are stateless with respect to a forward pass: ``forward`` returns the
output together with a cache object, and ``backward`` consumes that cache.
This lets one layer instance (a shared encoder) be applied several times in
a single step without the calls clobbering each other.  Parameter
gradients accumulate into ``Parameter.grad``.

Activations are float32 NHWC (channels last, so im2col needs no
transposes).  Layers follow the dtype of their input, so the same code runs
in float64 for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import ShapeMismatch

DTYPE = np.float32
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

LAYER_KINDS = ("conv", "batchnorm", "relu", "maxpool", "linear")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``kernel``/``stride`` apply to conv and maxpool; channel counts to conv,
    batchnorm and linear.
    """

    kind: str
    kernel: int = 1
    stride: int = 1
    in_channels: int = 0
    out_channels: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be >= 1")

    def describe(self) -> str:
        if self.kind == "conv":
            s = f"s{self.stride}" if self.stride != 1 else ""
            return f"conv{self.kernel}{s} {self.in_channels}->{self.out_channels}"
        if self.kind == "maxpool":
            return f"maxpool{self.kernel}s{self.stride}"
        if self.kind == "linear":
            return f"linear {self.in_channels}->{self.out_channels}"
        if self.kind == "batchnorm":
            return f"batchnorm {self.out_channels}"
        return self.kind


class Parameter:
    """A trainable (or buffer) tensor with a same-shape gradient slot."""

    def __init__(self, value: np.ndarray, name: str = "", trainable: bool = True):
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value) if trainable else None
        self.name = name
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def cast(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        if self.grad is not None:
            self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"


class Layer:
    spec: LayerSpec

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool = True) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache: Any, need_dx: bool = True) -> np.ndarray | None:
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def _colsum(a: np.ndarray) -> np.ndarray:
    # BLAS column sums; much faster than an axis-0 ufunc reduction on tall arrays
    return np.ones(a.shape[0], dtype=a.dtype) @ a


def _colsum64(a: np.ndarray) -> np.ndarray:
    # column sums accumulated in float64, for batch statistics
    return np.ones(a.shape[0]) @ a.astype(np.float64, copy=False)


class Conv2d(Layer):
    """Valid (unpadded) cross-correlation on NHWC activations."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        self.spec = spec
        k, cin, cout = spec.kernel, spec.in_channels, spec.out_channels
        # stored (out, in, k, k); the matmul view is (k, k, in) x out
        self.weight = Parameter(_uniform(rng, (cout, cin, k, k), cin * k * k), "weight")
        self.bias = Parameter(np.zeros(cout), "bias")

    def parameters(self):
        return [self.weight, self.bias]

    def _wmat(self) -> np.ndarray:
        return self.weight.value.transpose(2, 3, 1, 0).reshape(-1, self.spec.out_channels)

    def forward(self, x, train=True):
        n, h, w, c = x.shape
        k, s = self.spec.kernel, self.spec.stride
        if c != self.spec.in_channels or h < k or w < k:
            raise ShapeMismatch(f"{self.spec.describe()} cannot take input of shape {x.shape}")
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if k == 1:
            cols = x[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s, :]
        else:
            cols = np.concatenate(
                [x[:, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s, :] for i in range(k) for j in range(k)],
                axis=3,
            )
        cols = np.ascontiguousarray(cols).reshape(n * ho * wo, -1)
        out = cols @ self._wmat()
        out += self.bias.value
        return out.reshape(n, ho, wo, -1), (x.shape, cols)

    def backward(self, dy, cache, need_dx=True):
        xshape, cols = cache
        n, h, w, c = xshape
        k, s = self.spec.kernel, self.spec.stride
        cout = self.spec.out_channels
        _, ho, wo, _ = dy.shape
        dmat = dy.reshape(-1, cout)
        dw = cols.T @ dmat  # (k*k*in, out)
        self.weight.grad += dw.reshape(k, k, c, cout).transpose(3, 2, 0, 1)
        self.bias.grad += _colsum(dmat)
        if not need_dx:
            return None
        dcols = (dmat @ self._wmat().T).reshape(n, ho, wo, k * k, c)
        if k == 1 and s == 1:
            return dcols.reshape(n, ho, wo, c)
        dx = np.zeros(xshape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s, :] += dcols[:, :, :, i * k + j, :]
        return dx


class BatchNorm2d(Layer):
    """Per-channel normalization over (N, H, W)."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        c = spec.out_channels
        self.gamma = Parameter(np.ones(c), "gamma")
        self.beta = Parameter(np.zeros(c), "beta")
        self.running_mean = Parameter(np.zeros(c), "running_mean", trainable=False)
        self.running_var = Parameter(np.ones(c), "running_var", trainable=False)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[3] != self.spec.out_channels:
            raise ShapeMismatch(f"{self.spec.describe()} cannot take input of shape {x.shape}")
        if train:
            flat = x.reshape(-1, x.shape[3])
            m = flat.shape[0]
            mean = _colsum64(flat) / m
            centered = flat - mean.astype(x.dtype)
            var = _colsum64(centered * centered) / m
            unbiased = var * m / (m - 1) if m > 1 else var
            rm, rv = self.running_mean, self.running_var
            rm.value = ((1 - BN_MOMENTUM) * rm.value + BN_MOMENTUM * mean).astype(rm.value.dtype)
            rv.value = ((1 - BN_MOMENTUM) * rv.value + BN_MOMENTUM * unbiased).astype(rv.value.dtype)
        else:
            mean = self.running_mean.value.astype(np.float64)
            var = self.running_var.value.astype(np.float64)
        inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype)) * inv_std
        y = xhat * self.gamma.value + self.beta.value
        return y, (xhat, inv_std, train)

    def backward(self, dy, cache, need_dx=True):
        xhat, inv_std, train = cache
        c = dy.shape[3]
        dflat = dy.reshape(-1, c)
        xflat = xhat.reshape(-1, c)
        self.gamma.grad += _colsum(dflat * xflat)
        self.beta.grad += _colsum(dflat)
        dxhat = dy * self.gamma.value
        if not train:
            return dxhat * inv_std
        dxflat = dxhat.reshape(-1, c)
        m = dxflat.shape[0]
        mean_d = _colsum(dxflat) / m
        mean_dx = _colsum(dxflat * xflat) / m
        return (dxhat - mean_d - xhat * mean_dx) * inv_std


class ReLU(Layer):
    def __init__(self, spec: LayerSpec | None = None, rng=None):
        self.spec = spec or LayerSpec("relu")

    def forward(self, x, train=True):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, need_dx=True):
        return dy * cache


class MaxPool2d(Layer):
    """Window maxima; ties go to the first maximum in row-major order."""

    def __init__(self, spec: LayerSpec, rng=None):
        self.spec = spec

    def _taps(self, a: np.ndarray, ho: int, wo: int):
        k, s = self.spec.kernel, self.spec.stride
        for i in range(k):
            for j in range(k):
                yield i, j, a[:, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s, :]

    def forward(self, x, train=True):
        k, s = self.spec.kernel, self.spec.stride
        n, h, w, c = x.shape
        if h < k or w < k:
            raise ShapeMismatch(f"{self.spec.describe()} cannot take input of shape {x.shape}")
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        best = None
        for _, _, tap in self._taps(x, ho, wo):
            best = tap.copy() if best is None else np.maximum(best, tap)
        return best, (x, best)

    def backward(self, dy, cache, need_dx=True):
        x, best = cache
        _, ho, wo, _ = dy.shape
        dx = np.zeros(x.shape, dtype=dy.dtype)
        taken = np.zeros(best.shape, dtype=bool)
        dxt = dict(((i, j), t) for i, j, t in self._taps(dx, ho, wo))
        for i, j, tap in self._taps(x, ho, wo):
            hit = (tap == best) & ~taken  # first maximum in row-major order
            taken |= hit
            dxt[i, j] += dy * hit
        return dx


class Linear(Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        self.spec = spec
        self.weight = Parameter(_uniform(rng, (spec.out_channels, spec.in_channels), spec.in_channels), "weight")
        self.bias = Parameter(np.zeros(spec.out_channels), "bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.spec.in_channels:
            raise ShapeMismatch(f"{self.spec.describe()} cannot take input of shape {x.shape}")
        return x @ self.weight.value.T + self.bias.value, x

    def backward(self, dy, cache, need_dx=True):
        x = cache
        self.weight.grad += dy.T @ x
        self.bias.grad += _colsum(dy)
        if not need_dx:
            return None
        return dy @ self.weight.value


_LAYER_TYPES = {
    "conv": Conv2d,
    "batchnorm": BatchNorm2d,
    "relu": ReLU,
    "maxpool": MaxPool2d,
    "linear": Linear,
}


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    return _LAYER_TYPES[spec.kind](spec, rng)


class Sequential:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    @classmethod
    def from_specs(cls, specs: Sequence[LayerSpec], rng: np.random.Generator) -> "Sequential":
        return cls([build_layer(s, rng) for s in specs])

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self) -> list[Parameter]:
        return [b for layer in self.layers for b in layer.buffers()]

    def forward(self, x, train=True):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train)
            caches.append(cache)
        return x, caches

    def backward(self, dy, caches, need_dx: bool = True):
        """Backpropagate; with ``need_dx=False`` the first layer skips its input gradient."""
        last = len(self.layers) - 1
        for i, (layer, cache) in enumerate(zip(reversed(self.layers), reversed(caches))):
            if i == last and not need_dx and not layer.parameters():
                return None
            dy = layer.backward(dy, cache, need_dx or i != last)
        return dy


def init_parameters(specs: Sequence[LayerSpec], seed: int) -> Sequential:
    """Build layers from specs with weights drawn deterministically from ``seed``."""
    return Sequential.from_specs(specs, np.random.default_rng(seed))


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-free logistic, evaluated in float64 and returned in the input's float dtype."""
    z = np.asarray(z)
    dtype = z.dtype if np.issubdtype(z.dtype, np.floating) else DTYPE
    z64 = z.astype(np.float64)
    out = np.empty_like(z64)
    pos = z64 >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z64[pos]))
    e = np.exp(z64[~pos])
    out[~pos] = e / (1.0 + e)
    return out.astype(dtype)


def sigmoid_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return dp * p * (1 - p)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0001
    seed: int = 0

    def __post_init__(self):
        # lr == 0 is accepted as a frozen-weights dry run
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def sgd_step(params: Sequence[Parameter], cfg: SgdConfig) -> None:
    """Plain SGD with L2 weight decay folded into the gradient; no momentum."""
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.value.shape:
            raise ShapeMismatch(f"gradient shape {p.grad.shape} != parameter shape {p.value.shape}")
        lr = p.value.dtype.type(cfg.learning_rate)
        wd = p.value.dtype.type(cfg.weight_decay)
        p.value -= lr * (p.grad + wd * p.value)
