"""Multi-scale, multimodal model assembly.

Each modality has one encoder whose weights are shared by all of that
modality's branches.  A branch looks at a centered crop of the input patch
equal to its target scale, runs the shared encoder and its own conv/pool
stack down to a single central pixel, then projects it with a linear layer
and ReLU.  Branch vectors of every modality are concatenated (late fusion)
and fed to one linear classifier with a sigmoid per species.

Because every convolution is unpadded, the receptive field of the central
pixel is known exactly from the layer list; ``plan_branch`` synthesizes
stacks hitting a requested extent and ``rf_verify`` measures it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, NoForwardState, ShapeMismatch, Unreachable
from .nn_core import (
    DTYPE,
    BatchNorm2d,
    Layer,
    LayerSpec,
    Linear,
    Parameter,
    ReLU,
    Sequential,
    build_layer,
    sigmoid,
    sigmoid_backward,
)

# Encoder stacks written as compact tokens: "conv3:64" (kernel 3, 64 output
# channels, followed by batch-norm and ReLU), "conv3s2:64" (stride 2),
# "pool3s2" (max-pool kernel 3 stride 2).
ENCODER_PRESETS: dict[str, list[str]] = {
    # four pointwise convolutions, receptive field stays 1
    "bioclim": ["conv1:64", "conv1:128", "conv1:256", "conv1:256"],
    # nine convolutions, receptive field 25, jump 2
    "sentinel": [
        "conv3:32", "conv3:32", "conv3:64", "pool3s2",
        "conv3:64", "conv3:128", "conv3:128", "conv3:256",
        "conv1:256", "conv1:256",
    ],
}

_TOKEN = re.compile(r"^(conv|pool)(\d+)(?:s(\d+))?(?::(\d+))?$")


def rf_symbolic(layers: Sequence[LayerSpec], input_rf: int = 1, input_jump: int = 1) -> tuple[int, int]:
    """Fold receptive field and jump through conv/pool layers."""
    rf, jump = input_rf, input_jump
    for spec in layers:
        if spec.kind in ("conv", "maxpool"):
            rf += (spec.kernel - 1) * jump
            jump *= spec.stride
    return rf, jump


def parse_encoder(tokens: Sequence[str], in_channels: int) -> list[LayerSpec]:
    specs: list[LayerSpec] = []
    channels = in_channels
    for token in tokens:
        m = _TOKEN.match(token.strip())
        if not m:
            raise ConfigError(f"bad encoder layer token {token!r}")
        kind, k, s, out = m.group(1), int(m.group(2)), int(m.group(3) or 1), m.group(4)
        if kind == "pool":
            if out is not None:
                raise ConfigError(f"pool token {token!r} takes no channel count")
            specs.append(LayerSpec("maxpool", k, s))
            continue
        if out is None:
            raise ConfigError(f"conv token {token!r} needs ':<out_channels>'")
        out_c = int(out)
        specs.append(LayerSpec("conv", k, s, channels, out_c))
        specs.append(LayerSpec("batchnorm", in_channels=out_c, out_channels=out_c))
        specs.append(LayerSpec("relu"))
        channels = out_c
    return specs


def out_channels(specs: Sequence[LayerSpec], in_channels: int) -> int:
    c = in_channels
    for s in specs:
        if s.kind in ("conv", "linear"):
            c = s.out_channels
    return c


@dataclass
class ModalityConfig:
    name: str
    in_channels: int
    scales: list[int]
    encoder: list[str] = field(default_factory=lambda: list(ENCODER_PRESETS["bioclim"]))
    pixel_km: float = 1.0
    raster: str = ""

    def __post_init__(self):
        if isinstance(self.encoder, str):
            if self.encoder not in ENCODER_PRESETS:
                raise ConfigError(f"unknown encoder preset {self.encoder!r}")
            self.encoder = list(ENCODER_PRESETS[self.encoder])
        self.scales = [int(s) for s in self.scales]
        self.raster = self.raster or self.name

    @property
    def encoder_specs(self) -> list[LayerSpec]:
        return parse_encoder(self.encoder, self.in_channels)

    @property
    def encoder_rf(self) -> int:
        return rf_symbolic(self.encoder_specs)[0]

    @property
    def encoder_jump(self) -> int:
        return rf_symbolic(self.encoder_specs)[1]

    @property
    def encoder_channels(self) -> int:
        return out_channels(self.encoder_specs, self.in_channels)

    def validate(self) -> None:
        if not self.scales:
            raise ConfigError(f"modality {self.name!r} has no scales")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"modality {self.name!r}: scales must be strictly increasing")
        for s in self.scales:
            check_scale(self.encoder_rf, self.encoder_jump, s)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "in_channels": self.in_channels,
            "scales": list(self.scales),
            "encoder": list(self.encoder),
            "pixel_km": self.pixel_km,
            "raster": self.raster,
        }


def check_scale(encoder_rf: int, encoder_jump: int, target: int) -> None:
    if target % 2 == 0:
        raise Unreachable(f"scale {target} is even; central-pixel extraction needs an odd extent")
    if target < encoder_rf:
        raise Unreachable(f"scale {target} is smaller than the encoder receptive field {encoder_rf}")
    if (target - encoder_rf) % encoder_jump:
        raise Unreachable(
            f"scale {target} unreachable: ({target} - {encoder_rf}) mod {encoder_jump} = "
            f"{(target - encoder_rf) % encoder_jump}, must be 0"
        )


@dataclass(frozen=True)
class BranchPlan:
    modality: str
    target_scale: int
    layers: tuple[LayerSpec, ...]
    proven_rf: int
    jump: int
    feature_dim: int

    def describe(self) -> str:
        convs = [s.describe() for s in self.layers if s.kind in ("conv", "maxpool")]
        return ", ".join(convs)


def plan_branch(
    encoder_rf: int,
    encoder_jump: int,
    target_scale: int,
    channels_in: int,
    branch_channels: int = 256,
    head_channels: int = 512,
    modality: str = "",
) -> BranchPlan:
    """Greedy conv/pool stack whose central pixel sees exactly ``target_scale`` input pixels.

    ``deficit`` counts the missing extent in units of the current jump: a
    kernel-3 conv covers 2 units, a kernel-2 conv 1, and a 2/2 max-pool 1
    unit before halving the remaining deficit (allowed after every second
    conv when the remainder stays integral).
    """
    check_scale(encoder_rf, encoder_jump, target_scale)
    layers: list[LayerSpec] = []
    rf, jump = encoder_rf, encoder_jump
    deficit = (target_scale - rf) // jump
    channels = channels_in
    convs_since_pool = 0

    def conv(kernel: int) -> None:
        nonlocal channels
        layers.append(LayerSpec("conv", kernel, 1, channels, branch_channels))
        layers.append(LayerSpec("batchnorm", in_channels=branch_channels, out_channels=branch_channels))
        layers.append(LayerSpec("relu"))
        channels = branch_channels

    while deficit > 0:
        if convs_since_pool >= 2 and deficit >= 3 and (deficit - 1) % 2 == 0:
            layers.append(LayerSpec("maxpool", 2, 2))
            deficit = (deficit - 1) // 2
            convs_since_pool = 0
        elif deficit >= 2:
            conv(3)
            deficit -= 2
            convs_since_pool += 1
        else:
            conv(2)
            deficit -= 1
            convs_since_pool += 1
    layers.append(LayerSpec("conv", 1, 1, channels, head_channels))
    proven_rf, out_jump = rf_symbolic(layers, encoder_rf, encoder_jump)
    if proven_rf != target_scale:  # pragma: no cover - guarded by the planner arithmetic
        raise Unreachable(f"planner produced rf {proven_rf} for target {target_scale}")
    return BranchPlan(modality, target_scale, tuple(layers), proven_rf, out_jump, head_channels)


@dataclass
class ModelConfig:
    modalities: list[ModalityConfig]
    species_count: int
    branch_channels: int = 256
    head_channels: int = 512
    projection_dim: int = 1024
    seed: int = 0

    @property
    def branch_count(self) -> int:
        return sum(len(m.scales) for m in self.modalities)

    @property
    def fusion_dim(self) -> int:
        return self.projection_dim * self.branch_count

    def modality(self, name: str) -> ModalityConfig:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ConfigError(f"no modality named {name!r}")

    def validate(self) -> None:
        if not self.modalities:
            raise ConfigError("model needs at least one modality")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ConfigError("modality names must be unique")
        if self.species_count < 1:
            raise ConfigError("species_count must be >= 1")
        for m in self.modalities:
            m.validate()

    def plans(self) -> list[BranchPlan]:
        out = []
        for m in self.modalities:
            for s in m.scales:
                out.append(plan_branch(
                    m.encoder_rf, m.encoder_jump, s, m.encoder_channels,
                    self.branch_channels, self.head_channels, m.name,
                ))
        return out

    def to_dict(self) -> dict:
        return {
            "modalities": [m.to_dict() for m in self.modalities],
            "species_count": self.species_count,
            "branch_channels": self.branch_channels,
            "head_channels": self.head_channels,
            "projection_dim": self.projection_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict, species_count: int | None = None) -> "ModelConfig":
        try:
            mods = [ModalityConfig(**m) for m in d["modalities"]]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc
        s = d.get("species_count", species_count)
        if s is None:
            raise ConfigError("model config needs species_count")
        return cls(
            mods, int(s),
            int(d.get("branch_channels", 256)),
            int(d.get("head_channels", 512)),
            int(d.get("projection_dim", 1024)),
            int(d.get("seed", 0)),
        )


def required_patch_size(config: ModelConfig, modality: str) -> int:
    return max(config.modality(modality).scales)


def _crop(x: np.ndarray, size: int) -> np.ndarray:
    off = (x.shape[-1] - size) // 2
    return x[:, :, off : off + size, off : off + size]


def _central(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[1], x.shape[2]
    if h % 2 == 0 or w % 2 == 0:
        raise ShapeMismatch(f"central pixel undefined for even extent {h}x{w}")
    return x[:, h // 2, w // 2, :]


class Branch:
    def __init__(self, plan: BranchPlan, projection_dim: int, rng: np.random.Generator):
        self.plan = plan
        self.layers = Sequential([build_layer(s, rng) for s in plan.layers])
        self.projection = Linear(LayerSpec("linear", in_channels=plan.feature_dim, out_channels=projection_dim), rng)
        self.relu = ReLU()

    def parameters(self):
        return self.layers.parameters() + self.projection.parameters()

    def buffers(self):
        return self.layers.buffers()


class Model:
    """Assembled network; see the module docstring for the data flow."""

    def __init__(self, config: ModelConfig, seed: int | None = None):
        config.validate()
        self.config = config
        self.seed = config.seed if seed is None else seed
        rng = np.random.default_rng(self.seed)
        self.encoders: dict[str, Sequential] = {}
        self.branches: dict[str, list[Branch]] = {}
        plans = iter(config.plans())
        for m in config.modalities:
            self.encoders[m.name] = Sequential.from_specs(m.encoder_specs, rng)
            self.branches[m.name] = [Branch(next(plans), config.projection_dim, rng) for _ in m.scales]
        self.classifier = Linear(
            LayerSpec("linear", in_channels=config.fusion_dim, out_channels=config.species_count), rng
        )
        self.dtype = np.dtype(DTYPE)
        self._state: dict | None = None

    def cast(self, dtype) -> "Model":
        """Convert every tensor in place; float64 is used for gradient checks."""
        self.dtype = np.dtype(dtype)
        for _, p in self.named_tensors():
            p.cast(self.dtype)
        self._state = None
        return self

    # -- parameter bookkeeping -------------------------------------------
    def named_tensors(self) -> list[tuple[str, Parameter]]:
        """Every parameter and buffer in declaration order."""
        out = []
        for m in self.config.modalities:
            for i, layer in enumerate(self.encoders[m.name].layers):
                for p in layer.parameters() + layer.buffers():
                    out.append((f"{m.name}.encoder.{i}.{layer.spec.kind}.{p.name}", p))
            for b, br in enumerate(self.branches[m.name]):
                for i, layer in enumerate(br.layers.layers):
                    for p in layer.parameters() + layer.buffers():
                        out.append((f"{m.name}.branch{br.plan.target_scale}.{i}.{layer.spec.kind}.{p.name}", p))
                for p in br.projection.parameters():
                    out.append((f"{m.name}.branch{br.plan.target_scale}.projection.{p.name}", p))
        for p in self.classifier.parameters():
            out.append((f"classifier.{p.name}", p))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_tensors() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward/backward ------------------------------------------------
    def _check_inputs(self, inputs: dict[str, np.ndarray]) -> int:
        n = None
        for m in self.config.modalities:
            if m.name not in inputs:
                raise ShapeMismatch(f"missing input for modality {m.name!r}")
            x = inputs[m.name]
            need = max(m.scales)
            if x.ndim != 4 or x.shape[1] != m.in_channels or x.shape[2] != x.shape[3] or x.shape[2] < need:
                raise ShapeMismatch(
                    f"modality {m.name!r} expects (N, {m.in_channels}, >= {need}, >= {need}), got {x.shape}"
                )
            if (x.shape[2] - need) % 2:
                raise ShapeMismatch(f"modality {m.name!r} patch size must be odd")
            if n is not None and x.shape[0] != n:
                raise ShapeMismatch("modality inputs disagree on batch size")
            n = x.shape[0]
        return n

    def _branch_forward(self, m: ModalityConfig, br: Branch, x: np.ndarray, train: bool):
        enc = self.encoders[m.name]
        # patches arrive (N, bands, k, k); layers run channels-last
        xc = np.ascontiguousarray(_crop(x, br.plan.target_scale).transpose(0, 2, 3, 1))
        h, enc_cache = enc.forward(xc, train)
        z, br_cache = br.layers.forward(h, train)
        feat = _central(z)
        proj, proj_cache = br.projection.forward(feat, train)
        out, relu_cache = br.relu.forward(proj, train)
        return feat, out, (x.shape, br.plan.target_scale, enc_cache, z.shape, br_cache, proj_cache, relu_cache)

    def forward(self, inputs: dict[str, np.ndarray], train: bool = True) -> np.ndarray:
        """Species probabilities, shape (N, S)."""
        self._check_inputs(inputs)
        blocks, caches = [], []
        for m in self.config.modalities:
            x = np.asarray(inputs[m.name], dtype=self.dtype)
            for br in self.branches[m.name]:
                _, out, cache = self._branch_forward(m, br, x, train)
                blocks.append(out)
                caches.append(cache)
        fused = np.concatenate(blocks, axis=1)
        logits, cls_cache = self.classifier.forward(fused, train)
        probs = sigmoid(logits)
        self._state = {"caches": caches, "cls": cls_cache, "probs": probs, "train": train}
        return probs

    def backward(self, dprobs: np.ndarray, input_grads: bool = False) -> dict[str, np.ndarray] | None:
        """Accumulate parameter gradients given dLoss/dprobs from the last forward."""
        if self._state is None:
            raise NoForwardState("backward called without a preceding forward pass")
        state, self._state = self._state, None
        dlogits = sigmoid_backward(np.asarray(dprobs, dtype=self.dtype), state["probs"])
        dfused = self.classifier.backward(dlogits, state["cls"])
        width = self.config.projection_dim
        grads: dict[str, np.ndarray] = {}
        k = 0
        for m in self.config.modalities:
            enc = self.encoders[m.name]
            for br in self.branches[m.name]:
                xshape, crop, enc_cache, zshape, br_cache, proj_cache, relu_cache = state["caches"][k]
                dout = np.ascontiguousarray(dfused[:, k * width : (k + 1) * width])
                dproj = br.relu.backward(dout, relu_cache)
                dfeat = br.projection.backward(dproj, proj_cache)
                dz = np.zeros(zshape, dtype=self.dtype)
                dz[:, zshape[1] // 2, zshape[2] // 2, :] = dfeat
                dh = br.layers.backward(dz, br_cache)
                dxc = enc.backward(dh, enc_cache, need_dx=input_grads)
                if input_grads:
                    dx = grads.setdefault(m.name, np.zeros(xshape, dtype=self.dtype))
                    off = (xshape[-1] - crop) // 2
                    dx[:, :, off : off + crop, off : off + crop] += dxc.transpose(0, 3, 1, 2)
                k += 1
        return grads if input_grads else None

    def branch_features(self, inputs: dict[str, np.ndarray], modality: str, branch: int, train: bool = False):
        """The pre-projection central-pixel vector of one branch, shape (N, head_channels)."""
        m = self.config.modality(modality)
        br = self.branches[modality][branch]
        feat, _, _ = self._branch_forward(m, br, np.asarray(inputs[modality], dtype=self.dtype), train)
        return feat

    def predict(self, inputs: dict[str, np.ndarray], batch_size: int = 512) -> np.ndarray:
        n = self._check_inputs(inputs)
        out = []
        for start in range(0, n, batch_size):
            chunk = {k: v[start : start + batch_size] for k, v in inputs.items()}
            out.append(self.forward(chunk, train=False))
        self._state = None
        if not out:
            return np.zeros((0, self.config.species_count), dtype=self.dtype)
        return np.concatenate(out, axis=0)


def assemble(config: ModelConfig, seed: int | None = None) -> Model:
    return Model(config, seed)


def rf_verify(
    model: Model,
    modality: str,
    branch: int,
    patch_size: int | None = None,
    trials: int = 3,
    seed: int = 0,
) -> int:
    """Measured side of the minimal centered window the branch vector depends on.

    Perturbs everything outside a centered k x k window with large noise and
    compares the branch's central-pixel vector bitwise; the smallest k with
    no change is the measured extent (binary search, dependence is monotone
    in k).  Runs in eval mode so samples in a batch do not interact.
    """
    m = model.config.modality(modality)
    size = patch_size or max(m.scales)
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((1, m.in_channels, size, size)).astype(DTYPE)
    ref = model.branch_features({modality: base}, modality, branch)

    def unchanged_outside(k: int) -> bool:
        keep = np.zeros((size, size), dtype=bool)
        off = (size - k) // 2
        keep[off : off + k, off : off + k] = True
        for _ in range(trials):
            # one sample per call: BLAS results may depend on batch layout
            noise = (rng.standard_normal(base.shape) * 10).astype(DTYPE)
            x = np.where(keep, base, base + noise).astype(DTYPE)
            if not np.array_equal(model.branch_features({modality: x}, modality, branch), ref):
                return False
        return True

    lo, hi = 0, (size - 1) // 2  # search over k = 2i + 1
    while lo < hi:
        mid = (lo + hi) // 2
        if unchanged_outside(2 * mid + 1):
            hi = mid
        else:
            lo = mid + 1
    return 2 * lo + 1


def gradient_support(model: Model, modality: str, branch: int, patch_size: int | None = None, seed: int = 0) -> int:
    """Side of the centered bounding square of nonzero input gradients of one branch vector."""
    m = model.config.modality(modality)
    size = patch_size or max(m.scales)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, m.in_channels, size, size)).astype(DTYPE)
    br = model.branches[modality][branch]
    saved = [p.grad.copy() for p in model.parameters()]
    feat, _, cache = model._branch_forward(m, br, x, False)
    xshape, crop, enc_cache, zshape, br_cache, _, _ = cache
    dz = np.zeros(zshape, dtype=DTYPE)
    dz[:, zshape[1] // 2, zshape[2] // 2, :] = rng.uniform(0.5, 1.5, feat.shape).astype(DTYPE)
    dxc = model.encoders[modality].backward(br.layers.backward(dz, br_cache), enc_cache)
    for p, g in zip(model.parameters(), saved):
        p.grad[...] = g
    support = np.zeros((size, size), dtype=bool)
    off = (size - crop) // 2
    support[off : off + crop, off : off + crop] = np.abs(dxc[0]).sum(axis=-1) > 0
    rows, cols = np.nonzero(support)
    if rows.size == 0:
        return 0
    c = size // 2
    radius = int(max(np.abs(rows - c).max(), np.abs(cols - c).max()))
    return 2 * radius + 1
