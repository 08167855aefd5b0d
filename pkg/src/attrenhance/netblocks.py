"""Building blocks shared by every network: layer specs, realization, init,
closed-form parameter counting and a finite-difference gradient checker.

All convolutions use "same"-style padding, so a stride-1 conv preserves the
spatial dims, a stride-2 conv halves them exactly (input dims must be even)
and a transposed conv doubles them exactly.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, VerificationError

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
# Retention factor for batch-norm running stats: running = 0.9*running + 0.1*batch.
# torch expresses the same update with momentum = 1 - retention.
BN_MOMENTUM = 0.9
INIT_STD = 0.02

KINDS = (
    "conv",
    "strided-conv",
    "transposed-conv",
    "batch-norm",
    "leaky-relu",
    "relu",
    "sigmoid",
    "global-avg-pool",
    "avg-pool",
    "affine",
)

_CONV_KINDS = ("conv", "strided-conv", "transposed-conv")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network. ``has_norm`` attaches a batch-norm directly
    after a conv kind (before whatever activation follows)."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 5
    stride: int = 1
    has_norm: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "strided-conv" and self.stride != 2:
            raise ConfigError("strided-conv uses stride 2")

    def param_count(self) -> int:
        """Closed-form number of trainable parameters."""
        if self.kind in _CONV_KINDS:
            n = self.kernel * self.kernel * self.in_channels * self.out_channels
            if self.has_norm:
                n += 2 * self.out_channels  # norm scale/shift, conv has no bias
            else:
                n += self.out_channels  # conv bias
            return n
        if self.kind == "batch-norm":
            return 2 * self.in_channels
        if self.kind == "affine":
            return self.in_channels * self.out_channels + self.out_channels
        return 0


def conv(in_channels, out_channels, kernel=5, has_norm=False):
    return LayerSpec("conv", in_channels, out_channels, kernel, 1, has_norm)


def sconv(in_channels, out_channels, kernel=5, has_norm=True):
    return LayerSpec("strided-conv", in_channels, out_channels, kernel, 2, has_norm)


def tconv(in_channels, out_channels, kernel=5, has_norm=True):
    return LayerSpec("transposed-conv", in_channels, out_channels, kernel, 2, has_norm)


def act(kind):
    return LayerSpec(kind)


def affine(in_features, out_features):
    return LayerSpec("affine", in_features, out_features)


def parameter_count(specs) -> int:
    return sum(s.param_count() for s in specs)


class _ConvUnit(nn.Module):
    """Conv / strided conv / transposed conv with optional attached norm and
    shape validation that names the layer on mismatch."""

    def __init__(self, spec: LayerSpec, name: str):
        super().__init__()
        self.spec = spec
        self.name = name
        k, p = spec.kernel, spec.kernel // 2
        bias = not spec.has_norm
        if spec.kind == "transposed-conv":
            self.conv = nn.ConvTranspose2d(
                spec.in_channels, spec.out_channels, k, stride=2,
                padding=p, output_padding=2 * p - k + 2, bias=bias)
        else:
            self.conv = nn.Conv2d(
                spec.in_channels, spec.out_channels, k,
                stride=spec.stride, padding=p, bias=bias)
        self.norm = (
            nn.BatchNorm2d(spec.out_channels, eps=BN_EPS, momentum=1.0 - BN_MOMENTUM)
            if spec.has_norm else None
        )

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise ConfigError(
                f"{self.name} ({self.spec.kind} {self.spec.in_channels}->"
                f"{self.spec.out_channels}): got input shape {tuple(x.shape)}")
        if self.spec.kind == "strided-conv" and (x.shape[2] % 2 or x.shape[3] % 2):
            raise ConfigError(
                f"{self.name}: spatial dims {tuple(x.shape[2:])} not divisible by 2")
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return x


class _Affine(nn.Module):
    def __init__(self, spec: LayerSpec, name: str):
        super().__init__()
        self.spec = spec
        self.name = name
        self.linear = nn.Linear(spec.in_channels, spec.out_channels)

    def forward(self, x):
        x = torch.flatten(x, 1)
        if x.shape[1] != self.spec.in_channels:
            raise ConfigError(
                f"{self.name} (affine {self.spec.in_channels}->{self.spec.out_channels}): "
                f"got {x.shape[1]} features")
        return self.linear(x)


def build_layer(spec: LayerSpec, name: str = "layer") -> nn.Module:
    if spec.kind in _CONV_KINDS:
        return _ConvUnit(spec, name)
    if spec.kind == "batch-norm":
        return nn.BatchNorm2d(spec.in_channels, eps=BN_EPS, momentum=1.0 - BN_MOMENTUM)
    if spec.kind == "leaky-relu":
        return nn.LeakyReLU(LEAKY_SLOPE)
    if spec.kind == "relu":
        return nn.ReLU()
    if spec.kind == "sigmoid":
        return nn.Sigmoid()
    if spec.kind == "global-avg-pool":
        return nn.AdaptiveAvgPool2d(1)
    if spec.kind == "avg-pool":
        return nn.AvgPool2d(spec.kernel)
    if spec.kind == "affine":
        return _Affine(spec, name)
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


class Network(nn.Module):
    """A straight-line stack of LayerSpecs."""

    def __init__(self, specs, name="net"):
        super().__init__()
        self.specs = tuple(specs)
        self.layers = nn.ModuleList(
            build_layer(s, f"{name}[{i}]") for i, s in enumerate(self.specs))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def param_count(self) -> int:
        return parameter_count(self.specs)


def init_weights(module: nn.Module) -> None:
    """Truncated normal (std 0.02, cut at 2 std) for conv and linear weights,
    ones/zeros for norm scale/shift, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def gradient_check(fn, params, samples=64, eps=1e-3, seed=0):
    """Compare autograd gradients of a scalar-valued ``fn`` against central
    finite differences on randomly sampled coordinates.

    ``params`` maps names to tensors; they are copied to float64 leaves before
    anything runs, so callers can pass float32 model parameters directly.
    ``fn`` must be deterministic and accept the mapping. Returns the max over
    sampled coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps {eps} outside [1e-5, 1e-2]")
    work = {k: v.detach().to(torch.float64).clone().requires_grad_(True)
            for k, v in params.items()}
    loss = fn(work)
    if not torch.isfinite(loss):
        raise VerificationError(f"loss is not finite at the base point: {loss.item()}")
    grads = torch.autograd.grad(loss, list(work.values()), allow_unused=True)
    analytic = {}
    for (name, p), g in zip(work.items(), grads):
        analytic[name] = torch.zeros_like(p) if g is None else g

    coords = [(name, i) for name, p in work.items() for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    if samples < len(coords):
        picked = [coords[i] for i in rng.choice(len(coords), size=samples, replace=False)]
    else:
        picked = coords

    frozen = {k: v.detach().clone() for k, v in work.items()}

    def eval_at(name, idx, delta):
        shifted = dict(frozen)
        t = frozen[name].clone()
        t.view(-1)[idx] += delta
        shifted[name] = t
        with torch.no_grad():
            value = fn(shifted)
        if not torch.isfinite(value):
            raise VerificationError(
                f"loss not finite at perturbed coordinate {name}[{idx}]")
        return float(value)

    worst = 0.0
    for name, idx in picked:
        numeric = (eval_at(name, idx, eps) - eval_at(name, idx, -eps)) / (2 * eps)
        a = float(analytic[name].view(-1)[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
