"""Image enhancement networks and their objectives.

Two generator/discriminator pairs share one construction: a de-occlusion
network (encoder and decoder of equal depth, output size = input size) and a
4x super-resolution network (decoder two steps deeper than the encoder).
Generators use strided 5x5 convs with LeakyReLU while encoding, transposed
convs with ReLU while decoding, batch norm before every activation, and a
final norm-free conv squashed by a sigmoid. Discriminators stack strided
convs (no norm on the first), pool globally and end in a single sigmoid unit.

The generator objective combines an average-pooled sum-of-squared-errors term
with an adversarial term. The adversarial value that gets logged is the
saturating form log(1 - D(G(x))); the quantity actually minimized uses the
non-saturating -log D(G(x)), whose gradients point the same way but do not
vanish while the discriminator is winning.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, SizeError
from .netblocks import Network, act, affine, conv, init_weights, sconv, tconv

PROB_EPS = 1e-7


@dataclass(frozen=True)
class GeneratorSpec:
    encoder_channels: tuple
    decoder_channels: tuple
    kernel: int = 5

    @property
    def upscale(self) -> int:
        return 2 ** (len(self.decoder_channels) - len(self.encoder_channels))

    def layer_specs(self):
        specs = []
        prev = 3
        for c in self.encoder_channels:
            specs += [sconv(prev, c, self.kernel), act("leaky-relu")]
            prev = c
        for c in self.decoder_channels:
            specs += [tconv(prev, c, self.kernel), act("relu")]
            prev = c
        specs += [conv(prev, 3, self.kernel), act("sigmoid")]
        return specs


@dataclass(frozen=True)
class DiscriminatorSpec:
    channels: tuple
    kernel: int = 5

    def layer_specs(self):
        specs = []
        prev = 3
        for i, c in enumerate(self.channels):
            specs += [sconv(prev, c, self.kernel, has_norm=i > 0),
                      act("leaky-relu")]
            prev = c
        specs += [act("global-avg-pool"), affine(prev, 1), act("sigmoid")]
        return specs


def reconstruction_generator_spec(config) -> GeneratorSpec:
    return GeneratorSpec(tuple(config.reconstruction.enc_channels),
                         tuple(config.reconstruction.dec_channels))


def sr_generator_spec(config) -> GeneratorSpec:
    return GeneratorSpec(tuple(config.sr.enc_channels),
                         tuple(config.sr.dec_channels))


class Generator(Network):
    def __init__(self, spec: GeneratorSpec, name="generator"):
        super().__init__(spec.layer_specs(), name=name)
        self.spec = spec
        self.divisor = 2 ** len(spec.encoder_channels)
        init_weights(self)

    def forward(self, x):
        if x.shape[-2] % self.divisor or x.shape[-1] % self.divisor:
            raise ConfigError(
                f"input dims {tuple(x.shape[-2:])} not divisible by "
                f"{self.divisor} (encoder depth {len(self.spec.encoder_channels)})")
        return super().forward(x)


class Discriminator(Network):
    def __init__(self, spec: DiscriminatorSpec, input_size, name="discriminator"):
        super().__init__(spec.layer_specs(), name=name)
        self.spec = spec
        self.input_size = tuple(input_size)
        init_weights(self)

    def forward(self, x):
        if tuple(x.shape[-2:]) != self.input_size:
            raise SizeError(self.input_size, tuple(x.shape[-2:]), what="image")
        return super().forward(x).squeeze(1)


def reconstruct(occluded: torch.Tensor, generator: Generator) -> torch.Tensor:
    """Fill in the occluded input; output has the input's shape."""
    single = occluded.dim() == 3
    batch = occluded.unsqueeze(0) if single else occluded
    out = generator(batch)
    return out[0] if single else out


def super_resolve(lowres: torch.Tensor, generator: Generator) -> torch.Tensor:
    """Upscale a quarter-size input by the generator's net factor (4x)."""
    single = lowres.dim() == 3
    batch = lowres.unsqueeze(0) if single else lowres
    out = generator(batch)
    return out[0] if single else out


def discriminate(images: torch.Tensor, discriminator: Discriminator) -> torch.Tensor:
    single = images.dim() == 3
    batch = images.unsqueeze(0) if single else images
    probs = discriminator(batch)
    return probs[0] if single else probs


def loss_sse(generated: torch.Tensor, target: torch.Tensor, pool: int) -> torch.Tensor:
    """Sum of squared errors between pool x pool average-pooled images,
    divided by the batch size."""
    if generated.shape != target.shape:
        raise ValueError(
            f"shape mismatch: generated {tuple(generated.shape)} "
            f"target {tuple(target.shape)}")
    if generated.shape[-2] % pool or generated.shape[-1] % pool:
        raise ValueError(
            f"pool {pool} does not divide dims {tuple(generated.shape[-2:])}")
    g = generated.unsqueeze(0) if generated.dim() == 3 else generated
    t = target.unsqueeze(0) if target.dim() == 3 else target
    if pool > 1:
        g = F.avg_pool2d(g, pool)
        t = F.avg_pool2d(t, pool)
    return (g - t).pow(2).sum() / g.shape[0]


def loss_gen(disc_probs: torch.Tensor) -> torch.Tensor:
    """The logged adversarial value: sum of log(1 - D(G(x))) over the batch,
    divided by the batch size. Decreasing in D(G(x))."""
    p = disc_probs.clamp(PROB_EPS, 1 - PROB_EPS)
    return torch.log(1 - p).sum() / p.shape[0]


def adversarial_nonsaturating(disc_probs: torch.Tensor) -> torch.Tensor:
    """The minimized adversarial term: mean of -log D(G(x))."""
    p = disc_probs.clamp(PROB_EPS, 1 - PROB_EPS)
    return -torch.log(p).mean()


def loss_r(generated, target, disc_probs, adv_weight: float, pool: int):
    """Composite generator loss as logged: SSE term plus the weighted
    saturating adversarial value."""
    if adv_weight < 0:
        raise ValueError("adv_weight must be >= 0")
    return loss_sse(generated, target, pool) + adv_weight * loss_gen(disc_probs)


def generator_objective(generated, target, disc_probs, adv_weight: float, pool: int):
    """What the generator actually minimizes: SSE plus the weighted
    non-saturating adversarial term."""
    return (loss_sse(generated, target, pool)
            + adv_weight * adversarial_nonsaturating(disc_probs))


def discriminator_loss(real_probs: torch.Tensor, fake_probs: torch.Tensor):
    """Binary cross entropy pushing D(real) toward 1 and D(generated) toward 0."""
    real = real_probs.clamp(PROB_EPS, 1 - PROB_EPS)
    fake = fake_probs.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(torch.log(real).mean() + torch.log(1 - fake).mean())
