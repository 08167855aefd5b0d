"""Part-based attribute classifier: one shared residual backbone applied to
the whole body and three fixed part crops, per-region affine scoring heads,
max-fused part scores added to the body score, and the ratio-weighted binary
cross entropy used to train it.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, SizeError
from .netblocks import init_weights

# 1-indexed, inclusive row-block ranges out of 10 equal-height blocks
PART_BLOCKS = {"head": (1, 4), "upper": (3, 7), "lower": (6, 10)}
REGIONS = ("body", "head", "upper", "lower")


@dataclass(frozen=True)
class PartPartition:
    height: int
    blocks: int = 10

    def __post_init__(self):
        if self.height % self.blocks:
            raise ConfigError(
                f"height {self.height} not divisible into {self.blocks} blocks")

    def rows(self, part: str):
        if part == "body":
            return 0, self.height
        first, last = PART_BLOCKS[part]
        unit = self.height // self.blocks
        return (first - 1) * unit, last * unit


def decompose(images: torch.Tensor):
    """Crop (B, 3, H, W) into whole-body, head-shoulder, upper and lower
    regions. Crops are views of the input."""
    partition = PartPartition(images.shape[-2])
    crops = []
    for part in REGIONS:
        lo, hi = partition.rows(part)
        crops.append(images[..., lo:hi, :])
    return tuple(crops)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + x)


class Backbone(nn.Module):
    """Stem plus stride-2 residual stages, global average pooled to a feature
    vector, so any sufficiently large region size is accepted."""

    def __init__(self, channels=(16, 16, 32, 64)):
        super().__init__()
        if len(channels) < 2:
            raise ConfigError("backbone needs a stem width and >= 1 stage")
        self.stem = nn.Sequential(
            nn.Conv2d(3, channels[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(channels[0]),
            nn.ReLU(),
        )
        stages = []
        prev = channels[0]
        for c in channels[1:]:
            stages.append(nn.Sequential(
                nn.Conv2d(prev, c, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(),
                ResidualBlock(c),
            ))
            prev = c
        self.stages = nn.ModuleList(stages)
        self.feature_dim = channels[-1]
        self.downsamples = len(channels) - 1

    def forward(self, x):
        min_dim = 2 ** self.downsamples
        if x.shape[-2] < min_dim or x.shape[-1] < min_dim:
            raise ConfigError(
                f"region {tuple(x.shape[-2:])} too small for "
                f"{self.downsamples} downsampling stages")
        x = self.stem(x)
        for stage in self.stages:
            if x.shape[-2] % 2 or x.shape[-1] % 2:
                raise ConfigError(
                    f"region dims {tuple(x.shape[-2:])} not divisible by 2 at "
                    "a downsampling stage")
            x = stage(x)
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


def fuse_scores(body_scores: torch.Tensor, part_scores: torch.Tensor):
    """body (B, A) plus the per-attribute max over parts (P, B, A). Ties pick
    the lowest part index, which fixes the subgradient deterministically."""
    return body_scores + part_scores.max(dim=0).values


class AttributeClassifier(nn.Module):
    def __init__(self, num_attributes, input_size, channels=(16, 16, 32, 64)):
        super().__init__()
        self.num_attributes = num_attributes
        self.input_size = tuple(input_size)
        self.backbone = Backbone(channels)
        c = self.backbone.feature_dim
        self.body_head = nn.Linear(c, num_attributes)
        self.part_heads = nn.ModuleList(
            nn.Linear(c, num_attributes) for _ in PART_BLOCKS)
        init_weights(self)

    def region_features(self, region):
        return self.backbone(region)

    def forward(self, images):
        body, head, upper, lower = decompose(images)
        body_scores = self.body_head(self.region_features(body))
        part_scores = torch.stack([
            h(self.region_features(r))
            for h, r in zip(self.part_heads, (head, upper, lower))
        ])
        return fuse_scores(body_scores, part_scores)


def weighted_bce(scores: torch.Tensor, labels: torch.Tensor,
                 ratios: torch.Tensor) -> torch.Tensor:
    """Per-attribute imbalance-weighted binary cross entropy: positives are
    weighted 1/(2 r_i), negatives 1/(2 (1 - r_i)), summed over attributes and
    averaged over the mini-batch. Predicted probabilities are clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    if ((ratios <= 0) | (ratios >= 1)).any():
        raise ConfigError("attribute ratios must lie strictly in (0, 1)")
    probs = torch.sigmoid(scores).clamp(1e-7, 1 - 1e-7)
    pos_w = 1.0 / (2.0 * ratios)
    neg_w = 1.0 / (2.0 * (1.0 - ratios))
    per_attr = -(pos_w * labels * torch.log(probs)
                 + neg_w * (1.0 - labels) * torch.log(1.0 - probs))
    return per_attr.sum(dim=-1).mean()


def predict(images, model: AttributeClassifier) -> torch.Tensor:
    """Eval-mode attribute probabilities for a batch (or single image)."""
    single = images.dim() == 3
    if single:
        images = images.unsqueeze(0)
    if tuple(images.shape[-2:]) != model.input_size:
        raise SizeError(model.input_size, tuple(images.shape[-2:]), what="image")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            probs = torch.sigmoid(model(images))
    finally:
        if was_training:
            model.train()
    return probs[0] if single else probs
