"""Training objectives. Every reduction is a mean so the weights stay resolution-independent."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ShapeMismatch, WatermarkError

DICE_EPS = 1.0


class NonFinitePart(WatermarkError, ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    decode: float = 1.0   # lambda_1
    loc: float = 1.0      # lambda_2
    rec: float = 2.0      # lambda_3

    def __post_init__(self):
        if min(self.decode, self.loc, self.rec) < 0:
            raise ValueError("loss weights must be nonnegative")


class PerceptualExtractor(nn.Module):
    """Frozen random-weight conv pyramid standing in for a pretrained feature network.

    Any module returning a list of feature maps can be passed to the losses
    instead.
    """

    def __init__(self, channels=(16, 32, 32, 64), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for i, c in enumerate(channels):
            conv = nn.Conv2d(cin, c, 3, 2 if i else 1, 1)
            with torch.no_grad():
                # He-style scaling keeps activation magnitudes roughly constant across depth
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            layers.append(conv)
            cin = c
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.layers:
            h = F.relu(conv(h))
            feats.append(h)
        return feats


class IdentityFeatures(nn.Module):
    """Single-layer identity feature map; used for closed-form checks."""

    def forward(self, x):
        return [x]


def _check(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def perceptual_l1(a, b, phi) -> torch.Tensor:
    return sum(F.l1_loss(fa, fb) for fa, fb in zip(phi(a), phi(b)))


def embed_loss(i_wm: torch.Tensor, i_ori: torch.Tensor, phi) -> torch.Tensor:
    _check(i_wm, i_ori)
    return F.mse_loss(i_wm, i_ori) + perceptual_l1(i_wm, i_ori, phi)


def decode_loss(logits, code, z_hat, z) -> torch.Tensor:
    _check(logits, code)
    _check(z_hat, z)
    return F.binary_cross_entropy_with_logits(logits, code.to(logits.dtype)) + F.mse_loss(z_hat, z)


def dice_loss(pred, truth, eps: float = DICE_EPS) -> torch.Tensor:
    """Smooth Dice over the whole tensor (per-sample when 4-D, then averaged)."""
    _check(pred, truth)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if pred.dim() == 4:
        dims = (1, 2, 3)
        inter = (pred * truth).sum(dim=dims)
        denom = pred.sum(dim=dims) + truth.sum(dim=dims)
        return (1 - (2 * inter + eps) / (denom + eps)).mean()
    inter = (pred * truth).sum()
    return 1 - (2 * inter + eps) / (pred.sum() + truth.sum() + eps)


def rec_loss(i_hat, i, phi) -> torch.Tensor:
    _check(i_hat, i)
    return F.l1_loss(i_hat, i) + perceptual_l1(i_hat, i, phi)


def total_loss(embed, decode, loc, rec, w: LossWeights = LossWeights()):
    parts = {"embed": embed, "decode": decode, "loc": loc, "rec": rec}
    for name, v in parts.items():
        val = v.detach() if isinstance(v, torch.Tensor) else torch.tensor(float(v))
        if not torch.isfinite(val).all():
            raise NonFinitePart(f"loss part {name!r} is not finite")
    return embed + w.decode * decode + w.loc * loc + w.rec * rec
