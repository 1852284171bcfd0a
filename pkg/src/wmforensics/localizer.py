"""Watermark-guided forgery localization.

An image-branch U-Net supplies multi-scale features and its own decoder
logits; a watermark branch re-encodes the extractor's feature taps. Per-scale
cosine similarity between the two projected streams is fused into an
evidence map, and the final mask blends both evidence maps with a learnable
weight.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import Image, ManipulationMask, ShapeMismatch, WatermarkError
from .urw import conv_block

EPS = 1e-8


class IncompletePyramid(WatermarkError, ValueError):
    pass


@dataclass(frozen=True)
class LocalizerConfig:
    image_size: int = 64
    scales: int = 3
    scale_channels: int = 64
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    fusion_channels: int = 32
    use_similarity: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))

    def to_dict(self) -> dict:
        return asdict(self)


def similarity_map(f_img, f_wm, eps: float = EPS):
    """Channel-wise cosine similarity per pixel; accepts ``(C, H, W)`` or ``(B, C, H, W)``.

    Works on numpy arrays or torch tensors and returns the same kind.
    """
    if tuple(f_img.shape) != tuple(f_wm.shape):
        raise ShapeMismatch(f"feature shapes differ: {tuple(f_img.shape)} vs {tuple(f_wm.shape)}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(f_img, torch.Tensor):
        axis = f_img.dim() - 3
        dot = (f_img * f_wm).sum(dim=axis)
        na = f_img.norm(dim=axis).clamp_min(eps)
        nb = f_wm.norm(dim=axis).clamp_min(eps)
        return (dot / (na * nb)).clamp(-1.0, 1.0)
    a = np.asarray(f_img, dtype=np.float64)
    b = np.asarray(f_wm, dtype=np.float64)
    axis = a.ndim - 3
    dot = (a * b).sum(axis=axis)
    na = np.maximum(np.linalg.norm(a, axis=axis), eps)
    nb = np.maximum(np.linalg.norm(b, axis=axis), eps)
    return np.clip(dot / (na * nb), -1.0, 1.0)


class FusionHead(nn.Module):
    """Two conv layers with normalization; output is a pre-sigmoid evidence map."""

    def __init__(self, scales: int, channels: int = 32):
        super().__init__()
        self.scales = scales
        self.conv1 = nn.Conv2d(scales, channels, 3, 1, 1)
        self.norm = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, 1, 3, 1, 1)

    def forward(self, sims: list[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
        if len(sims) != self.scales:
            raise IncompletePyramid(f"expected {self.scales} similarity maps, got {len(sims)}")
        up = [F.interpolate(s[:, None] if s.dim() == 3 else s, size=size, mode="bilinear", align_corners=False) for s in sims]
        h = F.relu(self.norm(self.conv1(torch.cat(up, dim=1))))
        return self.conv2(h)


class ImageBranch(nn.Module):
    def __init__(self, cfg: LocalizerConfig):
        super().__init__()
        c1, c2, c3, c4 = cfg.widths
        self.inc = conv_block(3, c1)
        self.d1 = conv_block(c1, c2, 2)   # 1/2
        self.d2 = conv_block(c2, c3, 2)   # 1/4
        self.d3 = conv_block(c3, c4, 2)   # 1/8
        self.d4 = conv_block(c4, c4, 2)   # 1/16
        self.u3 = conv_block(c4 + c4, c4)
        self.u2 = conv_block(c4 + c3, c3)
        self.u1 = conv_block(c3 + c2, c2)
        self.u0 = conv_block(c2 + c1, c1)
        self.head = nn.Conv2d(c1, 1, 1)
        self.taps = (c3, c4, c4)

    def forward(self, x):
        x0 = self.inc(x * 2 - 1)
        x1 = self.d1(x0)
        x2 = self.d2(x1)
        x3 = self.d3(x2)
        x4 = self.d4(x3)
        h = self.u3(torch.cat([F.interpolate(x4, scale_factor=2), x3], 1))
        h = self.u2(torch.cat([F.interpolate(h, scale_factor=2), x2], 1))
        h = self.u1(torch.cat([F.interpolate(h, scale_factor=2), x1], 1))
        h = self.u0(torch.cat([F.interpolate(h, scale_factor=2), x0], 1))
        return self.head(h), [x2, x3, x4]


class Localizer(nn.Module):
    def __init__(self, cfg: LocalizerConfig):
        super().__init__()
        self.cfg = cfg
        cs = cfg.scale_channels
        self.image_branch = ImageBranch(cfg)
        if cfg.use_similarity:
            taps = self.image_branch.taps[: cfg.scales]
            self.img_proj = nn.ModuleList([nn.Conv2d(c, cs, 1) for c in taps])
            self.wm_branch = nn.ModuleList([conv_block(cs, cs) for _ in range(cfg.scales)])
            self.wm_proj = nn.ModuleList([nn.Conv2d(cs, cs, 1) for _ in range(cfg.scales)])
            self.fusion = FusionHead(cfg.scales, cfg.fusion_channels)
            # alpha = sigmoid(alpha_raw); 0.5 at init
            self.alpha_raw = nn.Parameter(torch.zeros(()))

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.alpha_raw)

    def similarity_pyramid(self, img_feats, wm_feats):
        return [
            similarity_map(self.img_proj[s](img_feats[s]), self.wm_proj[s](self.wm_branch[s](wm_feats[s])))
            for s in range(self.cfg.scales)
        ]

    def forward(self, x: torch.Tensor, wm_feats: list[torch.Tensor] | None = None):
        """Return ``(mask_prob, parts)`` where ``parts`` holds the evidence maps."""
        e_dec, img_feats = self.image_branch(x)
        if not self.cfg.use_similarity:
            return torch.sigmoid(e_dec), {"e_dec": e_dec}
        if wm_feats is None or len(wm_feats) < self.cfg.scales:
            raise IncompletePyramid("watermark feature pyramid is incomplete")
        sims = self.similarity_pyramid(img_feats, wm_feats)
        f_sim = self.fusion(sims, tuple(x.shape[-2:]))
        a = self.alpha
        logit = a * e_dec + (1 - a) * f_sim
        return torch.sigmoid(logit), {"e_dec": e_dec, "f_sim": f_sim, "sims": sims}


def fuse_similarity(pyr: list[np.ndarray], model: Localizer, size: tuple[int, int]) -> np.ndarray:
    """Fusion head on a numpy similarity pyramid; returns the ``H x W`` pre-sigmoid map."""
    sims = [torch.as_tensor(np.asarray(s), dtype=torch.float32)[None] for s in pyr]
    with torch.no_grad():
        return model.fusion(sims, size)[0, 0].double().numpy()


def localize(img: Image, wm_features: list[np.ndarray], model: Localizer) -> ManipulationMask:
    x = torch.from_numpy(np.array(img.pixels.transpose(2, 0, 1))).float()[None]
    feats = [torch.as_tensor(np.asarray(f), dtype=torch.float32)[None] for f in wm_features]
    model.eval()
    with torch.no_grad():
        prob, _ = model(x, feats if model.cfg.use_similarity else None)
    return ManipulationMask(prob[0, 0].double().clamp(0, 1).numpy())
