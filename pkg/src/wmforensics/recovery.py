"""Watermark-guided recovery: a patch transformer whose blocks cross-attend to
watermark tokens through a spatial gate derived from the predicted tamper mask."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import Image, LatentCode, ManipulationMask, ShapeMismatch, validate_image


@dataclass(frozen=True)
class RecoveryConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 256
    depth: int = 6
    heads: int = 8
    mlp_ratio: float = 2.0
    latent_shape: tuple[int, int, int] = (4, 16, 16)
    refine_channels: int = 32
    composite: bool = True
    tau: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "latent_shape", tuple(self.latent_shape))
        if self.image_size % self.patch:
            raise ShapeMismatch("image size must be divisible by the patch size")
        if self.dim % self.heads:
            raise ShapeMismatch("embedding dim must be divisible by the head count")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RecoveryInput:
    edited_masked: Image
    proxy: Image
    face_latent: LatentCode
    mask: ManipulationMask

    def __post_init__(self):
        if self.edited_masked.shape != self.proxy.shape:
            raise ShapeMismatch("edited and proxy images differ in shape")
        if self.mask.shape != self.edited_masked.shape[:2]:
            raise ShapeMismatch("mask and image differ in spatial size")


class GatedCrossAttention(nn.Module):
    """``T_x + gate * MHA(LN(T_x), LN(T_wm), LN(T_wm))``; gate is one value per image token."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_x = nn.LayerNorm(dim)
        self.norm_wm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, t_x: torch.Tensor, t_wm: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
        if t_x.shape[-1] != t_wm.shape[-1]:
            raise ShapeMismatch("image and watermark token dims differ")
        if gate.shape != t_x.shape[:2]:
            raise ShapeMismatch(f"gate shape {tuple(gate.shape)} does not match tokens {tuple(t_x.shape[:2])}")
        kv = self.norm_wm(t_wm)
        out, _ = self.attn(self.norm_x(t_x), kv, kv, need_weights=False)
        return t_x + gate[..., None] * out


def gated_cross_attention(t_x, t_wm, gate, module: GatedCrossAttention):
    return module(t_x, t_wm, gate)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross = GatedCrossAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, t, t_wm, gate):
        h = self.norm1(t)
        t = t + self.self_attn(h, h, h, need_weights=False)[0]
        t = self.cross(t, t_wm, gate)
        return t + self.mlp(self.norm2(t))


def mask_to_gate(mask: torch.Tensor, patch: int, binarize: bool = False, tau: float = 0.5) -> torch.Tensor:
    """Downsample ``(B, 1, H, W)`` masks to ``(B, tokens)`` gate values by area averaging.

    With ``binarize`` the mask is thresholded before and after averaging.
    """
    m = (mask >= tau).to(mask.dtype) if binarize else mask
    g = F.avg_pool2d(m, patch)
    if binarize:
        g = (g >= tau).to(mask.dtype)
    return g.flatten(1)


class RecoveryNet(nn.Module):
    def __init__(self, cfg: RecoveryConfig):
        super().__init__()
        self.cfg = cfg
        D, P = cfg.dim, cfg.patch
        self.patch_embed = nn.Conv2d(6, D, P, P)
        self.pos = nn.Parameter(torch.zeros(1, cfg.grid * cfg.grid, D))
        c, h, w = cfg.latent_shape
        self.wm_proj = nn.Linear(c, D)
        self.wm_pos = nn.Parameter(torch.zeros(1, h * w, D))
        self.blocks = nn.ModuleList([Block(D, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(D)
        self.unembed = nn.Linear(D, P * P * 3)
        r = cfg.refine_channels
        self.refine1 = nn.Conv2d(3 + 6, r, 3, 1, 1)
        self.refine2 = nn.Conv2d(r, 3, 3, 1, 1)
        nn.init.normal_(self.pos, std=0.02)
        nn.init.normal_(self.wm_pos, std=0.02)

    def watermark_tokens(self, z: torch.Tensor) -> torch.Tensor:
        return self.wm_proj(z.flatten(2).transpose(1, 2)) + self.wm_pos

    def forward(self, edited_masked, proxy, z_hat, mask, binarize_gate: bool = False):
        """All image inputs ``(B, C, H, W)``; ``mask`` is ``(B, 1, H, W)``. Returns the raw network image."""
        B, _, H, W = edited_masked.shape
        P = self.cfg.patch
        if H % P or W % P:
            raise ShapeMismatch("input size must be divisible by the patch size")
        inp = torch.cat([edited_masked, proxy], dim=1)
        t = self.patch_embed(inp * 2 - 1).flatten(2).transpose(1, 2) + self.pos
        t_wm = self.watermark_tokens(z_hat)
        gate = mask_to_gate(mask, P, binarize_gate, self.cfg.tau)
        for blk in self.blocks:
            t = blk(t, t_wm, gate)
        patches = self.unembed(self.norm(t))  # B, N, P*P*3
        gh, gw = H // P, W // P
        img = patches.reshape(B, gh, gw, 3, P, P).permute(0, 3, 1, 4, 2, 5).reshape(B, 3, H, W)
        h = F.gelu(self.refine1(torch.cat([img, inp], dim=1)))
        return (proxy + img + self.refine2(h)).clamp(0, 1)

    def recover(self, edited, proxy, z_hat, mask, binarize: bool = False):
        """Mask the input, run the network and (optionally) composite with authentic pixels."""
        m = (mask >= self.cfg.tau).to(mask.dtype) if binarize else mask
        edited_masked = edited * (1 - m)
        out = self.forward(edited_masked, proxy, z_hat, mask, binarize_gate=binarize)
        if self.cfg.composite:
            out = m * out + (1 - m) * edited
        return out


def build_proxy(z_hat: LatentCode, face_codec) -> Image:
    return face_codec.decode(z_hat)


def recover(inp: RecoveryInput, model: RecoveryNet) -> Image:
    """Inference path: gate and compositing use the binarized mask.

    ``edited_masked`` already has tampered pixels zeroed, so compositing
    keeps its authentic pixels.
    """
    def t(img):
        return torch.from_numpy(np.array(img.pixels.transpose(2, 0, 1))).float()[None]

    cfg = model.cfg
    if tuple(inp.face_latent.shape) != cfg.latent_shape:
        raise ShapeMismatch(f"latent {inp.face_latent.shape} does not match recovery config {cfg.latent_shape}")
    mask = torch.from_numpy(np.array(inp.mask.values)).float()[None, None]
    m_bin = (mask >= cfg.tau).float()
    edited_masked = t(inp.edited_masked) * (1 - m_bin)
    z = torch.from_numpy(np.array(inp.face_latent.values))[None]
    model.eval()
    with torch.no_grad():
        out = model(edited_masked, t(inp.proxy), z, mask, binarize_gate=True)
        if cfg.composite:
            out = m_bin * out + (1 - m_bin) * edited_masked
    return validate_image(out[0].double().clamp(0, 1).numpy().transpose(1, 2, 0))
