"""Small convolutional VAE that supplies the compact face latent.

The input is resized to ``encode_resolution`` before encoding; that choice
sets the latent grid (``C x h x w`` with ``h = encode_resolution / 4``) and so
the embedding size. The decoder mirrors the encoder and upsamples back to the
working resolution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ALLOWED_LATENT_DIMS, Image, LatentCode, ShapeMismatch, ValidationError, WatermarkError, validate_image
from .rng import seed_torch, substream

log = logging.getLogger(__name__)

LATENT_CHANNELS = 4
DOWNSAMPLE = 4
FACE_CODEC_VERSION = "face-vae-1"


class Diverged(WatermarkError, RuntimeError):
    pass


class EmptyCorpus(WatermarkError, ValueError):
    pass


@dataclass(frozen=True)
class FaceCodecConfig:
    latent_dim: int = 1024
    image_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 64)
    kl_weight: float = 1e-4

    def __post_init__(self):
        if self.latent_dim not in ALLOWED_LATENT_DIMS:
            raise ValidationError(f"latent_dim must be one of {ALLOWED_LATENT_DIMS}, got {self.latent_dim}")
        object.__setattr__(self, "widths", tuple(self.widths))
        if len(self.widths) != 4:
            raise ValidationError("face codec needs exactly 4 stage widths")
        if self.encode_resolution > self.image_size:
            raise ValidationError(
                f"encode resolution {self.encode_resolution} exceeds image size {self.image_size}"
            )

    @property
    def latent_side(self) -> int:
        return int(round((self.latent_dim / LATENT_CHANNELS) ** 0.5))

    @property
    def encode_resolution(self) -> int:
        return self.latent_side * DOWNSAMPLE

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (LATENT_CHANNELS, self.latent_side, self.latent_side)

    def to_dict(self) -> dict:
        return asdict(self)


def _block(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(8, cout), nn.SiLU())


class FaceVAE(nn.Module):
    """Four conv stages (two strided) down to a ``4 x h x w`` Gaussian posterior."""

    def __init__(self, cfg: FaceCodecConfig):
        super().__init__()
        self.cfg = cfg
        w1, w2, w3, w4 = cfg.widths
        self.encoder = nn.Sequential(
            _block(3, w1, 1), _block(w1, w2, 2), _block(w2, w3, 2), _block(w3, w4, 1)
        )
        self.to_moments = nn.Conv2d(w4, 2 * LATENT_CHANNELS, 1)
        self.from_latent = nn.Conv2d(LATENT_CHANNELS, w4, 3, 1, 1)
        self.decoder = nn.Sequential(
            _block(w4, w4, 1),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _block(w4, w3, 1),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _block(w3, w2, 1),
            _block(w2, w1, 1),
        )
        self.refine = nn.Sequential(_block(w1, w1, 1), nn.Conv2d(w1, 3, 3, 1, 1))

    def moments(self, x: torch.Tensor):
        r = self.cfg.encode_resolution
        if x.shape[-1] != r or x.shape[-2] != r:
            x = F.interpolate(x, size=(r, r), mode="bilinear", align_corners=False, antialias=True)
        h = self.to_moments(self.encoder(x * 2 - 1))
        mu, logvar = h.chunk(2, dim=1)
        return mu, logvar.clamp(-12, 6)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.decoder(self.from_latent(z))
        size = self.cfg.image_size
        if h.shape[-1] != size:
            h = F.interpolate(h, size=(size, size), mode="bilinear", align_corners=False)
        return torch.sigmoid(self.refine(h))

    def forward(self, x: torch.Tensor, sample: bool = True):
        mu, logvar = self.moments(x)
        z = mu + torch.randn_like(mu) * torch.exp(0.5 * logvar) if sample else mu
        return self.decode(z), mu, logvar


class FaceCodec:
    """Frozen codec wrapper: posterior-mean encoding, bounded decoding."""

    def __init__(self, cfg: FaceCodecConfig, model: FaceVAE | None = None):
        self.cfg = cfg
        self.model = model if model is not None else FaceVAE(cfg)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        mu, _ = self.model.moments(x.float())
        return mu

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[1:]) != self.cfg.latent_shape:
            raise ShapeMismatch(f"latent shape {tuple(z.shape[1:])} does not match codec {self.cfg.latent_shape}")
        return self.model.decode(z.float())

    def encode(self, img: Image) -> LatentCode:
        if img.height != self.cfg.image_size or img.width != self.cfg.image_size:
            raise ShapeMismatch(f"codec expects {self.cfg.image_size}px images, got {img.height}x{img.width}")
        x = torch.from_numpy(np.array(img.pixels.transpose(2, 0, 1))).float()[None]
        with torch.no_grad():
            z = self.encode_tensor(x)[0].numpy()
        return LatentCode(z)

    def decode(self, z: LatentCode) -> Image:
        if z.shape != self.cfg.latent_shape:
            raise ShapeMismatch(f"latent shape {z.shape} does not match codec {self.cfg.latent_shape}")
        with torch.no_grad():
            out = self.decode_tensor(torch.from_numpy(np.array(z.values))[None])[0]
        return validate_image(out.double().clamp(0, 1).numpy().transpose(1, 2, 0))

    def state_dict(self) -> dict:
        return self.model.state_dict()


def encode_face(img: Image, cfg: FaceCodecConfig, codec: FaceCodec) -> LatentCode:
    if codec.cfg != cfg:
        raise ShapeMismatch("codec weights were built for a different configuration")
    return codec.encode(img)


def decode_face(z: LatentCode, cfg: FaceCodecConfig, codec: FaceCodec) -> Image:
    if codec.cfg != cfg:
        raise ShapeMismatch("codec weights were built for a different configuration")
    return codec.decode(z)


@dataclass
class CodecTrainResult:
    codec: FaceCodec
    epoch_val_loss: list[float]
    initial_val_loss: float
    step_losses: list[float]


def _to_tensor(images) -> torch.Tensor:
    return torch.from_numpy(np.stack([im.pixels.transpose(2, 0, 1) for im in images])).float()


def _recon_mse(model: FaceVAE, x: torch.Tensor, batch: int = 64) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(x), batch):
            xb = x[i : i + batch]
            rec, _, _ = model(xb, sample=False)
            total += F.mse_loss(rec, xb, reduction="sum").item()
    return total / x.numel()


def train_face_codec(
    corpus,
    cfg: FaceCodecConfig,
    epochs: int = 20,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    val_fraction: float = 0.1,
) -> CodecTrainResult:
    """Fit the VAE (MSE reconstruction + KL) on ``corpus``; deterministic given ``seed``."""
    if len(corpus) == 0:
        raise EmptyCorpus("face codec training needs a nonempty corpus")
    seed_torch(seed)
    model = FaceVAE(cfg)
    x = _to_tensor(corpus)
    n_val = max(1, int(round(len(x) * val_fraction))) if len(x) > 1 else 0
    x_val = x[:n_val] if n_val else x
    x_train = x[n_val:] if n_val else x
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    initial = _recon_mse(model, x_val)
    val_curve, steps = [], []
    for epoch in range(epochs):
        model.train()
        order = substream(seed, 1, epoch).permutation(len(x_train))
        for i in range(0, len(order), batch_size):
            xb = x_train[torch.from_numpy(order[i : i + batch_size])]
            rec, mu, logvar = model(xb)
            recon = F.mse_loss(rec, xb)
            kl = -0.5 * torch.mean(1 + logvar - mu.pow(2) - logvar.exp())
            loss = recon + cfg.kl_weight * kl
            if not torch.isfinite(loss):
                raise Diverged(f"face codec loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps.append(loss.item())
        val_curve.append(_recon_mse(model, x_val))
        log.info("face codec epoch %d val mse %.5f", epoch, val_curve[-1])
    return CodecTrainResult(FaceCodec(cfg, model), val_curve, initial, steps)
