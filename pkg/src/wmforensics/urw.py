"""Joint ownership-code + face-latent watermark: embedder and extractor networks."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import (
    Image,
    LatentCode,
    OwnershipCode,
    ShapeMismatch,
    WatermarkPayload,
    validate_image,
)


@dataclass(frozen=True)
class URWConfig:
    n_bits: int = 64
    latent_shape: tuple[int, int, int] = (4, 16, 16)
    image_size: int = 64
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    scales: int = 3
    scale_channels: int = 64
    strength: float = 1.0
    # per-image residual RMS before strength scaling; None leaves it free
    residual_rms: float | None = 0.012

    def __post_init__(self):
        if self.residual_rms is not None and self.residual_rms <= 0:
            raise ValueError("residual_rms must be positive")
        object.__setattr__(self, "latent_shape", tuple(self.latent_shape))
        object.__setattr__(self, "widths", tuple(self.widths))

    @property
    def latent_dim(self) -> int:
        c, h, w = self.latent_shape
        return c * h * w

    @property
    def bottleneck(self) -> int:
        return self.image_size // 8

    @property
    def code_grid(self) -> int:
        # side of the low-frequency code pattern
        return self.image_size // 4

    def scale_sizes(self) -> list[int]:
        # 1/4, 1/8, 1/16 of the working resolution
        return [self.image_size // (4 * 2**s) for s in range(self.scales)]

    def to_dict(self) -> dict:
        return asdict(self)


def conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(8, cout), nn.LeakyReLU(0.2, inplace=True)
    )


class Embedder(nn.Module):
    """U-Net on the cover image conditioned on the payload.

    Code bits are broadcast to constant planes at full resolution (input and
    last decoder stage) and at the bottleneck, where the face latent is
    resized and concatenated. A separate linear map turns the bits into a
    low-frequency pattern added to the residual; keeping the code on its own
    path stops the much larger latent from drowning it early in training.
    """

    def __init__(self, cfg: URWConfig):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_bits
        c1, c2, c3, c4 = cfg.widths
        lc = cfg.latent_shape[0]
        self.inc = nn.Sequential(conv_block(3 + n, c1), conv_block(c1, c1))
        self.down1 = conv_block(c1, c2, 2)
        self.down2 = conv_block(c2, c3, 2)
        self.down3 = conv_block(c3, c4, 2)
        self.mid = nn.Sequential(conv_block(c4 + n + lc, c4), conv_block(c4, c4))
        self.up3 = conv_block(c4 + c3, c3)
        self.up2 = conv_block(c3 + c2, c2)
        self.up1 = conv_block(c2 + c1 + n, c1)
        self.out = nn.Conv2d(c1, 3, 1)
        g = cfg.code_grid
        self.code_pattern = nn.Linear(n, 3 * g * g)

    def forward(self, x: torch.Tensor, bits: torch.Tensor, latent: torch.Tensor) -> torch.Tensor:
        """Return the residual to add to ``x`` (before strength scaling and clamping)."""
        H, W = x.shape[-2:]
        m = (bits * 2 - 1)[:, :, None, None]
        x0 = self.inc(torch.cat([x * 2 - 1, m.expand(-1, -1, H, W)], dim=1))
        x1 = self.down1(x0)
        x2 = self.down2(x1)
        x3 = self.down3(x2)
        b = x3.shape[-1]
        lat = F.interpolate(latent, size=(b, b), mode="bilinear", align_corners=False)
        h = self.mid(torch.cat([x3, m.expand(-1, -1, b, b), lat], dim=1))
        h = self.up3(torch.cat([F.interpolate(h, scale_factor=2), x2], dim=1))
        h = self.up2(torch.cat([F.interpolate(h, scale_factor=2), x1], dim=1))
        h = self.up1(torch.cat([F.interpolate(h, scale_factor=2), x0, m.expand(-1, -1, H, W)], dim=1))
        g = self.cfg.code_grid
        pattern = self.code_pattern(bits * 2 - 1).reshape(-1, 3, g, g)
        return self.out(h) + F.interpolate(pattern, size=(H, W), mode="bilinear", align_corners=False)


class Extractor(nn.Module):
    """Strided conv pyramid with taps at 1/4, 1/8, 1/16; code and latent heads.

    Both heads read the flattened coarsest tap (position-aware) together with
    globally pooled features from every tap.
    """

    def __init__(self, cfg: URWConfig):
        super().__init__()
        self.cfg = cfg
        cs = cfg.scale_channels
        self.stem = nn.Sequential(conv_block(3, 16), conv_block(16, 32, 2), conv_block(32, cs, 2), conv_block(cs, cs))
        self.stages = nn.ModuleList([conv_block(cs, cs, 2) for _ in range(cfg.scales - 1)])
        self.refine = nn.ModuleList([conv_block(cs, cs) for _ in range(cfg.scales - 1)])
        last = cfg.scale_sizes()[-1]
        self.code_conv = conv_block(cs, 64)
        self.code_head = nn.Linear(64 * last * last + cs * cfg.scales, cfg.n_bits)
        self.latent_conv = conv_block(cs, 128)
        self.latent_head = nn.Linear(128 * last * last + cs * cfg.scales, cfg.latent_dim)

    def forward(self, x: torch.Tensor):
        feats = [self.stem(x * 2 - 1)]
        for stage, refine in zip(self.stages, self.refine):
            feats.append(refine(stage(feats[-1])))
        pooled = torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1)
        logits = self.code_head(torch.cat([self.code_conv(feats[-1]).flatten(1), pooled], dim=1))
        lat = self.latent_conv(feats[-1]).flatten(1)
        latent = self.latent_head(torch.cat([lat, pooled], dim=1)).reshape(-1, *self.cfg.latent_shape)
        return logits, latent, feats


class URWCodec(nn.Module):
    def __init__(self, cfg: URWConfig):
        super().__init__()
        self.cfg = cfg
        self.embedder = Embedder(cfg)
        self.extractor = Extractor(cfg)
        # training-time multiplier on residual_rms (annealed towards 1)
        self.rms_scale = 1.0

    def embed_tensor(self, x, bits, latent):
        residual = self.embedder(x, bits, latent)
        if self.cfg.residual_rms is not None:
            rms = residual.pow(2).mean(dim=(1, 2, 3), keepdim=True).add(1e-12).sqrt()
            residual = residual * (self.cfg.residual_rms * self.rms_scale / rms)
        residual = self.cfg.strength * residual
        return (x + residual).clamp(0, 1), residual

    def extract_tensor(self, x):
        return self.extractor(x)


@dataclass
class ExtractionResult:
    code_logits: np.ndarray
    code: OwnershipCode
    face_latent_hat: LatentCode
    wm_features: list[np.ndarray]


def _as_tensor(img: Image) -> torch.Tensor:
    return torch.from_numpy(np.array(img.pixels.transpose(2, 0, 1))).float()[None]


def logits_to_bits(logits) -> np.ndarray:
    # strict: a logit of exactly 0 decodes to 0
    return (np.asarray(logits) > 0).astype(int)


def embed(img: Image, payload: WatermarkPayload, codec: URWCodec) -> Image:
    cfg = codec.cfg
    if payload.code.n != cfg.n_bits or payload.face_latent.shape != cfg.latent_shape:
        raise ShapeMismatch(
            f"payload ({payload.code.n} bits, latent {payload.face_latent.shape}) does not match "
            f"codec ({cfg.n_bits} bits, latent {cfg.latent_shape})"
        )
    if img.height != cfg.image_size or img.width != cfg.image_size:
        raise ShapeMismatch(f"codec expects {cfg.image_size}px images")
    codec.eval()
    with torch.no_grad():
        bits = torch.from_numpy(payload.code.as_array())[None]
        lat = torch.from_numpy(np.array(payload.face_latent.values))[None]
        out, _ = codec.embed_tensor(_as_tensor(img), bits, lat)
    return validate_image(out[0].double().clamp(0, 1).numpy().transpose(1, 2, 0))


def extract(img: Image, codec: URWCodec) -> ExtractionResult:
    cfg = codec.cfg
    if img.height != cfg.image_size or img.width != cfg.image_size:
        raise ShapeMismatch(f"codec expects {cfg.image_size}px images")
    codec.eval()
    with torch.no_grad():
        logits, latent, feats = codec.extract_tensor(_as_tensor(img))
    logits = logits[0].double().numpy()
    return ExtractionResult(
        code_logits=logits,
        code=OwnershipCode(tuple(logits_to_bits(logits).tolist())),
        face_latent_hat=LatentCode(latent[0].numpy()),
        wm_features=[f[0].numpy() for f in feats],
    )
