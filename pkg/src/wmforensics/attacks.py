"""Generative-editing attack simulator.

Stages, in order: latent channel mixing through the face codec, Poisson
blending of a source face under a procedural mask, then random degradations
(approximate JPEG, Gaussian noise, color jitter). The numpy entry points
operate on single :class:`Image` values; the ``*_batch`` variants operate on
``(B, 3, H, W)`` tensors and keep a gradient path for training.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch
from scipy import ndimage

from .datamodel import (
    ChannelMask,
    Image,
    LatentCode,
    ManipulationMask,
    ShapeMismatch,
    ValidationError,
    WatermarkError,
    validate_image,
)

DIRECT_SOLVE_LIMIT = 10_000
SOLVER_TOL = 1e-5


class BadProbability(ValidationError):
    pass


class EmptyMask(WatermarkError, ValueError):
    pass


class MaskTouchesBorder(WatermarkError, ValueError):
    pass


class SolverNotConverged(WatermarkError, RuntimeError):
    pass


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class DegradationSpec:
    jpeg: bool = True
    noise: bool = True
    jitter: bool = True
    jpeg_quality: tuple[float, float] = (30.0, 95.0)
    noise_sigma: tuple[float, float] = (0.0, 0.06)
    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    # probability that each enabled degradation fires on a given sample
    prob: float = 0.5

    def __post_init__(self):
        for name in ("jpeg_quality", "noise_sigma", "brightness", "contrast"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name} range is not ordered: {lo} > {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not 1 <= self.jpeg_quality[0] <= 100 or self.jpeg_quality[1] > 100:
            raise ValidationError("jpeg quality must lie in [1, 100]")
        if self.noise_sigma[0] < 0:
            raise ValidationError("noise sigma must be nonnegative")
        if not 0 <= self.prob <= 1:
            raise BadProbability(f"degradation probability {self.prob} not in [0, 1]")

    @property
    def any_enabled(self) -> bool:
        return self.jpeg or self.noise or self.jitter


@dataclass(frozen=True)
class AttackConfig:
    enable_latent_mixing: bool = True
    enable_blending: bool = True
    degradations: DegradationSpec = field(default_factory=DegradationSpec)
    channel_density: float = 0.5
    # per-sample firing probabilities of the content-replacing stages
    blend_prob: float = 1.0
    mixing_prob: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.channel_density < 1:
            raise BadProbability(f"channel density must lie in (0, 1), got {self.channel_density}")
        for name in ("blend_prob", "mixing_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise BadProbability(f"{name} must lie in [0, 1]")
        if isinstance(self.degradations, dict):
            object.__setattr__(self, "degradations", DegradationSpec(**self.degradations))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        deg = d.pop("degradations", None)
        if deg is not None:
            deg = {k: tuple(v) if isinstance(v, list) else v for k, v in deg.items()}
            d["degradations"] = DegradationSpec(**deg)
        return cls(**d)


NO_DEGRADATION = DegradationSpec(jpeg=False, noise=False, jitter=False)

# Ablation arms of the attack-simulator study.
ARMS = {
    "none": AttackConfig(enable_latent_mixing=False, enable_blending=False, degradations=NO_DEGRADATION),
    "noise": AttackConfig(enable_latent_mixing=False, enable_blending=False),
    "blend": AttackConfig(enable_latent_mixing=False, enable_blending=True),
    "full": AttackConfig(enable_latent_mixing=True, enable_blending=True),
}


def arm_config(name: str, **overrides) -> AttackConfig:
    if name not in ARMS:
        raise ValidationError(f"unknown ablation arm {name!r}; expected one of {sorted(ARMS)}")
    d = asdict(ARMS[name])
    d.update(overrides)
    return AttackConfig.from_dict(d)


@dataclass
class AttackOutcome:
    edited: Image
    ground_truth_mask: ManipulationMask
    provenance: list[str]


# ---------------------------------------------------------------- latent mixing


def sample_channel_mask(C: int, p: float, rng: np.random.Generator) -> ChannelMask:
    if not 0 < p < 1:
        raise BadProbability(f"channel-mask density must lie in (0, 1), got {p}")
    if C < 1:
        raise ValidationError("channel count must be positive")
    return ChannelMask(tuple((rng.random(C) < p).astype(int).tolist()))


def mix_latents(z_pro: LatentCode, z_src: LatentCode, m: ChannelMask) -> LatentCode:
    if z_pro.shape != z_src.shape:
        raise ShapeMismatch(f"latent shapes differ: {z_pro.shape} vs {z_src.shape}")
    if len(m) != z_pro.shape[0]:
        raise ShapeMismatch(f"channel mask has {len(m)} entries for {z_pro.shape[0]} channels")
    sel = m.as_array()[:, None, None]
    return LatentCode(sel * z_src.values + (1 - sel) * z_pro.values)


def mix_latents_batch(z_pro: torch.Tensor, z_src: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """``m`` is ``(B, C)``; broadcast over the spatial axes."""
    m = m[:, :, None, None].to(z_pro.dtype)
    return m * z_src + (1 - m) * z_pro


# ---------------------------------------------------------------- blend masks


def generate_blend_mask(h: int, w: int, rng: np.random.Generator) -> ManipulationMask:
    """Random star-shaped blob: an ellipse whose radius is perturbed by low-order harmonics.

    Star-shaped around its center, hence one connected component. Area lies in
    [5%, 60%] of the frame, the center in the central 2/3, and a one-pixel
    border stays untouched so the Poisson problem has a Dirichlet boundary.
    """
    if h < 16 or w < 16:
        raise ValidationError("blend masks need h, w >= 16")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    total = h * w
    for _ in range(1000):
        area = rng.uniform(0.06, 0.58) * total
        aspect = rng.uniform(0.7, 1.3)
        angle = rng.uniform(0, np.pi)
        harmonics = [(k, rng.uniform(0, 0.12), rng.uniform(0, 2 * np.pi)) for k in (2, 3, 4)]
        cy = rng.uniform(h / 6, 5 * h / 6)
        cx = rng.uniform(w / 6, 5 * w / 6)

        theta = np.arctan2(yy - cy, xx - cx)
        rad = np.hypot(yy - cy, xx - cx)
        t = theta - angle
        ellipse_r = 1.0 / np.sqrt((np.cos(t) / aspect) ** 2 + (np.sin(t) * aspect) ** 2)
        wobble = 1.0 + sum(a * np.cos(k * theta + ph) for k, a, ph in harmonics)
        shape_r = ellipse_r * wobble
        # scale so the enclosed area hits the target (area ~ r0^2 * mean(shape_r^2) * pi)
        r0 = np.sqrt(area / (np.pi * np.mean(shape_r**2)))
        mask = rad <= r0 * shape_r

        if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
            continue
        frac = mask.mean()
        if not 0.05 <= frac <= 0.60:
            continue
        _, ncomp = ndimage.label(mask)
        if ncomp != 1:
            continue
        return ManipulationMask(mask.astype(np.float64), binary=True)
    raise RuntimeError("failed to draw a valid blend mask")  # pragma: no cover


# ---------------------------------------------------------------- Poisson blending


@lru_cache(maxsize=64)
def _system(mask_bytes: bytes, h: int, w: int):
    mask = np.frombuffer(mask_bytes, dtype=bool).reshape(h, w)
    ys, xs = np.nonzero(mask)
    n = ys.size
    index = -np.ones((h, w), dtype=np.int64)
    index[ys, xs] = np.arange(n)
    rows, cols = [np.arange(n)], [np.arange(n)]
    vals = [np.full(n, 4.0)]
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = index[ys + dy, xs + dx]
        inside = nb >= 0
        rows.append(np.arange(n)[inside])
        cols.append(nb[inside])
        vals.append(-np.ones(inside.sum()))
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    solver = spla.splu(A.tocsc()) if n <= DIRECT_SOLVE_LIMIT else None
    return ys, xs, A, solver


def _check_mask(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask) > 0.5
    if not m.any():
        raise EmptyMask("blend mask has no interior pixels")
    if m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any():
        raise MaskTouchesBorder("blend mask touches the image border")
    return m


def solve_poisson_channel(src: np.ndarray, dst: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Seamless cloning of one channel; returns the unclamped solution.

    Interior unknowns satisfy ``4 f_p - sum_{q in N(p), q interior} f_q =
    sum_q (src_p - src_q) + sum_{q in N(p), q boundary} dst_q``.
    """
    m = _check_mask(mask)
    h, w = m.shape
    if src.shape != (h, w) or dst.shape != (h, w):
        raise ShapeMismatch("src, dst and mask must share spatial size")
    ys, xs, A, solver = _system(m.tobytes(), h, w)
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    b = 4.0 * src[ys, xs]
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        qy, qx = ys + dy, xs + dx
        b -= src[qy, qx]
        outside = ~m[qy, qx]
        b[outside] += dst[qy[outside], qx[outside]]
    if solver is not None:
        x = solver.solve(b)
    else:
        diag = A.diagonal()
        precond = spla.LinearOperator(A.shape, matvec=lambda v: v / diag)
        x0 = dst[ys, xs]
        x, _ = spla.cg(A, b, x0=x0, rtol=1e-10, atol=0.0, maxiter=5000, M=precond)
    resid = np.abs(A @ x - b).max()
    if resid > SOLVER_TOL:
        raise SolverNotConverged(f"Poisson residual {resid:.3g} exceeds {SOLVER_TOL}")
    out = dst.copy()
    out[ys, xs] = x
    return out


def poisson_blend_array(src: np.ndarray, dst: np.ndarray, mask: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Channel-wise blend of ``H x W x C`` arrays; pixels outside the mask are copied from ``dst``."""
    m = _check_mask(mask)
    out = np.array(dst, dtype=np.float64, copy=True)
    for c in range(src.shape[2]):
        solved = solve_poisson_channel(src[..., c], dst[..., c], m)
        out[..., c][m] = solved[m]
    if clamp:
        inside = out[m]
        out[m] = np.clip(inside, 0.0, 1.0)
    return out


def poisson_blend(src: Image, dst: Image, mask: ManipulationMask) -> Image:
    if src.shape != dst.shape or mask.shape != src.shape[:2]:
        raise ShapeMismatch("src, dst and mask must share spatial size")
    return Image(poisson_blend_array(src.pixels, dst.pixels, mask.values))


# ---------------------------------------------------------------- degradations

_LUMA_Q = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
_CHROMA_Q = np.full((8, 8), 99.0)
_CHROMA_Q[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


def quant_tables(quality: float) -> tuple[np.ndarray, np.ndarray]:
    """IJG quality scaling of the standard luminance/chrominance tables."""
    q = float(np.clip(quality, 1, 100))
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    luma = np.clip(np.floor((_LUMA_Q * scale + 50) / 100), 1, 255)
    chroma = np.clip(np.floor((_CHROMA_Q * scale + 50) / 100), 1, 255)
    return luma, chroma


def _dct_matrix() -> torch.Tensor:
    k = np.arange(8)
    d = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / 16) * np.sqrt(2 / 8)
    d[0] /= np.sqrt(2)
    return torch.from_numpy(d)


_DCT = _dct_matrix()
_RGB2YCC = torch.tensor(
    [[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]], dtype=torch.float64
)
_YCC2RGB = torch.linalg.inv(_RGB2YCC)


def round_ste(x: torch.Tensor) -> torch.Tensor:
    return x + (torch.round(x) - x).detach()


def jpeg_approx(x: torch.Tensor, quality) -> torch.Tensor:
    """Block-DCT JPEG surrogate on ``(B, 3, H, W)`` in [0, 1]; ``quality`` scalar or per-sample.

    Rounds quantized coefficients with a straight-through gradient; no chroma
    subsampling and no entropy coding.
    """
    B, C, H, W = x.shape
    if H % 8 or W % 8:
        raise ShapeMismatch("JPEG surrogate needs H, W divisible by 8")
    dtype = x.dtype
    qs = np.broadcast_to(np.asarray(quality, dtype=np.float64), (B,))
    tables = np.stack([np.stack([quant_tables(q)[0], *[quant_tables(q)[1]] * 2]) for q in qs])
    qt = torch.from_numpy(tables).to(dtype)[:, :, None, None]  # B,3,1,1,8,8

    d = _DCT.to(dtype)
    ycc = torch.einsum("ij,bjhw->bihw", _RGB2YCC.to(dtype), x * 255.0)
    ycc = ycc + torch.tensor([-128.0, 0.0, 0.0], dtype=dtype)[None, :, None, None]
    blocks = ycc.reshape(B, C, H // 8, 8, W // 8, 8).permute(0, 1, 2, 4, 3, 5)
    coef = d @ blocks @ d.T
    coef = round_ste(coef / qt) * qt
    blocks = d.T @ coef @ d
    ycc = blocks.permute(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
    ycc = ycc + torch.tensor([128.0, 0.0, 0.0], dtype=dtype)[None, :, None, None]
    rgb = torch.einsum("ij,bjhw->bihw", _YCC2RGB.to(dtype), ycc) / 255.0
    return rgb


def color_jitter(x: torch.Tensor, brightness, contrast) -> torch.Tensor:
    b = torch.as_tensor(brightness, dtype=x.dtype).reshape(-1, 1, 1, 1)
    c = torch.as_tensor(contrast, dtype=x.dtype).reshape(-1, 1, 1, 1)
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    return ((x - mean) * c + mean) * b


@dataclass
class DegradationDraw:
    """Concrete per-sample parameters; ``None`` means the stage did not fire."""

    quality: float | None = None
    sigma: float | None = None
    brightness: float | None = None
    contrast: float | None = None

    def tags(self) -> list[str]:
        out = []
        if self.quality is not None:
            out.append(f"jpeg(q={self.quality:.0f})")
        if self.sigma is not None:
            out.append(f"noise(sigma={self.sigma:.3f})")
        if self.brightness is not None:
            out.append(f"jitter(b={self.brightness:.2f},c={self.contrast:.2f})")
        return out


def draw_degradation(spec: DegradationSpec, rng: np.random.Generator) -> DegradationDraw:
    draw = DegradationDraw()
    fires = rng.random(3) < spec.prob
    if spec.jpeg and fires[0]:
        draw.quality = float(np.round(rng.uniform(*spec.jpeg_quality)))
    if spec.noise and fires[1]:
        draw.sigma = float(rng.uniform(*spec.noise_sigma))
    if spec.jitter and fires[2]:
        draw.brightness = float(rng.uniform(*spec.brightness))
        draw.contrast = float(rng.uniform(*spec.contrast))
    return draw


def apply_degradation(x: torch.Tensor, draw: DegradationDraw, rng: np.random.Generator) -> torch.Tensor:
    """Apply one draw to a ``(1, 3, H, W)`` tensor: jitter, then noise, then JPEG; clamp."""
    if draw.brightness is not None:
        x = color_jitter(x, draw.brightness, draw.contrast)
    if draw.sigma is not None and draw.sigma > 0:
        noise = torch.from_numpy(rng.normal(0.0, draw.sigma, size=tuple(x.shape))).to(x.dtype)
        x = x + noise
    if draw.quality is not None:
        x = jpeg_approx(x.clamp(0, 1), draw.quality)
    return x.clamp(0, 1)


def degrade(img: Image, spec: DegradationSpec, rng: np.random.Generator) -> Image:
    draw = draw_degradation(spec, rng)
    x = torch.from_numpy(np.array(img.pixels.transpose(2, 0, 1)))[None]
    out = apply_degradation(x, draw, rng)[0].numpy().transpose(1, 2, 0)
    return Image(np.ascontiguousarray(out))


def degrade_with(img: Image, draw: DegradationDraw, rng: np.random.Generator) -> Image:
    x = torch.from_numpy(np.array(img.pixels.transpose(2, 0, 1)))[None]
    out = apply_degradation(x, draw, rng)[0].numpy().transpose(1, 2, 0)
    return Image(np.ascontiguousarray(out))


# ---------------------------------------------------------------- full pipeline


def simulate_attack(protected: Image, source: Image, cfg: AttackConfig, face_codec, rng: np.random.Generator) -> AttackOutcome:
    """Single-image simulator: optional mixing, optional blending, then degradations.

    Ground truth is the blend mask when blending fired, all-ones when only
    latent mixing fired (every pixel regenerated), otherwise all-zeros.
    """
    if protected.shape != source.shape:
        raise ShapeMismatch("protected and source images must share shape")
    h, w = protected.height, protected.width
    tags: list[str] = []
    base = protected
    mixed = False
    if cfg.enable_latent_mixing and rng.random() < cfg.mixing_prob:
        if face_codec is None:
            raise ValidationError("latent mixing requires a face codec")
        z_pro = face_codec.encode(protected)
        z_src = face_codec.encode(source)
        m = sample_channel_mask(z_pro.shape[0], cfg.channel_density, rng)
        base = face_codec.decode(mix_latents(z_pro, z_src, m))
        tags.append("latent_mixing(" + "".join(map(str, m.values)) + ")")
        mixed = True
    blended = None
    if cfg.enable_blending and rng.random() < cfg.blend_prob:
        blended = generate_blend_mask(h, w, rng)
        base = poisson_blend(source, base, blended)
        tags.append("poisson_blend")
    draw = draw_degradation(cfg.degradations, rng)
    edited = degrade_with(base, draw, rng)
    tags.extend(draw.tags())
    if blended is not None:
        truth = blended
    elif mixed:
        truth = ManipulationMask.ones(h, w)
    else:
        truth = ManipulationMask.zeros(h, w)
    return AttackOutcome(validate_image(edited.pixels), truth, tags)


def poisson_blend_batch(src: torch.Tensor, dst: torch.Tensor, masks: np.ndarray, active) -> torch.Tensor:
    """Blend ``src`` into ``dst`` where ``active[i]``; straight-through (identity) gradient w.r.t. ``dst``."""
    with torch.no_grad():
        out = dst.detach().clone()
        for i in range(dst.shape[0]):
            if not active[i]:
                continue
            s = src[i].detach().permute(1, 2, 0).double().numpy()
            d = dst[i].detach().permute(1, 2, 0).double().numpy()
            out[i] = torch.from_numpy(poisson_blend_array(s, d, masks[i]).transpose(2, 0, 1)).to(dst.dtype)
    return dst + (out - dst).detach()


def degrade_batch(x: torch.Tensor, spec: DegradationSpec, rng: np.random.Generator):
    """Per-sample independent degradations; returns the tensor and per-sample draws."""
    if not spec.any_enabled:
        return x, [DegradationDraw() for _ in range(x.shape[0])]
    draws = [draw_degradation(spec, rng) for _ in range(x.shape[0])]
    bright = torch.tensor([d.brightness if d.brightness is not None else 1.0 for d in draws], dtype=x.dtype)
    contr = torch.tensor([d.contrast if d.contrast is not None else 1.0 for d in draws], dtype=x.dtype)
    x = color_jitter(x, bright, contr)
    sig = np.array([d.sigma if d.sigma is not None else 0.0 for d in draws])
    if sig.any():
        noise = rng.normal(size=tuple(x.shape)) * sig[:, None, None, None]
        x = x + torch.from_numpy(noise).to(x.dtype)
    jp = [i for i, d in enumerate(draws) if d.quality is not None]
    if jp:
        idx = torch.tensor(jp)
        q = [draws[i].quality for i in jp]
        compressed = jpeg_approx(x[idx].clamp(0, 1), q)
        x = x.index_copy(0, idx, compressed)
    return x.clamp(0, 1), draws


def simulate_attack_batch(protected: torch.Tensor, source: torch.Tensor, cfg: AttackConfig, face_codec, rng: np.random.Generator):
    """Differentiable batched simulator used in training.

    Returns ``(edited, truth_masks)`` with ``truth_masks`` shaped ``(B, 1, H, W)``.
    Mixing is differentiated through the frozen codec; blending and JPEG
    rounding pass straight-through gradients.
    """
    B, _, H, W = protected.shape
    base = protected
    mixed = np.zeros(B, dtype=bool)
    if cfg.enable_latent_mixing:
        mixed = rng.random(B) < cfg.mixing_prob
        if mixed.any():
            idx = torch.from_numpy(np.nonzero(mixed)[0])
            z_pro = face_codec.encode_tensor(protected[idx])
            with torch.no_grad():
                z_src = face_codec.encode_tensor(source[idx])
            chans = torch.from_numpy((rng.random((len(idx), z_pro.shape[1])) < cfg.channel_density).astype(np.float32))
            gen = face_codec.decode_tensor(mix_latents_batch(z_pro, z_src, chans))
            base = protected.index_copy(0, idx, gen.to(protected.dtype))
    masks = np.zeros((B, H, W))
    blended = np.zeros(B, dtype=bool)
    if cfg.enable_blending:
        blended = rng.random(B) < cfg.blend_prob
        for i in np.nonzero(blended)[0]:
            masks[i] = generate_blend_mask(H, W, rng).values
        if blended.any():
            base = poisson_blend_batch(source, base, masks, blended)
    edited, _ = degrade_batch(base, cfg.degradations, rng)
    truth = masks.copy()
    truth[mixed & ~blended] = 1.0
    return edited, torch.from_numpy(truth[:, None]).to(protected.dtype)
