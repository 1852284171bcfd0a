"""Value types shared across the pipeline.

Images are ``H x W x 3`` float arrays in ``[0, 1]``; masks are ``H x W``.
Everything here is immutable: constructors copy and freeze their arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

DEFAULT_PATCH = 8
DEFAULT_CODE_BITS = 64
DEFAULT_THRESHOLD = 0.5
ALLOWED_LATENT_DIMS = (256, 576, 1024)


class WatermarkError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(WatermarkError, ValueError):
    pass


class NonFinite(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class BadShape(ValidationError):
    pass


class ShapeMismatch(WatermarkError, ValueError):
    pass


class BadThreshold(ValidationError):
    pass


class BadPayload(ValidationError):
    pass


def _frozen(arr: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape)

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class OwnershipCode:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if len(bits) == 0:
            raise BadPayload("ownership code must have at least one bit")
        if any(b not in (0, 1) for b in bits):
            raise BadPayload("ownership code bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @property
    def n(self) -> int:
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float32)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "OwnershipCode":
        return cls(tuple(rng.integers(0, 2, size=n).tolist()))

    def complement(self) -> "OwnershipCode":
        return OwnershipCode(tuple(1 - b for b in self.bits))


@dataclass(frozen=True, eq=False)
class LatentCode:
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values, np.float32)
        if vals.ndim != 3:
            raise BadShape(f"latent must be C x h x w, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise NonFinite("latent contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        return isinstance(other, LatentCode) and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class WatermarkPayload:
    code: OwnershipCode
    face_latent: LatentCode

    def __post_init__(self):
        if self.face_latent.size not in ALLOWED_LATENT_DIMS:
            raise BadPayload(
                f"face latent has {self.face_latent.size} elements, expected one of {ALLOWED_LATENT_DIMS}"
            )


@dataclass(frozen=True, eq=False)
class ManipulationMask:
    values: np.ndarray
    binary: bool = False

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.ndim != 2:
            raise BadShape(f"mask must be H x W, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise NonFinite("mask contains non-finite values")
        if vals.min(initial=0.0) < 0 or vals.max(initial=0.0) > 1:
            raise OutOfRange("mask values must lie in [0, 1]")
        if self.binary and not np.all((vals == 0) | (vals == 1)):
            raise OutOfRange("binary mask must contain only 0 and 1")
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape)

    @classmethod
    def zeros(cls, h: int, w: int) -> "ManipulationMask":
        return cls(np.zeros((h, w)), binary=True)

    @classmethod
    def ones(cls, h: int, w: int) -> "ManipulationMask":
        return cls(np.ones((h, w)), binary=True)

    def __eq__(self, other):
        return (
            isinstance(other, ManipulationMask)
            and self.binary == other.binary
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class ChannelMask:
    values: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if any(v not in (0, 1) for v in vals):
            raise ValidationError("channel mask entries must be 0 or 1")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float32)


# ---------------------------------------------------------------- operations


def code_to_hex(code: OwnershipCode) -> str:
    """Most-significant bit first, zero-padded to ceil(n/4) lowercase digits."""
    n = code.n
    value = 0
    for b in code.bits:
        value = (value << 1) | b
    width = -(-n // 4)
    return format(value, f"0{width}x")


def hex_to_code(text: str, n: int) -> OwnershipCode:
    text = text.strip().lower()
    if text.startswith("0x"):
        text = text[2:]
    width = -(-n // 4)
    if len(text) != width:
        raise BadPayload(f"expected {width} hex digits for a {n}-bit code, got {len(text)}")
    try:
        value = int(text, 16)
    except ValueError as exc:
        raise BadPayload(f"not a hex string: {text!r}") from exc
    if value >> n:
        raise BadPayload(f"hex value does not fit in {n} bits")
    return OwnershipCode(tuple((value >> (n - 1 - i)) & 1 for i in range(n)))


def validate_image(raw, patch: int = DEFAULT_PATCH) -> Image:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise BadShape(f"image must be H x W x 3, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if h == 0 or w == 0:
        raise BadShape("image must have positive height and width")
    if h % patch or w % patch:
        raise BadShape(f"image size {h}x{w} not divisible by patch size {patch}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("image contains NaN or infinite values")
    if arr.min() < 0 or arr.max() > 1:
        raise OutOfRange(f"pixel values must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]")
    return Image(_frozen(arr))


def binarize_mask(m: ManipulationMask, tau: float = DEFAULT_THRESHOLD) -> ManipulationMask:
    if not 0 < tau < 1:
        raise BadThreshold(f"threshold must lie in (0, 1), got {tau}")
    return ManipulationMask((m.values >= tau).astype(np.float64), binary=True)


def downsample_mask(m: ManipulationMask, factor: int, tau: float | None = DEFAULT_THRESHOLD) -> ManipulationMask:
    """Area-average over ``factor x factor`` blocks; re-threshold unless ``tau`` is None."""
    h, w = m.shape
    if h % factor or w % factor:
        raise BadShape(f"mask {h}x{w} not divisible by {factor}")
    pooled = m.values.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    if tau is None:
        return ManipulationMask(pooled)
    return binarize_mask(ManipulationMask(pooled), tau)


# ---------------------------------------------------------------- file I/O


def save_image_png(img: Image, path) -> None:
    data = np.round(np.clip(img.pixels, 0, 1) * 255).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path)


def load_image_png(path, patch: int = DEFAULT_PATCH) -> Image:
    with PILImage.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return validate_image(data, patch)


def save_mask_png(mask: ManipulationMask, path) -> None:
    data = np.round(np.clip(mask.values, 0, 1) * 255).astype(np.uint8)
    PILImage.fromarray(data, mode="L").save(path)


def load_mask_png(path, binary: bool = False) -> ManipulationMask:
    with PILImage.open(path) as im:
        data = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if binary:
        data = (data >= 0.5).astype(np.float64)
    return ManipulationMask(data, binary=binary)


def write_payload_sidecar(path, payload: WatermarkPayload, extra: dict | None = None) -> None:
    record = {
        "n": payload.code.n,
        "code_hex": code_to_hex(payload.code),
        "latent_shape": list(payload.face_latent.shape),
        "face_latent": payload.face_latent.values.ravel().tolist(),
    }
    if extra:
        record.update(extra)
    Path(path).write_text(json.dumps(record, indent=2))


def read_payload_sidecar(path) -> WatermarkPayload:
    record = json.loads(Path(path).read_text())
    code = hex_to_code(record["code_hex"], int(record["n"]))
    shape = tuple(record["latent_shape"])
    latent = LatentCode(np.asarray(record["face_latent"], dtype=np.float32).reshape(shape))
    return WatermarkPayload(code, latent)


def stack_images(images: Sequence[Image]) -> np.ndarray:
    return np.stack([im.pixels for im in images])
