"""Desk corpus: procedural face generator and image-directory ingestion."""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .datamodel import Image, validate_image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v


def _soft(dist, edge):
    # dist is the squared normalized radius; edge controls anti-aliasing width
    return np.clip((1.0 - dist) / edge, 0.0, 1.0)


def _smooth_noise(rng, size, cells):
    coarse = rng.normal(size=(cells, cells)).astype(np.float32)
    im = PILImage.fromarray(coarse, mode="F").resize((size, size), PILImage.BICUBIC)
    return np.asarray(im, dtype=np.float64)


def synthetic_face(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Draw one cartoon face (head, hair, eyes, brows, nose, mouth) on a textured background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    s = size / 64.0

    bg_a, bg_b = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
    t = np.clip((yy * rng.uniform(0.3, 1.0) + xx * rng.uniform(-0.5, 0.5)) / size, 0, 1)[..., None]
    img = bg_a * (1 - t) + bg_b * t
    img += 0.05 * _smooth_noise(rng, size, 6)[..., None] * rng.uniform(0.5, 1.5, 3)

    cy = size * rng.uniform(0.45, 0.58)
    cx = size * rng.uniform(0.4, 0.6)
    ry = size * rng.uniform(0.28, 0.38)
    rx = ry * rng.uniform(0.7, 0.9)
    tilt = rng.uniform(-0.25, 0.25)

    skin = rng.uniform([0.45, 0.3, 0.2], [0.98, 0.85, 0.75])
    hair = rng.uniform(0.0, 0.6, 3) * rng.uniform(0.2, 1.0)

    hair_mask = _soft(_ellipse(yy, xx, cy - ry * 0.25, cx, ry * 1.05, rx * 1.15, tilt), 0.08 / s)
    hair_mask *= (yy < cy + ry * rng.uniform(-0.1, 0.5)).astype(np.float64)
    img = img * (1 - hair_mask[..., None]) + hair * hair_mask[..., None]

    head = _soft(_ellipse(yy, xx, cy, cx, ry, rx, tilt), 0.08 / s)
    shade = 1.0 - 0.25 * np.clip((xx - cx) / rx, -1, 1) * rng.uniform(-1, 1)
    skin_tex = skin * shade[..., None] + 0.03 * _smooth_noise(rng, size, 12)[..., None]
    img = img * (1 - head[..., None]) + skin_tex * head[..., None]

    c, si = np.cos(tilt), np.sin(tilt)

    def rot(dy, dx):
        return cy + dy * c + dx * si, cx - dy * si + dx * c

    eye_dy = -ry * rng.uniform(0.15, 0.3)
    eye_dx = rx * rng.uniform(0.3, 0.45)
    eye_r = ry * rng.uniform(0.07, 0.12)
    iris = rng.uniform(0.0, 0.5, 3)
    for side in (-1, 1):
        ey, ex = rot(eye_dy, side * eye_dx)
        white = _soft(_ellipse(yy, xx, ey, ex, eye_r * 0.7, eye_r * 1.4, tilt), 0.3)
        img = img * (1 - white[..., None]) + 0.95 * white[..., None]
        pupil = _soft(_ellipse(yy, xx, ey, ex + rng.uniform(-0.3, 0.3) * eye_r, eye_r * 0.6, eye_r * 0.6), 0.3)
        img = img * (1 - pupil[..., None]) + iris * pupil[..., None]
        by, bx = rot(eye_dy - eye_r * rng.uniform(1.6, 2.4), side * eye_dx)
        brow = _soft(_ellipse(yy, xx, by, bx, eye_r * 0.3, eye_r * 1.6, tilt + side * rng.uniform(-0.3, 0.3)), 0.4)
        img = img * (1 - brow[..., None]) + hair * brow[..., None]

    ny, nx = rot(ry * rng.uniform(0.05, 0.15), 0.0)
    nose = _soft(_ellipse(yy, xx, ny, nx, ry * 0.12, rx * 0.07, tilt), 0.4)
    img = img * (1 - 0.3 * nose[..., None]) + 0.3 * nose[..., None] * skin * 0.7

    my, mx = rot(ry * rng.uniform(0.4, 0.55), rx * rng.uniform(-0.08, 0.08))
    lips = rng.uniform([0.4, 0.05, 0.05], [0.9, 0.4, 0.4])
    mouth = _soft(_ellipse(yy, xx, my, mx, ry * rng.uniform(0.04, 0.12), rx * rng.uniform(0.25, 0.45), tilt), 0.3)
    img = img * (1 - mouth[..., None]) + lips * mouth[..., None]

    img += rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_corpus(n: int, size: int = 64, seed: int = 0) -> list[Image]:
    """``n`` procedural faces; face ``i`` depends only on ``(seed, i)``."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        out.append(validate_image(synthetic_face(rng, size)))
    return out


def _center_square(im: PILImage.Image, size: int) -> PILImage.Image:
    w, h = im.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    return im.crop((left, top, left + side, top + side)).resize((size, size), PILImage.BICUBIC)


def list_image_files(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image(path, size: int = 64) -> Image:
    """Read one image file, center-cropped to a square and resized to ``size``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with PILImage.open(path) as im:
        sq = _center_square(im.convert("RGB"), size)
        return validate_image(np.asarray(sq, dtype=np.float64) / 255.0)


def load_corpus(root, size: int = 64) -> list[Image]:
    """Recursive PNG/JPEG scan in sorted path order, center-cropped and resized to ``size``."""
    return [load_image(path, size) for path in list_image_files(root)]


def corpus_hash(images: list[Image]) -> str:
    h = hashlib.sha256()
    for im in images:
        h.update(np.round(im.pixels * 255).astype(np.uint8).tobytes())
    return h.hexdigest()[:16]


def write_corpus(images: list[Image], root) -> None:
    from .datamodel import save_image_png

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(images):
        save_image_png(im, root / f"face_{i:05d}.png")
