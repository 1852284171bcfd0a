"""Fidelity, robustness and localization metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .datamodel import (
    DEFAULT_THRESHOLD,
    Image,
    ManipulationMask,
    OwnershipCode,
    ShapeMismatch,
    ValidationError,
    binarize_mask,
)

PSNR_CAP = 100.0


class TooSmall(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class DegenerateTruth(ValidationError):
    pass


def _pixels(x):
    return x.pixels if isinstance(x, Image) else np.asarray(x, dtype=np.float64)


def psnr(a, b) -> float:
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid positions only, channel mean."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < 11:
        raise TooSmall("SSIM needs both spatial dimensions >= 11")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = 0.01**2, 0.03**2
    win = _gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]

        def filt(z):
            return ndimage.correlate(z, win, mode="constant")[5:-5, 5:-5]

        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def bit_accuracy(decoded: OwnershipCode, truth: OwnershipCode) -> float:
    if decoded.n != truth.n:
        raise LengthMismatch(f"code lengths differ: {decoded.n} vs {truth.n}")
    matches = sum(int(x == y) for x, y in zip(decoded.bits, truth.bits))
    return 100.0 * matches / truth.n


def auc_rank(scores: np.ndarray, truth: np.ndarray) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with average ranks (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truth).ravel() > 0.5
    n_pos, n_neg = int(t.sum()), int((~t).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateTruth("AUC is undefined when the truth mask is all-zero or all-one")
    ranks = rankdata(s)
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


@dataclass
class LocalizationScores:
    f1: float
    auc: float | None
    miou: float

    def as_tuple(self):
        return (self.f1, self.auc, self.miou)


def _f1_iou(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    tp = float(np.sum(pred & truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    tn = float(np.sum(~pred & ~truth))
    denom = 2 * tp + fp + fn
    # both masks empty: perfect agreement
    f1 = 2 * tp / denom if denom else 1.0
    iou_t = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    iou_a = tn / (tn + fp + fn) if tn + fp + fn else 1.0
    return f1, (iou_t + iou_a) / 2


def localization_scores(pred: ManipulationMask, truth: ManipulationMask, tau: float = DEFAULT_THRESHOLD) -> LocalizationScores:
    """F1 and two-class mIoU on the thresholded prediction; pixel AUC on soft scores.

    AUC is ``None`` when ``truth`` is all-zero or all-one.
    """
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    t = truth.values > 0.5
    p = binarize_mask(pred, tau).values > 0.5
    f1, miou = _f1_iou(p, t)
    try:
        auc = auc_rank(pred.values, truth.values)
    except DegenerateTruth:
        auc = None
    return LocalizationScores(f1, auc, miou)


def laplacian_variance(img) -> float:
    x = _pixels(img)
    gray = x.mean(axis=2) if x.ndim == 3 else x
    return float(np.var(ndimage.laplace(gray)[1:-1, 1:-1]))


@dataclass
class MetricsReport:
    metrics: dict[str, float | None]
    attack: str = "none"
    dataset: str = ""
    seed: int = 0
    checkpoint: str = ""
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if v is not None and not math.isfinite(v):
                raise ValidationError(f"metric {k} is not finite")

    def to_record(self) -> dict:
        return {
            "attack": self.attack,
            "dataset": self.dataset,
            "seed": self.seed,
            "checkpoint": self.checkpoint,
            "metrics": self.metrics,
            **({"notes": self.notes} if self.notes else {}),
        }


def format_table(reports: list[MetricsReport], columns: list[str] | None = None) -> str:
    """Aligned-column text table, one row per report."""
    if not reports:
        return ""
    if columns is None:
        columns = []
        for r in reports:
            for k in r.metrics:
                if k not in columns:
                    columns.append(k)
    header = ["attack", *columns]
    rows = [header]
    for r in reports:
        row = [r.attack]
        for c in columns:
            v = r.metrics.get(c)
            row.append("n/a" if v is None else f"{v:.4f}" if abs(v) < 10 else f"{v:.2f}")
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
