"""End-to-end evaluation of a trained bundle over a held-out attack suite."""
from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np
import torch

from .attacks import NO_DEGRADATION, AttackConfig, DegradationSpec, simulate_attack_batch
from .checkpoint import Bundle
from .datamodel import ManipulationMask, ValidationError
from .metrics import MetricsReport, format_table, localization_scores, psnr, ssim
from .rng import substream

# Held-out attacks use parameter ranges and firing rules that differ from the
# training simulator (every listed stage always fires).
_JPEG_ONLY = DegradationSpec(noise=False, jitter=False, jpeg_quality=(50.0, 90.0), prob=1.0)
_NOISE_ONLY = DegradationSpec(jpeg=False, jitter=False, noise_sigma=(0.01, 0.04), prob=1.0)
_MILD = DegradationSpec(jpeg_quality=(60.0, 95.0), noise_sigma=(0.0, 0.02), brightness=(0.9, 1.1), contrast=(0.9, 1.1), prob=0.5)

HELD_OUT_SUITE: dict[str, AttackConfig] = {
    "jpeg": AttackConfig(enable_latent_mixing=False, enable_blending=False, degradations=_JPEG_ONLY),
    "noise": AttackConfig(enable_latent_mixing=False, enable_blending=False, degradations=_NOISE_ONLY),
    "blend": AttackConfig(enable_latent_mixing=False, enable_blending=True, degradations=_MILD),
    "mix": AttackConfig(enable_latent_mixing=True, enable_blending=False, degradations=_MILD),
    "blend+mix": AttackConfig(enable_latent_mixing=True, enable_blending=True, degradations=_MILD),
}

# splice-only attack used for the recovery acceptance figure
SPLICE = AttackConfig(enable_latent_mixing=False, enable_blending=True, degradations=NO_DEGRADATION)

ROBUSTNESS_ATTACKS = ("jpeg", "noise", "blend", "mix", "blend+mix")


def resolve_suite(names) -> dict[str, AttackConfig]:
    """Map attack names to configs; ``"splice"`` is accepted in addition to the held-out suite."""
    table = {**HELD_OUT_SUITE, "splice": SPLICE}
    out = {}
    for n in names:
        if n not in table:
            raise ValidationError(f"unknown attack {n!r}; expected one of {sorted(table)}")
        out[n] = table[n]
    return out


def _to_tensor(images) -> torch.Tensor:
    return torch.from_numpy(np.stack([im.pixels.transpose(2, 0, 1) for im in images])).float()


def _np_img(t: torch.Tensor) -> np.ndarray:
    return t.detach().double().clamp(0, 1).numpy().transpose(1, 2, 0)


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


class _Protected:
    """Protected images, payloads and face latents for a corpus, computed once."""

    def __init__(self, bundle: Bundle, x: torch.Tensor, seed: int, batch: int):
        urw, codec = bundle.urw, bundle.face_codec
        n = x.shape[0]
        rng = substream(seed, 100)
        self.bits = torch.from_numpy(rng.integers(0, 2, size=(n, urw.cfg.n_bits)).astype(np.float32))
        self.sources = torch.from_numpy((np.arange(n) + 1 + rng.integers(0, max(n - 1, 1), size=n)) % n)
        z, wm = [], []
        with torch.no_grad():
            for i in range(0, n, batch):
                zb = codec.encode_tensor(x[i : i + batch])
                out, _ = urw.embed_tensor(x[i : i + batch], self.bits[i : i + batch], zb)
                z.append(zb)
                wm.append(out)
        self.z = torch.cat(z)
        self.wm = torch.cat(wm)


def _fidelity(x, prot: _Protected) -> dict:
    ps = [psnr(_np_img(a), _np_img(b)) for a, b in zip(prot.wm, x)]
    ss = [ssim(_np_img(a), _np_img(b)) for a, b in zip(prot.wm, x)]
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "fid": None}


def _run_attack(bundle: Bundle, x, prot: _Protected, cfg: AttackConfig, seed: int, name: str, batch: int, mask_source: str, tau: float) -> dict:
    urw, loc, rec, codec = bundle.urw, bundle.localizer, bundle.recovery, bundle.face_codec
    bit_acc, latent_mse = [], []
    f1s, aucs, mious, mean_mask = [], [], [], []
    rec_psnr, rec_ssim = [], []
    n = x.shape[0]
    with torch.no_grad():
        for b, i in enumerate(range(0, n, batch)):
            # keyed by attack name so a row does not depend on which other attacks run
            rng = substream(seed, 200, zlib.crc32(name.encode()), b)
            sl = slice(i, i + batch)
            edited, truth = simulate_attack_batch(prot.wm[sl], x[prot.sources[sl]], cfg, codec, rng)
            logits, z_hat, feats = urw.extract_tensor(edited)
            bit_acc.extend(((logits > 0).float() == prot.bits[sl]).float().mean(dim=1).mul(100).tolist())
            latent_mse.extend(((z_hat - prot.z[sl]) ** 2).flatten(1).mean(dim=1).tolist())
            prob = None
            if loc is not None:
                prob, _ = loc(edited, feats if loc.cfg.use_similarity else None)
                for p, t in zip(prob, truth):
                    s = localization_scores(ManipulationMask(p[0].double().numpy()), ManipulationMask(t[0].double().numpy(), binary=True), tau)
                    f1s.append(s.f1)
                    aucs.append(s.auc)
                    mious.append(s.miou)
                    mean_mask.append(float(p.mean()))
            if rec is not None:
                use_truth = mask_source == "truth" or prob is None
                mask = truth if use_truth else prob
                proxy = codec.decode_tensor(z_hat)
                out = rec.recover(edited, proxy, z_hat, mask, binarize=True)
                for o, orig in zip(out, x[sl]):
                    rec_psnr.append(psnr(_np_img(o), _np_img(orig)))
                    rec_ssim.append(ssim(_np_img(o), _np_img(orig)))
    metrics = {"bit_acc": float(np.mean(bit_acc)), "latent_mse": float(np.mean(latent_mse))}
    if loc is not None:
        metrics.update(f1=float(np.mean(f1s)), auc=_mean(aucs), miou=float(np.mean(mious)), mask_mean=float(np.mean(mean_mask)))
    if rec is not None:
        metrics.update(rec_psnr=float(np.mean(rec_psnr)), rec_ssim=float(np.mean(rec_ssim)))
    return metrics


def evaluate(
    bundle: Bundle,
    corpus,
    suite: dict[str, AttackConfig] | None = None,
    seed: int = 0,
    batch: int = 16,
    mask_source: str = "predicted",
    tau: float = 0.5,
    dataset: str = "",
) -> list[MetricsReport]:
    """Fidelity row plus one robustness/localization/recovery row per attack.

    Payloads, source pairings and attack draws all come from substreams of
    ``seed``, so repeated calls return identical reports. Pixel AUC is
    computed per image and averaged over images where it is defined.
    """
    if len(corpus) == 0:
        raise ValidationError("evaluation corpus is empty")
    if bundle.urw is None:
        raise ValidationError("bundle has no watermark codec")
    if mask_source not in ("predicted", "truth"):
        raise ValidationError("mask_source must be 'predicted' or 'truth'")
    bundle.eval()
    suite = {} if suite is None else suite
    x = _to_tensor(corpus)
    prot = _Protected(bundle, x, seed, batch)
    ckpt = bundle.manifest.get("checkpoint_hash", "")
    notes = {"auc_pooling": "per-image mean", "fid": "unavailable", "images": int(x.shape[0])}
    fid = _fidelity(x, prot)
    reports = []
    if not suite:
        return [MetricsReport(fid, attack="none", dataset=dataset, seed=seed, checkpoint=ckpt, notes=notes)]
    clean = _run_attack(bundle, x, prot, AttackConfig(enable_latent_mixing=False, enable_blending=False, degradations=NO_DEGRADATION), seed, "none", batch, mask_source, tau)
    reports.append(MetricsReport({**fid, **clean}, attack="none", dataset=dataset, seed=seed, checkpoint=ckpt, notes=notes))
    for name, cfg in suite.items():
        m = _run_attack(bundle, x, prot, cfg, seed, name, batch, mask_source, tau)
        reports.append(MetricsReport(m, attack=name, dataset=dataset, seed=seed, checkpoint=ckpt, notes=notes))
    return reports


def average_bit_accuracy(reports: list[MetricsReport], attacks=ROBUSTNESS_ATTACKS) -> float:
    vals = [r.metrics["bit_acc"] for r in reports if r.attack in attacks]
    if not vals:
        raise ValidationError("no robustness rows in the report set")
    return float(np.mean(vals))


def write_reports(reports: list[MetricsReport], out_dir, stem: str = "report") -> tuple[Path, Path]:
    """Write ``<stem>.jsonl`` and ``<stem>.txt`` (aligned table) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jl = out / f"{stem}.jsonl"
    txt = out / f"{stem}.txt"
    jl.write_text("".join(json.dumps(r.to_record(), sort_keys=True) + "\n" for r in reports))
    head = reports[0] if reports else None
    lines = [] if head is None else [f"checkpoint {head.checkpoint or '-'}  seed {head.seed}  dataset {head.dataset or '-'}", ""]
    txt.write_text("\n".join(lines) + format_table(reports) + "\n")
    return jl, txt
