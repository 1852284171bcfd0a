"""Joint optimization of embedder, extractor, localizer and recovery network."""
from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackConfig, arm_config, generate_blend_mask, simulate_attack_batch
from .checkpoint import Bundle, save_bundle
from .datamodel import WatermarkError
from .face_codec import Diverged, FaceCodec
from .localizer import Localizer, LocalizerConfig
from .losses import (
    LossWeights,
    PerceptualExtractor,
    decode_loss,
    dice_loss,
    embed_loss,
    rec_loss,
    total_loss,
)
from .recovery import RecoveryConfig, RecoveryNet
from .rng import seed_torch, substream
from .urw import URWCodec, URWConfig

log = logging.getLogger(__name__)

MIN_CORPUS = 100
CLEAN = arm_config("none")


class CorpusTooSmall(WatermarkError, ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    attack: AttackConfig = field(default_factory=lambda: arm_config("full", blend_prob=0.75, mixing_prob=0.3))
    arm: str = "full"
    weights: LossWeights = field(default_factory=LossWeights)
    train_urw: bool = True
    train_localizer: bool = True
    train_recovery: bool = True
    # "predicted" gates recovery with the localizer output after the warm-up; "truth" always uses M*
    recovery_mask: str = "predicted"
    warmup_epochs: int = 1
    # share of each batch replaced by hard-pasted composites of unrelated content
    composite_fraction: float = 0.5
    max_steps: int | None = None
    log_every: int = 1
    checkpoint_every: int = 1
    # tag written into every log record and mixed into the random streams,
    # so consecutive stages of one run draw different batches
    stage: str = ""
    # residual RMS is held at rms_start times the codec target for
    # rms_hold_steps, then decays geometrically to the target over
    # rms_anneal_steps (a small residual is not learnable from scratch)
    rms_start: float = 1.0
    # attacks stay off for the first clean_steps steps
    clean_steps: int = 0
    rms_hold_steps: int = 0
    rms_anneal_steps: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.recovery_mask not in ("predicted", "truth"):
            raise ValueError("recovery_mask must be 'predicted' or 'truth'")
        if self.rms_start < 1 or self.rms_anneal_steps < 0 or self.rms_hold_steps < 0:
            raise ValueError("rms_start must be >= 1 and the schedule lengths >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.clean_steps < 0:
            raise ValueError("clean_steps must be >= 0")
        if isinstance(self.attack, dict):
            self.attack = AttackConfig.from_dict(self.attack)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def images_to_tensor(images) -> torch.Tensor:
    return torch.from_numpy(np.stack([im.pixels.transpose(2, 0, 1) for im in images])).float()


def build_models(face_codec: FaceCodec, n_bits: int = 64, urw_cfg: URWConfig | None = None,
                 loc_cfg: LocalizerConfig | None = None, rec_cfg: RecoveryConfig | None = None, seed: int = 0) -> Bundle:
    size = face_codec.cfg.image_size
    latent_shape = face_codec.cfg.latent_shape
    seed_torch(seed)
    urw = URWCodec(urw_cfg or URWConfig(n_bits=n_bits, latent_shape=latent_shape, image_size=size))
    loc = Localizer(loc_cfg or LocalizerConfig(image_size=size))
    rec = RecoveryNet(rec_cfg or RecoveryConfig(image_size=size, latent_shape=latent_shape))
    if urw.cfg.latent_shape != latent_shape or rec.cfg.latent_shape != latent_shape:
        raise ValueError("network latent shapes must match the face codec")
    return Bundle(face_codec, urw, loc, rec)


def paste_composites(edited, truth, pool, rows, rng):
    """Hard-paste unrelated content under a random blob mask into the selected rows."""
    B, _, H, W = edited.shape
    edited = edited.clone()
    truth = truth.clone()
    for i in rows:
        m = torch.from_numpy(np.array(generate_blend_mask(H, W, rng).values)).float()[None]
        other = pool[int(rng.integers(len(pool)))]
        edited[i] = edited[i] * (1 - m) + other * m
        truth[i] = m
    return edited, truth


@dataclass
class TrainResult:
    bundle: Bundle
    log: list[dict]


def rms_multiplier(cfg: TrainConfig, step: int) -> float:
    if step < cfg.rms_hold_steps:
        return float(cfg.rms_start)
    if cfg.rms_anneal_steps == 0:
        return 1.0
    t = min((step - cfg.rms_hold_steps) / cfg.rms_anneal_steps, 1.0)
    return float(cfg.rms_start ** (1 - t))


def _trainable(bundle: Bundle, cfg: TrainConfig):
    params = []
    if cfg.train_urw:
        params += list(bundle.urw.parameters())
    if cfg.train_localizer:
        params += list(bundle.localizer.parameters())
    if cfg.train_recovery:
        params += list(bundle.recovery.parameters())
    return params


def train(bundle: Bundle, corpus, cfg: TrainConfig, log_path=None, checkpoint_dir=None,
          phi=None, manifest_extra: dict | None = None, progress=None, append_log: bool = False) -> TrainResult:
    """Run joint training in place on ``bundle``; the face codec stays frozen.

    Each step: sample payloads, embed, attack, extract, localize, recover,
    then one Adam step on the weighted sum of the four objectives.
    """
    if len(corpus) < MIN_CORPUS:
        raise CorpusTooSmall(f"training needs at least {MIN_CORPUS} images, got {len(corpus)}")
    seed_torch(cfg.seed)
    codec = bundle.face_codec
    urw, loc, rec = bundle.urw, bundle.localizer, bundle.recovery
    use_loc = cfg.train_localizer or (cfg.train_recovery and cfg.recovery_mask == "predicted")
    phi = phi if phi is not None else PerceptualExtractor()
    params = _trainable(bundle, cfg)
    if not params:
        raise ValueError("nothing to train")
    opt = torch.optim.Adam(params, lr=cfg.lr)
    for net, flag in ((urw, cfg.train_urw), (loc, cfg.train_localizer), (rec, cfg.train_recovery)):
        if net is not None:
            net.train(flag)
            for p in net.parameters():
                p.requires_grad_(flag)

    data = images_to_tensor(corpus)
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    records: list[dict] = []
    log_file = open(log_path, "a" if append_log else "w") if log_path else None
    stream = (zlib.crc32(cfg.stage.encode()),) if cfg.stage else ()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = substream(cfg.seed, 0, *stream, epoch).permutation(n)
            for b in range(steps_per_epoch):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                rng = substream(cfg.seed, 1, *stream, step)
                idx = torch.from_numpy(order[b * cfg.batch_size : (b + 1) * cfg.batch_size])
                x = data[idx]
                B = x.shape[0]
                src = data[torch.from_numpy(rng.integers(0, n, size=B))]
                bits = torch.from_numpy(rng.integers(0, 2, size=(B, urw.cfg.n_bits)).astype(np.float32))
                with torch.no_grad():
                    z = codec.encode_tensor(x)

                urw.rms_scale = rms_multiplier(cfg, step) if cfg.train_urw else 1.0
                with torch.set_grad_enabled(cfg.train_urw):
                    i_wm, _ = urw.embed_tensor(x, bits, z)
                attack = CLEAN if step < cfg.clean_steps else cfg.attack
                edited, truth = simulate_attack_batch(i_wm, src, attack, codec, rng)
                if cfg.composite_fraction > 0 and cfg.train_localizer:
                    rows = np.nonzero(rng.random(B) < cfg.composite_fraction)[0]
                    if len(rows):
                        edited, truth = paste_composites(edited, truth, data, rows, rng)
                with torch.set_grad_enabled(cfg.train_urw or cfg.train_localizer or cfg.train_recovery):
                    logits, z_hat, feats = urw.extract_tensor(edited)

                zero = torch.zeros((), dtype=x.dtype)
                l_embed = zero
                if cfg.train_urw:
                    # fidelity is scored on the residual at its target RMS,
                    # so the enlarged residual early in training is not penalised
                    i_fid = i_wm if urw.rms_scale == 1.0 else x + (i_wm - x) / urw.rms_scale
                    l_embed = embed_loss(i_fid, x, phi)
                l_decode = decode_loss(logits, bits, z_hat, z) if cfg.train_urw else zero
                l_loc, l_rec = zero, zero
                prob = None
                if use_loc:
                    with torch.set_grad_enabled(cfg.train_localizer or cfg.train_urw):
                        prob, _ = loc(edited, feats if loc.cfg.use_similarity else None)
                    if cfg.train_localizer:
                        l_loc = dice_loss(prob, truth)
                if cfg.train_recovery:
                    warm = cfg.recovery_mask == "truth" or epoch < cfg.warmup_epochs or prob is None
                    gate_mask = truth if warm else prob
                    proxy = codec.decode_tensor(z_hat)
                    out = rec.recover(edited, proxy, z_hat, gate_mask)
                    l_rec = rec_loss(out, x, phi)

                loss = total_loss(l_embed, l_decode, l_loc, l_rec, cfg.weights)
                if not torch.isfinite(loss):
                    raise Diverged(f"non-finite loss at step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()

                rec_ = {
                    "step": step,
                    "stage": cfg.stage,
                    "epoch": epoch,
                    "embed": l_embed.item(),
                    "decode": l_decode.item(),
                    "loc": l_loc.item(),
                    "rec": l_rec.item(),
                    "total": loss.item(),
                    "lr": cfg.lr,
                    "rms_scale": urw.rms_scale,
                }
                if cfg.train_urw:
                    with torch.no_grad():
                        rec_["bit_acc"] = float(((logits > 0).float() == bits).float().mean() * 100)
                records.append(rec_)
                if log_file and step % cfg.log_every == 0:
                    log_file.write(json.dumps(rec_, sort_keys=True) + "\n")
                    log_file.flush()
                if progress is not None:
                    progress(rec_)
                step += 1
            last = (cfg.max_steps is not None and step >= cfg.max_steps) or epoch == cfg.epochs - 1
            if checkpoint_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or last):
                bundle.manifest.update(manifest_extra or {})
                bundle.manifest.update({"train_config": cfg.to_dict(), "epochs_done": epoch + 1, "seed": cfg.seed})
                prefix = f"{cfg.stage}_" if cfg.stage else ""
                save_bundle(bundle, Path(checkpoint_dir) / f"{prefix}epoch_{epoch + 1:03d}.ckpt")
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        urw.rms_scale = 1.0
        if log_file:
            log_file.close()
    bundle.eval()
    return TrainResult(bundle, records)
