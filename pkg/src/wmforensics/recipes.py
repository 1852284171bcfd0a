"""Staged desk-scale training and the cached artifact set behind the acceptance suite.

Stage ``urw`` trains the watermark codec alone: a clean-channel phase at a
large residual, then the arm's attacks, then a geometric anneal of the
residual down to its target RMS. Stage ``polish`` continues at the target
RMS with a lower learning rate and a fresh optimizer. Stage ``heads`` freezes the codec and trains
the localizer and the recovery network together, with the recovery gate fed
by the ground-truth mask during the first epoch.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .attacks import arm_config
from .checkpoint import Bundle, load_bundle, save_bundle
from .data import corpus_hash, synthetic_corpus
from .face_codec import FaceCodec, FaceCodecConfig, train_face_codec
from .localizer import LocalizerConfig
from .recovery import RecoveryConfig
from .training import TrainConfig, build_models, train
from .urw import URWConfig

log = logging.getLogger(__name__)

# CPU-sized transformer used unless a config overrides it
DESK_RECOVERY = {"dim": 128, "depth": 4, "heads": 4}

ARTIFACTS_ENV = "WMF_ARTIFACTS"
DEFAULT_ARTIFACTS = "/root/artifacts"


@dataclass
class DeskSchedule:
    batch_size: int = 8
    urw_steps: int = 4500
    urw_lr: float = 1e-3
    clean_steps: int = 800
    rms_start: float = 18.0
    rms_hold_steps: int = 1200
    rms_anneal_steps: int = 1800
    polish_steps: int = 1000
    polish_lr: float = 2e-4
    heads_steps: int = 2000
    heads_lr: float = 2e-4
    composite_fraction: float = 0.5
    recovery_mask: str = "predicted"
    blend_prob: float = 0.75
    mixing_prob: float = 0.3
    checkpoint_every: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "DeskSchedule":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def urw_stage_config(arm: str, sched: DeskSchedule, seed: int) -> TrainConfig:
    return TrainConfig(
        lr=sched.urw_lr,
        batch_size=sched.batch_size,
        epochs=10**6,
        max_steps=sched.urw_steps,
        seed=seed,
        arm=arm,
        attack=arm_config(arm, blend_prob=sched.blend_prob, mixing_prob=sched.mixing_prob, seed=seed),
        train_urw=True,
        train_localizer=False,
        train_recovery=False,
        composite_fraction=0.0,
        clean_steps=sched.clean_steps,
        rms_start=sched.rms_start,
        rms_hold_steps=sched.rms_hold_steps,
        rms_anneal_steps=sched.rms_anneal_steps,
        checkpoint_every=sched.checkpoint_every,
        stage="urw",
    )


def polish_stage_config(arm: str, sched: DeskSchedule, seed: int) -> TrainConfig:
    base = urw_stage_config(arm, sched, seed)
    return replace(base, lr=sched.polish_lr, max_steps=sched.polish_steps, clean_steps=0, rms_start=1.0,
                   rms_hold_steps=0, rms_anneal_steps=0, stage="polish")


def heads_stage_config(sched: DeskSchedule, seed: int, train_localizer=True, train_recovery=True,
                       composite_fraction: float | None = None, recovery_mask: str | None = None) -> TrainConfig:
    return TrainConfig(
        lr=sched.heads_lr,
        batch_size=sched.batch_size,
        epochs=10**6,
        max_steps=sched.heads_steps,
        seed=seed,
        arm="full",
        attack=arm_config("full", blend_prob=sched.blend_prob, mixing_prob=sched.mixing_prob, seed=seed),
        train_urw=False,
        train_localizer=train_localizer,
        train_recovery=train_recovery,
        composite_fraction=sched.composite_fraction if composite_fraction is None else composite_fraction,
        recovery_mask=recovery_mask or sched.recovery_mask,
        warmup_epochs=1,
        checkpoint_every=sched.checkpoint_every,
        stage="heads",
    )


def train_staged(bundle: Bundle, corpus, arm: str = "full", sched: DeskSchedule | None = None, seed: int = 0,
                 log_path=None, checkpoint_dir=None, manifest_extra: dict | None = None,
                 stages=("urw", "polish", "heads"), progress=None, append_log: bool = False, **heads_kw) -> Bundle:
    """Run the requested stages in order, writing every step to one log."""
    sched = sched or DeskSchedule()
    extra = {**(manifest_extra or {}), "schedule": sched.to_dict(), "arm": arm}
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        if not append_log:
            Path(log_path).write_text("")
    for name in stages:
        if name == "urw":
            cfg = urw_stage_config(arm, sched, seed)
        elif name == "polish":
            cfg = polish_stage_config(arm, sched, seed)
        elif name == "heads":
            cfg = heads_stage_config(sched, seed, **heads_kw)
        else:
            raise ValueError(f"unknown stage {name!r}")
        log.info("stage %s: %d steps", name, cfg.max_steps)
        train(bundle, corpus, cfg, log_path=log_path, checkpoint_dir=checkpoint_dir, manifest_extra=extra,
              progress=progress, append_log=True)
    bundle.manifest.update(extra)
    bundle.manifest["stages"] = list(bundle.manifest.get("stages", [])) + list(stages)
    return bundle


# ------------------------------------------------------------------ artifact set


def artifacts_dir(root=None) -> Path:
    return Path(root or os.environ.get(ARTIFACTS_ENV, DEFAULT_ARTIFACTS))


def train_corpus(seed: int = 0, count: int = 1200):
    return synthetic_corpus(count, seed=seed)


def eval_corpus(count: int = 200, seed: int = 1):
    return synthetic_corpus(count, seed=seed)


def _cached(path: Path, build):
    if path.is_file():
        return load_bundle(path)
    log.info("building %s", path)
    bundle = build()
    save_bundle(bundle, path)
    return load_bundle(path)


def face_codec_artifact(latent_dim: int, root=None, corpus=None, seed: int = 0) -> FaceCodec:
    path = artifacts_dir(root) / f"codec_{latent_dim}.ckpt"

    def build():
        images = corpus if corpus is not None else train_corpus(seed)
        res = train_face_codec(images, FaceCodecConfig(latent_dim=latent_dim), epochs=20, seed=seed)
        return Bundle(res.codec, manifest={"seed": seed, "corpus_hash": corpus_hash(images)})

    return _cached(path, build).face_codec


def fresh_bundle(codec: FaceCodec, seed: int, loc_kw=None) -> Bundle:
    size, shape = codec.cfg.image_size, codec.cfg.latent_shape
    return build_models(
        codec,
        urw_cfg=URWConfig(latent_shape=shape, image_size=size),
        loc_cfg=LocalizerConfig(image_size=size, **(loc_kw or {})),
        rec_cfg=RecoveryConfig(image_size=size, latent_shape=shape, **DESK_RECOVERY),
        seed=seed,
    )


def urw_artifact(arm: str, latent_dim: int = 1024, root=None, sched: DeskSchedule | None = None, seed: int = 0) -> Bundle:
    """Watermark codec trained on one ablation arm (heads untrained).

    The annealed codec is cached separately so the polish stage can be
    rerun without repeating the long first stage.
    """
    root = artifacts_dir(root)
    name = f"urw_{arm}_{latent_dim}"
    log_path = root / "logs" / f"{name}.jsonl"

    def build_anneal():
        corpus = train_corpus(seed)
        bundle = fresh_bundle(face_codec_artifact(latent_dim, root, corpus, seed), seed)
        return train_staged(bundle, corpus, arm, sched, seed, log_path=log_path, stages=("urw",),
                            manifest_extra={"corpus_hash": corpus_hash(corpus)})

    def build():
        bundle = _cached(root / f"{name}_anneal.ckpt", build_anneal)
        corpus = train_corpus(seed)
        return train_staged(bundle, corpus, arm, sched, seed, log_path=log_path, stages=("polish",),
                            manifest_extra={"corpus_hash": corpus_hash(corpus)}, append_log=True)

    return _cached(root / f"{name}.ckpt", build)


def heads_artifact(name: str, latent_dim: int = 1024, root=None, sched: DeskSchedule | None = None, seed: int = 0,
                   use_similarity: bool = True, **heads_kw) -> Bundle:
    """Localizer and recovery trained on the frozen full-arm watermark codec."""
    root = artifacts_dir(root)
    path = root / f"{name}.ckpt"

    def build():
        corpus = train_corpus(seed)
        base = urw_artifact("full", latent_dim, root, sched, seed)
        bundle = fresh_bundle(base.face_codec, seed, {"use_similarity": use_similarity})
        bundle.urw.load_state_dict(base.urw.state_dict())
        bundle.manifest.update(base.manifest)
        return train_staged(bundle, corpus, "full", sched, seed, log_path=root / "logs" / f"{name}.jsonl",
                            stages=("heads",), manifest_extra={"corpus_hash": corpus_hash(corpus)}, **heads_kw)

    return _cached(path, build)


def main_artifact(root=None, sched: DeskSchedule | None = None, seed: int = 0) -> Bundle:
    return heads_artifact("main", 1024, root, sched, seed)


def build_all(root=None, sched: DeskSchedule | None = None, seed: int = 0) -> list[Path]:
    """Train (or load) every bundle the acceptance suite reads, in dependency order."""
    main_artifact(root, sched, seed)
    heads_artifact("loc_seg_only", 1024, root, sched, seed, use_similarity=False, train_recovery=False)
    heads_artifact("loc_genuine_only", 1024, root, sched, seed, composite_fraction=0.0, train_recovery=False)
    for arm in ("none", "noise", "blend"):
        urw_artifact(arm, 1024, root, sched, seed)
    for dim in (256, 576):
        heads_artifact(f"heads_{dim}", dim, root, sched, seed)
    return sorted(artifacts_dir(root).glob("*.ckpt"))


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="build the desk-scale artifact set")
    parser.add_argument("--root", default=None, help=f"artifact directory (default ${ARTIFACTS_ENV} or {DEFAULT_ARTIFACTS})")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    for path in build_all(args.root, seed=args.seed):
        print(path)
