"""Run configuration and the train-from-config workflow shared by the CLI and scripts."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attacks import ARMS
from .checkpoint import Bundle, load_bundle, save_bundle
from .data import corpus_hash, load_corpus, synthetic_corpus
from .datamodel import ALLOWED_LATENT_DIMS, DEFAULT_PATCH, ValidationError
from .face_codec import FaceCodec, FaceCodecConfig, train_face_codec
from .localizer import LocalizerConfig
from .recipes import DESK_RECOVERY, DeskSchedule, train_staged
from .recovery import RecoveryConfig
from .training import build_models
from .urw import URWConfig

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    corpus_dir: str | None = None
    synthetic_count: int = 1200
    synthetic_seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_dir: str | None = None
    face_codec_checkpoint: str | None = None
    seed: int = 0
    resolution: int = 64
    latent_dim: int = 1024
    n_bits: int = 64
    ablation: str = "full"
    codec_epochs: int = 20
    face_codec: dict = field(default_factory=dict)
    urw: dict = field(default_factory=dict)
    localizer: dict = field(default_factory=dict)
    recovery: dict = field(default_factory=lambda: dict(DESK_RECOVERY))
    # overrides of the staged desk schedule (DeskSchedule fields)
    schedule: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.resolution % DEFAULT_PATCH:
            raise ValidationError(f"resolution {self.resolution} is not divisible by the patch size {DEFAULT_PATCH}")
        if self.latent_dim not in ALLOWED_LATENT_DIMS:
            raise ValidationError(f"latent_dim must be one of {ALLOWED_LATENT_DIMS}")
        if self.n_bits < 1:
            raise ValidationError("n_bits must be positive")
        if self.ablation not in ARMS:
            raise ValidationError(f"unknown ablation arm {self.ablation!r}; expected one of {sorted(ARMS)}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def checkpoints(self) -> Path:
        return Path(self.checkpoint_dir) if self.checkpoint_dir else Path(self.output_dir) / "checkpoints"

    # ------------------------------------------------------------ derived module configs
    def face_codec_config(self) -> FaceCodecConfig:
        return FaceCodecConfig(**{"latent_dim": self.latent_dim, "image_size": self.resolution, **self.face_codec})

    def desk_schedule(self) -> DeskSchedule:
        return DeskSchedule.from_dict(self.schedule)


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON run config (if given) and apply ``overrides`` on top."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {p} is not valid JSON: {exc}") from exc
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(data)


def build_corpus(cfg: RunConfig):
    """Images plus a dataset tag; a directory corpus wins over the synthetic generator."""
    if cfg.corpus_dir:
        images = load_corpus(cfg.corpus_dir, cfg.resolution)
        if not images:
            raise ValidationError(f"no PNG/JPEG images under {cfg.corpus_dir}")
        return images, f"dir:{cfg.corpus_dir}"
    return synthetic_corpus(cfg.synthetic_count, cfg.resolution, cfg.synthetic_seed), f"synthetic:{cfg.synthetic_seed}:{cfg.synthetic_count}"


def obtain_face_codec(cfg: RunConfig, corpus) -> FaceCodec:
    """Load the configured codec checkpoint, else pretrain one and save it next to the run."""
    fc_cfg = cfg.face_codec_config()
    if cfg.face_codec_checkpoint and Path(cfg.face_codec_checkpoint).is_file():
        codec = load_bundle(cfg.face_codec_checkpoint).face_codec
        if codec.cfg != fc_cfg:
            raise ValidationError("face codec checkpoint does not match the configured face codec")
        return codec
    log.info("pretraining face codec (latent_dim=%d)", fc_cfg.latent_dim)
    res = train_face_codec(corpus, fc_cfg, epochs=cfg.codec_epochs, seed=cfg.seed)
    path = Path(cfg.face_codec_checkpoint) if cfg.face_codec_checkpoint else cfg.checkpoints / "face_codec.ckpt"
    save_bundle(Bundle(res.codec, manifest={"seed": cfg.seed, "corpus_hash": corpus_hash(corpus)}), path)
    return res.codec


def build_bundle(cfg: RunConfig, codec: FaceCodec) -> Bundle:
    size = cfg.resolution
    latent_shape = codec.cfg.latent_shape
    urw_cfg = URWConfig(**{"n_bits": cfg.n_bits, "latent_shape": latent_shape, "image_size": size, **cfg.urw})
    loc_cfg = LocalizerConfig(**{"image_size": size, **cfg.localizer})
    rec_cfg = RecoveryConfig(**{"image_size": size, "latent_shape": latent_shape, **cfg.recovery})
    return build_models(codec, cfg.n_bits, urw_cfg, loc_cfg, rec_cfg, seed=cfg.seed)


def run_train(cfg: RunConfig, progress=None) -> tuple[Path, Path]:
    """Codec pretraining (if needed) then staged training; returns ``(final checkpoint, log path)``."""
    corpus, tag = build_corpus(cfg)
    codec = obtain_face_codec(cfg, corpus)
    bundle = build_bundle(cfg, codec)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    extra = {"dataset": tag, "corpus_hash": corpus_hash(corpus), "run_config": cfg.to_dict(), "config_hash": cfg.digest()}
    sched = cfg.desk_schedule()
    train_staged(bundle, corpus, cfg.ablation, sched, cfg.seed, log_path=log_path, checkpoint_dir=cfg.checkpoints,
                 manifest_extra=extra, progress=progress)
    final = out / "model.ckpt"
    save_bundle(bundle, final)
    return final, log_path
