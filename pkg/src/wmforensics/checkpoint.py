"""Checkpoint container: a zip holding ``manifest.json`` plus one state dict per network.

One file bundles every network so inference commands take a single path.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .face_codec import FACE_CODEC_VERSION, FaceCodec, FaceCodecConfig, FaceVAE
from .localizer import Localizer, LocalizerConfig
from .recovery import RecoveryConfig, RecoveryNet
from .urw import URWCodec, URWConfig

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Bundle:
    face_codec: FaceCodec
    urw: URWCodec | None = None
    localizer: Localizer | None = None
    recovery: RecoveryNet | None = None
    manifest: dict = field(default_factory=dict)

    @property
    def n_bits(self) -> int:
        return self.urw.cfg.n_bits

    def eval(self) -> "Bundle":
        for net in (self.urw, self.localizer, self.recovery):
            if net is not None:
                net.eval()
        return self


def _state_bytes(module) -> bytes:
    buf = io.BytesIO()
    torch.save(module.state_dict(), buf)
    return buf.getvalue()


def save_bundle(bundle: Bundle, path) -> str:
    """Write the container atomically; returns its sha256 prefix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "face_codec_version": FACE_CODEC_VERSION,
        "face_codec": bundle.face_codec.cfg.to_dict(),
        **{k: v for k, v in bundle.manifest.items() if k not in {"face_codec", "urw", "localizer", "recovery"}},
    }
    blobs = {"face_codec.pt": _state_bytes(bundle.face_codec.model)}
    for name in ("urw", "localizer", "recovery"):
        net = getattr(bundle, name)
        if net is not None:
            manifest[name] = net.cfg.to_dict()
            blobs[f"{name}.pt"] = _state_bytes(net)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        # fixed timestamps keep the archive bytes reproducible
        for name, data in [("manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode()), *sorted(blobs.items())]:
            info = zipfile.ZipInfo(name, date_time=(2020, 1, 1, 0, 0, 0))
            zf.writestr(info, data)
    tmp.replace(path)
    return file_hash(path)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _load_state(zf, name):
    return torch.load(io.BytesIO(zf.read(name)), weights_only=True)


def load_bundle(path) -> Bundle:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"not a checkpoint container: {path}") from exc
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
        if manifest.get("face_codec_version") != FACE_CODEC_VERSION:
            raise CheckpointError("face codec version mismatch")
        fc_cfg = FaceCodecConfig(**manifest["face_codec"])
        vae = FaceVAE(fc_cfg)
        vae.load_state_dict(_load_state(zf, "face_codec.pt"))
        bundle = Bundle(FaceCodec(fc_cfg, vae), manifest=manifest)
        names = set(zf.namelist())
        for name, cfg_cls, net_cls in (
            ("urw", URWConfig, URWCodec),
            ("localizer", LocalizerConfig, Localizer),
            ("recovery", RecoveryConfig, RecoveryNet),
        ):
            if f"{name}.pt" in names:
                net = net_cls(cfg_cls(**manifest[name]))
                net.load_state_dict(_load_state(zf, f"{name}.pt"))
                net.eval()
                setattr(bundle, name, net)
    bundle.manifest["checkpoint_hash"] = file_hash(path)
    return bundle
