import json
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import ndimage

from wmforensics.checkpoint import load_bundle, save_bundle
from wmforensics.cli import main
from wmforensics.data import synthetic_corpus
from wmforensics.datamodel import load_mask_png, save_image_png
from wmforensics.face_codec import FaceCodec, FaceCodecConfig
from wmforensics.pipeline import DESK_RECOVERY
from wmforensics.recovery import RecoveryConfig
from wmforensics.training import build_models


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    torch.manual_seed(0)
    codec = FaceCodec(FaceCodecConfig(latent_dim=256))
    bundle = build_models(codec, rec_cfg=RecoveryConfig(latent_shape=codec.cfg.latent_shape, **DESK_RECOVERY), seed=0)
    save_bundle(bundle, root / "model.ckpt")
    faces = synthetic_corpus(2, seed=77)
    save_image_png(faces[0], root / "a.png")
    save_image_png(faces[1], root / "b.png")
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_embed_random_writes_sidecars(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "embed", workspace / "a.png", "--random", "--checkpoint", workspace / "model.ckpt", "--out", tmp_path)
    assert code == 0
    info = json.loads(out)
    side = json.loads(Path(info["sidecar"]).read_text())
    assert side["n"] == 64 and len(side["code_hex"]) == 16
    assert Path(info["protected"] + ".prov.json").is_file()
    prov = json.loads(Path(info["sidecar"] + ".prov.json").read_text())
    assert prov["command"] == "embed" and prov["seed"] == 0 and "config_hash" in prov


def test_embed_is_deterministic_and_seeded(workspace, tmp_path, capsys, monkeypatch):
    args = ("embed", workspace / "a.png", "--random", "--checkpoint", workspace / "model.ckpt")
    _, o1, _ = run(capsys, *args, "--out", tmp_path / "1")
    _, o2, _ = run(capsys, *args, "--out", tmp_path / "2")
    assert json.loads(o1)["code_hex"] == json.loads(o2)["code_hex"]
    assert (tmp_path / "1" / "a_protected.png").read_bytes() == (tmp_path / "2" / "a_protected.png").read_bytes()
    monkeypatch.setenv("WMF_SEED", "5")
    _, o3, _ = run(capsys, *args, "--out", tmp_path / "3")
    assert json.loads(o3)["code_hex"] != json.loads(o1)["code_hex"]


def test_embed_wrong_hex_length(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "embed", workspace / "a.png", "--payload", "abc", "--checkpoint", workspace / "model.ckpt", "--out", tmp_path)
    assert code == 2
    assert "expected 16 hex digits" in err


def test_extract_scores_against_sidecar(workspace, tmp_path, capsys):
    hexcode = "0123456789abcdef"
    run(capsys, "embed", workspace / "a.png", "--payload", hexcode, "--checkpoint", workspace / "model.ckpt", "--out", tmp_path)
    code, out, _ = run(
        capsys, "extract", tmp_path / "a_protected.png", "--sidecar", tmp_path / "a_protected.payload.json",
        "--checkpoint", workspace / "model.ckpt", "--out", tmp_path,
    )
    assert code == 0
    rec = json.loads(out)
    assert 0 <= rec["bit_accuracy"] <= 100
    assert rec["likely_unwatermarked"] == (rec["bit_accuracy"] < 65)


def _spec(path, **d):
    path.write_text(json.dumps(d))
    return path


def test_attack_degrade_only_gives_empty_mask(workspace, tmp_path, capsys):
    spec = _spec(tmp_path / "deg.json", arm="noise")
    code, out, _ = run(capsys, "attack", workspace / "a.png", "--spec", spec, "--out", tmp_path)
    assert code == 0
    mask = load_mask_png(json.loads(out)["truth_mask"])
    assert mask.values.max() == 0


def test_attack_blend_single_region_and_deterministic(workspace, tmp_path, capsys):
    spec = _spec(tmp_path / "blend.json", arm="blend", blend_prob=1.0)
    args = ("attack", workspace / "a.png", "--spec", spec, "--source", workspace / "b.png", "--seed", 3)
    assert run(capsys, *args, "--out", tmp_path / "1")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "2")[0] == 0
    for name in ("a_edited.png", "a_truth_mask.png"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()
    mask = load_mask_png(tmp_path / "1" / "a_truth_mask.png", binary=True)
    _, n = ndimage.label(mask.values)
    assert n == 1


def test_attack_needs_source(workspace, tmp_path, capsys):
    spec = _spec(tmp_path / "blend.json", arm="blend")
    code, _, err = run(capsys, "attack", workspace / "a.png", "--spec", spec, "--out", tmp_path)
    assert code == 1 and "--source" in err


def test_verify_writes_three_artifacts(workspace, tmp_path, capsys):
    run(capsys, "embed", workspace / "a.png", "--random", "--checkpoint", workspace / "model.ckpt", "--out", tmp_path)
    code, out, _ = run(
        capsys, "verify", tmp_path / "a_protected.png", "--sidecar", tmp_path / "a_protected.payload.json",
        "--checkpoint", workspace / "model.ckpt", "--out", tmp_path,
    )
    assert code == 0
    rec = json.loads(out)
    for key in ("report", "mask", "recovered"):
        assert Path(rec[key]).is_file() and Path(rec[key] + ".prov.json").is_file()
    assert {"bit_accuracy", "likely_unwatermarked", "tampered_fraction", "checkpoint"} <= set(rec)


def test_localize_and_recover(workspace, tmp_path, capsys):
    ck = workspace / "model.ckpt"
    assert run(capsys, "localize", workspace / "a.png", "--checkpoint", ck, "--out", tmp_path)[0] == 0
    code, out, _ = run(capsys, "recover", workspace / "a.png", "--checkpoint", ck, "--mask", tmp_path / "a_mask.png", "--out", tmp_path)
    assert code == 0 and Path(json.loads(out)["recovered"]).is_file()


def test_evaluate_fidelity_only_and_suite(workspace, tmp_path, capsys):
    ck = workspace / "model.ckpt"
    code, _, _ = run(capsys, "evaluate", "--checkpoint", ck, "--synthetic", 4, "--fidelity-only", "--seed", 2, "--out", tmp_path / "f")
    assert code == 0
    rows = [json.loads(line) for line in (tmp_path / "f" / "report.jsonl").read_text().splitlines()]
    assert len(rows) == 1 and set(rows[0]["metrics"]) == {"psnr", "ssim", "fid"}
    assert rows[0]["seed"] == 2 and rows[0]["checkpoint"] == load_bundle(ck).manifest["checkpoint_hash"]
    code, _, _ = run(capsys, "evaluate", "--checkpoint", ck, "--synthetic", 4, "--suite", "noise,blend,blend+mix", "--out", tmp_path / "s")
    assert code == 0
    rows = [json.loads(line) for line in (tmp_path / "s" / "report.jsonl").read_text().splitlines()]
    assert [r["attack"] for r in rows] == ["none", "noise", "blend", "blend+mix"]
    assert (tmp_path / "s" / "report.txt").read_text().count("\n") >= 6


def test_usage_errors(workspace, tmp_path, capsys):
    assert run(capsys)[0] == 1
    assert run(capsys, "train", "--ablation", "bogus")[0] == 1
    assert run(capsys, "embed", workspace / "a.png", "--random", "--out", tmp_path)[0] == 1
    assert run(capsys, "evaluate", "--suite", "nope", "--checkpoint", workspace / "model.ckpt", "--out", tmp_path)[0] == 2


def test_missing_checkpoint_is_runtime_error(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "extract", workspace / "a.png", "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path)
    assert code == 2 and "nope.ckpt" in err


def test_train_missing_corpus(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--corpus", tmp_path / "no_such_dir", "--out", tmp_path / "run")
    assert code == 2 and "no_such_dir" in err


def test_train_tiny_no_aug(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    sched = {"urw_steps": 2, "polish_steps": 1, "heads_steps": 1, "batch_size": 4, "clean_steps": 1}
    cfg.write_text(json.dumps({"synthetic_count": 100, "codec_epochs": 1, "latent_dim": 256, "schedule": sched}))
    code, out, err = run(capsys, "train", "--config", cfg, "--ablation", "none", "--out", tmp_path / "run")
    assert code == 0, err
    ck = Path(json.loads(out)["checkpoint"])
    assert ck.is_file() and Path(str(ck) + ".prov.json").is_file()
    manifest = load_bundle(ck).manifest
    assert manifest["arm"] == "none" and manifest["schedule"]["urw_steps"] == 2
    records = [json.loads(line) for line in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in records] == ["urw", "urw", "polish", "heads"]
    assert {"step", "embed", "decode", "loc", "rec", "total", "lr"} <= set(records[0])
    lines = [json.dumps(r) for r in records]
    assert np.isfinite(json.loads(lines[-1])["total"])
