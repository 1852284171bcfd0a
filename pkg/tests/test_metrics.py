import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from oracles import brute_auc
from wmforensics.data import synthetic_corpus
from wmforensics.datamodel import ManipulationMask, OwnershipCode, ShapeMismatch
from wmforensics.metrics import (
    DegenerateTruth,
    LengthMismatch,
    MetricsReport,
    TooSmall,
    auc_rank,
    bit_accuracy,
    format_table,
    localization_scores,
    psnr,
    ssim,
)
from wmforensics.datamodel import ValidationError


@pytest.fixture(scope="module")
def faces():
    return synthetic_corpus(6, seed=21)


def test_psnr_examples():
    a = np.full((16, 16, 3), 0.5)
    assert psnr(a, a) == 100.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-6)
    assert psnr(np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(ShapeMismatch):
        psnr(np.zeros((8, 8, 3)), np.zeros((8, 16, 3)))


def test_ssim_examples(faces):
    img = faces[0]
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
    assert ssim(img.pixels, 1 - img.pixels) < 0.5
    with pytest.raises(TooSmall):
        ssim(np.zeros((10, 16, 3)), np.zeros((10, 16, 3)))


def test_ssim_noise_band(faces):
    rng = np.random.default_rng(0)
    for img in faces:
        noisy = np.clip(img.pixels + rng.normal(0, 0.05, img.pixels.shape), 0, 1)
        assert 0.3 < ssim(img.pixels, noisy) < 0.99


def test_ssim_matches_reference_implementation(faces):
    rng = np.random.default_rng(1)
    a = faces[1].pixels
    b = np.clip(a + rng.normal(0, 0.08, a.shape), 0, 1)
    ref = structural_similarity(
        a, b, channel_axis=2, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_psnr_ssim_symmetric(faces):
    a, b = faces[2].pixels, faces[3].pixels
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_bit_accuracy_examples():
    rng = np.random.default_rng(2)
    code = OwnershipCode.random(64, rng)
    assert bit_accuracy(code, code) == 100.0
    assert bit_accuracy(code.complement(), code) == 0.0
    bits = list(code.bits)
    for i in range(4):
        bits[i] ^= 1
    assert bit_accuracy(OwnershipCode(tuple(bits)), code) == 93.75
    with pytest.raises(LengthMismatch):
        bit_accuracy(OwnershipCode.random(32, rng), code)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 128), st.integers(0, 2**32 - 1))
def test_bit_accuracy_complement_sums_to_100(n, seed):
    rng = np.random.default_rng(seed)
    a, b = OwnershipCode.random(n, rng), OwnershipCode.random(n, rng)
    assert bit_accuracy(a, b) + bit_accuracy(a.complement(), b) == pytest.approx(100.0)


def test_four_pixel_worked_example():
    truth = ManipulationMask(np.array([[1.0, 1.0, 0.0, 0.0]]), binary=True)
    pred = ManipulationMask(np.array([[0.9, 0.4, 0.6, 0.1]]))
    f1, auc, miou = localization_scores(pred, truth, 0.5).as_tuple()
    assert f1 == 0.5
    assert auc == 0.75
    assert miou == pytest.approx(1 / 3, abs=1e-15)


def test_perfect_and_inverted_predictions():
    rng = np.random.default_rng(3)
    t = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
    truth = ManipulationMask(t, binary=True)
    assert localization_scores(ManipulationMask(t), truth).as_tuple() == (1.0, 1.0, 1.0)
    assert localization_scores(ManipulationMask(1 - t), truth).as_tuple() == (0.0, 0.0, 0.0)


def test_degenerate_truth():
    with pytest.raises(DegenerateTruth):
        auc_rank(np.arange(4.0), np.zeros(4))
    s = localization_scores(ManipulationMask(np.zeros((4, 4))), ManipulationMask.zeros(4, 4))
    assert s.auc is None and s.f1 == 1.0 and s.miou == 1.0


def test_auc_matches_brute_force_200_instances():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(2, 1001))
        truth = rng.uniform(size=n) < rng.uniform(0.05, 0.95)
        truth[0], truth[1] = True, False
        # quantized scores so ties actually occur
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 4)))
        assert auc_rank(scores, truth) == pytest.approx(brute_auc(scores, truth), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scores_invariant_to_joint_permutation(seed):
    rng = np.random.default_rng(seed)
    t = (rng.uniform(size=(6, 6)) > 0.6).astype(float)
    t[0, 0], t[0, 1] = 1.0, 0.0
    p = rng.uniform(size=(6, 6))
    perm = rng.permutation(36)
    a = localization_scores(ManipulationMask(p), ManipulationMask(t))
    b = localization_scores(
        ManipulationMask(p.ravel()[perm].reshape(6, 6)), ManipulationMask(t.ravel()[perm].reshape(6, 6))
    )
    assert a.f1 == pytest.approx(b.f1) and a.miou == pytest.approx(b.miou) and a.auc == pytest.approx(b.auc)


def test_report_rejects_non_finite_and_formats():
    with pytest.raises(ValidationError):
        MetricsReport({"psnr": math.inf})
    r1 = MetricsReport({"bit_acc": 99.5, "f1": 0.9, "fid": None}, attack="blend", seed=3, checkpoint="abc")
    r2 = MetricsReport({"bit_acc": 51.25, "f1": 0.5, "fid": None}, attack="noise")
    rec = r1.to_record()
    assert rec["checkpoint"] == "abc" and rec["seed"] == 3
    table = format_table([r1, r2]).splitlines()
    assert table[0].split() == ["attack", "bit_acc", "f1", "fid"]
    assert "n/a" in table[2]
    assert len({len(line) for line in table[:2]}) == 1
