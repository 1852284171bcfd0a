import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from wmforensics.datamodel import ManipulationMask, ShapeMismatch
from wmforensics.localizer import (
    IncompletePyramid,
    Localizer,
    LocalizerConfig,
    fuse_similarity,
    localize,
    similarity_map,
)
from wmforensics.data import synthetic_corpus
from wmforensics.urw import URWCodec, URWConfig, extract


def test_identical_features_give_ones():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(8, 5, 5))
    np.testing.assert_allclose(similarity_map(f, f), 1.0, atol=1e-12)


def test_opposite_features_give_minus_one():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(8, 5, 5))
    np.testing.assert_allclose(similarity_map(f, -f), -1.0, atol=1e-12)


def test_single_pixel_value():
    a = np.array([1.0, 0.0]).reshape(2, 1, 1)
    b = np.array([1.0, 1.0]).reshape(2, 1, 1)
    assert similarity_map(a, b)[0, 0] == pytest.approx(1 / math.sqrt(2), abs=1e-6)


def test_torch_and_numpy_agree():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 4, 6, 6))
    t = similarity_map(torch.from_numpy(a), torch.from_numpy(b)).numpy()
    np.testing.assert_allclose(t, similarity_map(a, b), atol=1e-12)


def test_zero_vector_is_finite():
    a = np.zeros((3, 2, 2))
    b = np.ones((3, 2, 2))
    out = similarity_map(a, b)
    assert np.all(out == 0.0)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        similarity_map(np.zeros((3, 2, 2)), np.zeros((4, 2, 2)))


def test_symmetry_and_scale_invariance_1000_vectors():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(16, 1000, 1))
    b = rng.normal(size=(16, 1000, 1))
    c = rng.uniform(0.01, 100.0, size=(1, 1000, 1))
    s = similarity_map(a, b)
    np.testing.assert_allclose(s, similarity_map(b, a), atol=1e-12)
    np.testing.assert_allclose(similarity_map(c * a, b), s, atol=1e-9)
    assert np.all(np.abs(s) <= 1.0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
    st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
)
def test_similarity_bounded(u, v):
    a = np.array(u).reshape(3, 1, 1)
    b = np.array(v).reshape(3, 1, 1)
    s = similarity_map(a, b)[0, 0]
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(similarity_map(b, a)[0, 0], abs=1e-12)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return Localizer(LocalizerConfig()).eval()


def test_alpha_initialised_to_half(model):
    assert model.alpha.item() == pytest.approx(0.5)


def test_fusion_output_shape_and_constant_interior(model):
    pyr = [np.full((16, 16), 0.3), np.full((8, 8), -0.2), np.full((4, 4), 0.7)]
    out = fuse_similarity(pyr, model, (64, 64))
    assert out.shape == (64, 64)
    # away from the zero-padded border the conv stack sees a constant input
    assert np.var(out[4:-4, 4:-4]) < 1e-6


def test_fusion_is_order_sensitive(model):
    rng = np.random.default_rng(4)
    pyr = [rng.uniform(-1, 1, (16, 16)), rng.uniform(-1, 1, (8, 8)), rng.uniform(-1, 1, (4, 4))]
    a = fuse_similarity(pyr, model, (64, 64))
    b = fuse_similarity(pyr[::-1], model, (64, 64))
    assert not np.allclose(a, b)


def test_incomplete_pyramid(model):
    with pytest.raises(IncompletePyramid):
        fuse_similarity([np.zeros((16, 16))], model, (64, 64))
    with pytest.raises(IncompletePyramid):
        model(torch.zeros(1, 3, 64, 64), None)


def test_localize_end_to_end_range(model):
    torch.manual_seed(0)
    codec = URWCodec(URWConfig()).eval()
    img = synthetic_corpus(1, seed=5)[0]
    feats = extract(img, codec).wm_features
    mask = localize(img, feats, model)
    assert isinstance(mask, ManipulationMask)
    assert mask.shape == (64, 64)
    assert mask.values.min() >= 0.0 and mask.values.max() <= 1.0


def test_seg_only_variant_needs_no_watermark_features():
    torch.manual_seed(0)
    m = Localizer(LocalizerConfig(use_similarity=False)).eval()
    with torch.no_grad():
        prob, parts = m(torch.rand(2, 3, 64, 64))
    assert prob.shape == (2, 1, 64, 64)
    assert set(parts) == {"e_dec"}


def test_mask_is_in_unit_interval_for_extreme_inputs(model):
    feats = [torch.randn(1, 64, s, s) * 1e3 for s in (16, 8, 4)]
    with torch.no_grad():
        prob, _ = model(torch.ones(1, 3, 64, 64), feats)
    assert torch.all((prob >= 0) & (prob <= 1))
