import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from wmforensics.data import synthetic_corpus
from wmforensics.datamodel import LatentCode, OwnershipCode, ShapeMismatch, WatermarkPayload
from wmforensics.urw import URWCodec, URWConfig, embed, extract, logits_to_bits


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return URWCodec(URWConfig(latent_shape=(4, 8, 8)))


@pytest.fixture(scope="module")
def payload():
    rng = np.random.default_rng(0)
    return WatermarkPayload(OwnershipCode.random(64, rng), LatentCode(rng.normal(size=(4, 8, 8)).astype(np.float32)))


@pytest.fixture(scope="module")
def face():
    return synthetic_corpus(1, seed=41)[0]


def test_untrained_embed_is_valid_and_deterministic(codec, payload, face):
    a = embed(face, payload, codec)
    b = embed(face, payload, codec)
    assert a == b
    assert a.shape == face.shape
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1


def test_large_strength_still_clamped(payload, face):
    torch.manual_seed(1)
    c = URWCodec(URWConfig(latent_shape=(4, 8, 8), strength=1e4))
    out = embed(face, payload, c)
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1


def test_extraction_result_contract(codec, face):
    r = extract(face, codec)
    assert r.code_logits.shape == (64,)
    assert r.code.n == 64
    assert r.face_latent_hat.shape == (4, 8, 8)
    assert [f.shape for f in r.wm_features] == [(64, 16, 16), (64, 8, 8), (64, 4, 4)]
    assert list(r.code.bits) == list((r.code_logits > 0).astype(int))
    r2 = extract(face, codec)
    assert np.array_equal(r.code_logits, r2.code_logits)


def test_tie_rule_is_strict():
    assert logits_to_bits(np.array([0.0, 1e-12, -1e-12, 3.0])).tolist() == [0, 1, 0, 1]


def test_payload_mismatch(codec, face):
    rng = np.random.default_rng(1)
    bad_code = WatermarkPayload(OwnershipCode.random(32, rng), LatentCode(np.zeros((4, 8, 8), np.float32)))
    bad_latent = WatermarkPayload(OwnershipCode.random(64, rng), LatentCode(np.zeros((4, 16, 16), np.float32)))
    for p in (bad_code, bad_latent):
        with pytest.raises(ShapeMismatch):
            embed(face, p, codec)


def test_residual_scales_with_strength(face, payload):
    x = torch.from_numpy(np.array(face.pixels.transpose(2, 0, 1))).float()[None]
    bits = torch.from_numpy(payload.code.as_array())[None]
    lat = torch.from_numpy(np.array(payload.face_latent.values))[None]
    torch.manual_seed(2)
    c1 = URWCodec(URWConfig(latent_shape=(4, 8, 8)))
    c2 = URWCodec(URWConfig(latent_shape=(4, 8, 8), strength=2.0))
    c2.load_state_dict(c1.state_dict())
    with torch.no_grad():
        _, r1 = c1.embed_tensor(x, bits, lat)
        _, r2 = c2.embed_tensor(x, bits, lat)
    torch.testing.assert_close(r2, 2 * r1)


@settings(max_examples=10, deadline=None)
@given(target=st.floats(0.001, 0.05), seed=st.integers(0, 1000))
def test_residual_rms_is_fixed_per_image(target, seed):
    torch.manual_seed(seed)
    c = URWCodec(URWConfig(latent_shape=(4, 8, 8), residual_rms=target))
    x = torch.rand(2, 3, 64, 64)
    bits = torch.randint(0, 2, (2, 64)).float()
    with torch.no_grad():
        _, r = c.embed_tensor(x, bits, torch.randn(2, 4, 8, 8))
    rms = r.pow(2).mean(dim=(1, 2, 3)).sqrt()
    torch.testing.assert_close(rms, torch.full_like(rms, target), rtol=1e-4, atol=0)


def test_free_residual_when_rms_unset(face, payload):
    with pytest.raises(ValueError):
        URWConfig(residual_rms=0.0)
    assert URWConfig(residual_rms=None).residual_rms is None
