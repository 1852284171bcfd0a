import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from wmforensics.data import synthetic_corpus
from wmforensics.datamodel import Image, LatentCode, ShapeMismatch, ValidationError, validate_image
from wmforensics.face_codec import (
    EmptyCorpus,
    FaceCodec,
    FaceCodecConfig,
    decode_face,
    encode_face,
    train_face_codec,
)


@pytest.fixture(scope="module")
def codecs():
    out = {}
    for ld in (256, 576, 1024):
        torch.manual_seed(0)
        out[ld] = FaceCodec(FaceCodecConfig(latent_dim=ld))
    return out


@pytest.fixture(scope="module")
def faces():
    return synthetic_corpus(4, seed=31)


@pytest.mark.parametrize("ld,side", [(256, 8), (576, 12), (1024, 16)])
def test_latent_shape(codecs, faces, ld, side):
    cfg = codecs[ld].cfg
    assert cfg.latent_shape == (4, side, side)
    assert cfg.encode_resolution <= cfg.image_size
    z = encode_face(faces[0], cfg, codecs[ld])
    assert z.shape == (4, side, side) and z.size == ld


def test_invalid_latent_dim():
    with pytest.raises(ValidationError):
        FaceCodecConfig(latent_dim=512)


def test_encode_deterministic(codecs, faces):
    c = codecs[576]
    a, b = c.encode(faces[1]), c.encode(faces[1])
    assert np.array_equal(a.values, b.values)


def test_zero_latent_decodes_to_valid_image(codecs):
    for c in codecs.values():
        img = decode_face(LatentCode(np.zeros(c.cfg.latent_shape, np.float32)), c.cfg, c)
        assert isinstance(img, Image) and img.shape == (64, 64, 3)


def test_config_and_shape_mismatch(codecs, faces):
    with pytest.raises(ShapeMismatch):
        encode_face(faces[0], FaceCodecConfig(latent_dim=256), codecs[1024])
    with pytest.raises(ShapeMismatch):
        codecs[256].decode(LatentCode(np.zeros((4, 16, 16), np.float32)))
    with pytest.raises(ShapeMismatch):
        codecs[256].encode(validate_image(np.zeros((32, 32, 3))))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_encode_finite_and_decode_bounded(seed, scale):
    torch.manual_seed(0)
    codec = FaceCodec(FaceCodecConfig(latent_dim=256))
    rng = np.random.default_rng(seed)
    img = validate_image(rng.uniform(size=(64, 64, 3)) * scale)
    z = codec.encode(img)
    assert np.all(np.isfinite(z.values))
    big = LatentCode((rng.normal(size=z.shape) * 1e3).astype(np.float32))
    out = codec.decode(big)
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        train_face_codec([], FaceCodecConfig(latent_dim=256))


def test_training_is_deterministic_and_reduces_loss():
    corpus = synthetic_corpus(40, seed=3)
    cfg = FaceCodecConfig(latent_dim=256)
    a = train_face_codec(corpus, cfg, epochs=2, batch_size=8, seed=7)
    b = train_face_codec(corpus, cfg, epochs=2, batch_size=8, seed=7)
    assert a.step_losses == b.step_losses
    assert a.epoch_val_loss == b.epoch_val_loss
    assert a.epoch_val_loss[-1] < a.initial_val_loss
    assert all(not p.requires_grad for p in a.codec.model.parameters())
