import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import bce
from wmforensics.datamodel import ShapeMismatch
from wmforensics.losses import (
    IdentityFeatures,
    LossWeights,
    NonFinitePart,
    PerceptualExtractor,
    decode_loss,
    dice_loss,
    embed_loss,
    rec_loss,
    total_loss,
)

ID = IdentityFeatures()


def _img(seed=0, shape=(1, 3, 8, 8)):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# ------------------------------------------------------------ closed forms
def test_embed_identity_and_offset():
    x = _img() * 0.8
    assert embed_loss(x, x, ID).item() == 0.0
    assert embed_loss(x + 0.1, x, ID).item() == pytest.approx(0.11, abs=1e-6)


def test_decode_closed_forms():
    code = torch.tensor([[1.0, 0.0, 1.0, 1.0, 0.0]])
    z = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    logits = torch.where(code > 0, 10.0, -10.0).double()
    expected = bce(1 / (1 + math.exp(-10)), 1.0)
    assert decode_loss(logits, code, z, z).item() == pytest.approx(expected, abs=1e-9)
    assert decode_loss(logits, code, z, z).item() == pytest.approx(4.54e-5, rel=1e-3)
    assert decode_loss(torch.zeros_like(logits), code, z, z).item() == pytest.approx(math.log(2), abs=1e-6)
    assert decode_loss(logits, code, z + 0.1, z).item() == pytest.approx(expected + 0.01, abs=1e-6)


def test_dice_closed_forms():
    m = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    assert dice_loss(m, m, eps=1e-9).item() == pytest.approx(0.0, abs=1e-9)
    assert dice_loss(m, 1 - m, eps=1e-9).item() == pytest.approx(1.0, abs=1e-9)
    half = torch.full((2, 2), 0.5)
    assert dice_loss(half, m, eps=1e-9).item() == pytest.approx(0.5, abs=1e-6)
    # with the default eps: 1 - (2 + 1) / (4 + 1)
    assert dice_loss(half, m).item() == pytest.approx(0.4, abs=1e-6)


def test_dice_batched_is_per_sample_mean():
    a = torch.rand(3, 1, 4, 4, generator=torch.Generator().manual_seed(1))
    b = (torch.rand(3, 1, 4, 4, generator=torch.Generator().manual_seed(2)) > 0.5).float()
    per = [dice_loss(a[i, 0], b[i, 0]).item() for i in range(3)]
    assert dice_loss(a, b).item() == pytest.approx(np.mean(per), abs=1e-6)


def test_rec_closed_forms():
    x = _img(1) * 0.7
    assert rec_loss(x, x, ID).item() == 0.0
    assert rec_loss(x + 0.2, x, ID).item() == pytest.approx(0.4, abs=1e-6)


def test_total_loss_examples():
    one = torch.tensor(1.0)
    assert total_loss(one, one, one, one).item() == pytest.approx(5.0)
    zero = torch.tensor(0.0)
    assert total_loss(zero, zero, zero, zero).item() == 0.0
    assert total_loss(one, one, one, torch.tensor(7.0), LossWeights(rec=0.0)).item() == pytest.approx(3.0)


def test_default_weights():
    w = LossWeights()
    assert (w.decode, w.loc, w.rec) == (1.0, 1.0, 2.0)
    with pytest.raises(ValueError):
        LossWeights(loc=-1.0)


def test_total_loss_rejects_non_finite():
    one = torch.tensor(1.0)
    with pytest.raises(NonFinitePart, match="rec"):
        total_loss(one, one, one, torch.tensor(float("nan")))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        embed_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 9), ID)
    with pytest.raises(ShapeMismatch):
        dice_loss(torch.zeros(4), torch.zeros(5))
    with pytest.raises(ShapeMismatch):
        decode_loss(torch.zeros(1, 4), torch.zeros(1, 5), torch.zeros(1), torch.zeros(1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_total_loss_linear_and_nonnegative(seed, l1, l2, l3):
    g = torch.Generator().manual_seed(seed)
    parts = [torch.rand((), generator=g) * 5 for _ in range(4)]
    w = LossWeights(l1, l2, l3)
    t = total_loss(*parts, w).item()
    assert t >= 0
    doubled = total_loss(parts[0], parts[1] * 2, parts[2], parts[3], w).item()
    assert doubled - t == pytest.approx(l1 * parts[1].item(), abs=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative(seed):
    a, b = _img(seed), _img(seed + 1)
    phi = PerceptualExtractor().double()
    assert embed_loss(a, b, phi).item() >= 0
    assert rec_loss(a, b, phi).item() >= 0
    assert 0 <= dice_loss(a, (b > 0.5).double()).item() <= 1


def test_perceptual_extractor_is_frozen_and_deterministic():
    a, b = PerceptualExtractor(), PerceptualExtractor()
    assert all(not p.requires_grad for p in a.parameters())
    x = torch.rand(1, 3, 16, 16)
    for fa, fb in zip(a(x), b(x)):
        assert torch.equal(fa, fb)


# ------------------------------------------------------------ finite-difference gradients
def _gradcheck(fn, *inputs):
    return torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-7, rtol=1e-3)


def test_embed_loss_gradcheck():
    phi = PerceptualExtractor().double()
    a = _img(2).requires_grad_()
    b = _img(3)
    assert _gradcheck(lambda x: embed_loss(x, b, phi), a)


def test_decode_loss_gradcheck():
    g = torch.Generator().manual_seed(4)
    logits = torch.randn(1, 64, generator=g, dtype=torch.float64, requires_grad=True)
    code = (torch.rand(1, 64, generator=g) > 0.5).double()
    z = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
    z_hat = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
    assert _gradcheck(lambda l, zh: decode_loss(l, code, zh, z), logits, z_hat)


def test_dice_loss_gradcheck():
    pred = _img(5, (1, 1, 8, 8)).requires_grad_()
    truth = (_img(6, (1, 1, 8, 8)) > 0.5).double()
    assert _gradcheck(lambda p: dice_loss(p, truth), pred)


def test_rec_loss_gradcheck():
    phi = PerceptualExtractor().double()
    a = _img(7).requires_grad_()
    b = _img(8)
    assert _gradcheck(lambda x: rec_loss(x, b, phi), a)
