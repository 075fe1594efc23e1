import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ulegray import mitigations as mt
from ulegray.errors import ConfigError

pixels = arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.just(3)),
                elements=st.floats(0, 1, width=32))


def test_grayscale_examples():
    x = np.array([[[[0.3, 0.3, 0.3], [1.0, 0.0, 0.0]]]], np.float32)
    g = mt.grayscale(x)
    assert np.array_equal(g[0, 0, 0], x[0, 0, 0])
    assert np.allclose(g[0, 0, 1], 0.299)
    assert g.shape == x.shape


def test_grayscale_rejects_wrong_channels():
    with pytest.raises(ValueError):
        mt.grayscale(np.zeros((1, 2, 2, 4), np.float32))


@given(pixels)
def test_grayscale_idempotent_and_channel_free(x):
    g = mt.grayscale(x)
    assert np.array_equal(mt.grayscale(g), g)
    assert np.all(g.astype(np.float64).std(axis=-1) == 0)


@given(pixels, st.integers(0, 2**31 - 1))
def test_grayscale_bypass_for_gray_perturbations(x, seed):
    eps = 8 / 255
    d = np.random.default_rng(seed).uniform(-eps, eps, x.shape[:-1] + (1,)).astype(np.float32)
    d3 = np.repeat(d, 3, axis=-1)
    inside = ((x + d3 >= 0) & (x + d3 <= 1)).all(axis=-1)
    lhs = mt.grayscale(np.clip(x + d3, 0, 1))
    rhs = mt.grayscale(x) + d3
    assert np.allclose(lhs[inside], rhs[inside], atol=1e-6)


def test_bdr_examples():
    assert mt.bit_depth_reduce(np.array([0.4], np.float32), 2)[0] == pytest.approx(1 / 3)
    x8 = (np.arange(256, dtype=np.float32) / 255).reshape(1, 1, 256, 1).repeat(3, -1)
    assert np.allclose(mt.bit_depth_reduce(x8, 8), x8, atol=1e-7)
    for bad in (0, 9, 2.5):
        with pytest.raises(ValueError):
            mt.bit_depth_reduce(x8, bad)


@given(pixels, st.integers(1, 8))
def test_bdr_level_set_and_idempotence(x, bits):
    q = mt.bit_depth_reduce(x, bits)
    levels = 2 ** bits - 1
    assert np.allclose(q * levels, np.round(q * levels), atol=1e-4)
    assert np.array_equal(mt.bit_depth_reduce(q, bits), q)
    assert q.min() >= 0 and q.max() <= 1


def test_bdr2_values():
    x = np.random.default_rng(0).random((4, 5, 5, 3)).astype(np.float32)
    vals = np.unique(mt.bit_depth_reduce(x, 2))
    assert np.isclose(vals[:, None], [0.0, 1 / 3, 2 / 3, 1.0]).any(axis=1).all()


big_pixels = arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(3, 6), st.integers(3, 6), st.just(3)),
                    elements=st.floats(0, 1, width=32))


@given(big_pixels, st.integers(0, 1000))
def test_augment_identity_and_determinism(x, seed):
    ident = mt.augment(x, [mt.crop(0), mt.flip(0.0)], np.random.default_rng(seed))
    assert np.array_equal(ident, x)
    stack = [mt.crop(2), mt.flip()]
    a = mt.augment(x, stack, np.random.default_rng(seed))
    b = mt.augment(x, stack, np.random.default_rng(seed))
    assert np.array_equal(a, b) and a.shape == x.shape


@given(pixels)
def test_flip_involution(x):
    rng = np.random.default_rng(0)
    assert np.array_equal(mt.random_flip(mt.random_flip(x, 1.0, rng), 1.0, rng), x)


def test_crop_at_zero_offset_with_zero_pad_is_shifted_window():
    x = torch.arange(16, dtype=torch.float32).view(1, 4, 4, 1).repeat(1, 1, 1, 3)
    padded = torch.nn.functional.pad(x.permute(0, 3, 1, 2), (1, 1, 1, 1)).permute(0, 2, 3, 1)
    out = mt.crop_at(padded, torch.tensor([1]), torch.tensor([1]), 4, 4)
    assert torch.equal(out, x)


def test_mixup_identities():
    x = np.random.default_rng(0).random((2, 3, 3, 3)).astype(np.float32)
    y = np.eye(2, dtype=np.float32)
    xm, ym = mt.mixup(x, y, 1.0, np.random.default_rng(0), lam=1.0)
    assert np.array_equal(xm, x) and np.array_equal(ym, y)
    xm, ym = mt.mixup(x, y, 1.0, np.random.default_rng(0), lam=0.5, perm=[1, 0])
    assert np.allclose(xm[0], (x[0] + x[1]) / 2) and np.allclose(xm[1], xm[0])
    assert np.allclose(ym, 0.5)
    xm, _ = mt.mixup(x, y, 1.0, np.random.default_rng(0), lam=0.0, perm=[1, 0])
    assert np.array_equal(xm, x[[1, 0]])


def test_mixup_errors():
    x = np.zeros((2, 2, 2, 3), np.float32)
    with pytest.raises(ValueError):
        mt.mixup(x, np.eye(2), 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        mt.mixup(x[:1], np.eye(2)[:1], 1.0, np.random.default_rng(0))


@given(pixels.filter(lambda a: a.shape[0] >= 2), st.floats(0.1, 5.0), st.integers(0, 99))
def test_mixup_range(x, alpha, seed):
    y = np.eye(x.shape[0], dtype=np.float32)
    xm, ym = mt.mixup(x, y, alpha, np.random.default_rng(seed))
    assert xm.min() >= 0 and xm.max() <= 1
    assert np.allclose(ym.sum(1), 1, atol=1e-6)


def test_stack_validation():
    with pytest.raises(ConfigError):
        mt.TransformStack([mt.mix(), mt.crop()])
    with pytest.raises(ConfigError):
        mt.TransformSpec("bdr", bits=9)
    with pytest.raises(ConfigError):
        mt.TransformSpec("colorjitter")
    with pytest.raises(ConfigError):
        mt.TransformStack([mt.gray(), mt.gray()])


def test_stack_apply_order_and_prefilters():
    stack = mt.TransformStack([mt.crop(), mt.flip(), mt.bdr(2), mt.gray(), mt.mix(1.0)])
    assert stack.prefilters() == [("bdr", 2), ("grayscale",)]
    x = torch.rand(4, 8, 8, 3)
    y = torch.tensor([0, 1, 2, 0])
    xo, yo = stack.apply(x, y, np.random.default_rng(0), 3)
    assert yo.shape == (4, 3)
    assert mt.is_gray(xo)
    assert stack.describe() == "crop4+flip+bdr2+grayscale+mixup"


def test_prefilter_bdr_passes_gradient():
    x = torch.rand(2, 4, 4, 3, requires_grad=True)
    out = mt.apply_prefilters(x, [("bdr", 2)])
    out.sum().backward()
    assert torch.all(x.grad == 1)
    assert torch.equal(out.detach(), mt.bit_depth_reduce(x.detach(), 2))
