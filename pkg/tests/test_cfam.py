import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actionloc import tensor as T
from actionloc.backbones import ThreeDFeature, TwoDFeature
from actionloc.cfam import CFAM, apply_attention, attention_map, cfam_forward, fuse_concat, gram
from actionloc.head import DetectHead
from actionloc.losses import focal_loss
from actionloc.tensor import Tensor, grad_check, precision
from oracles import naive_attention


def test_fuse_concat_order(rng):
    f2 = Tensor(rng.normal(size=(32, 8, 8)))
    f3 = Tensor(rng.normal(size=(32, 8, 8)))
    a = fuse_concat(TwoDFeature(f2), ThreeDFeature(f3))
    assert a.shape == (64, 8, 8)
    assert np.array_equal(a.data[:32], f3.data)
    assert not np.array_equal(fuse_concat(f3, f2).data, a.data)


def test_gram_examples():
    assert np.array_equal(gram(Tensor(np.eye(2))).data, np.eye(2))
    assert np.array_equal(gram(Tensor([[1, 2], [3, 4]])).data, [[5, 11], [11, 25]])
    g = gram(Tensor([[1, 2], [0, 0], [3, 1]])).data
    assert not g[1].any() and not g[:, 1].any()


def test_attention_map_examples():
    assert np.allclose(attention_map(Tensor(np.zeros((4, 4)))).data, 0.25)
    with precision("double"):
        m = attention_map(Tensor(np.diag([500.0, 600.0, 700.0]))).data
    assert np.allclose(m, np.eye(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 12))
def test_gram_symmetric_and_rows_sum_to_one(seed, c, n):
    rng = np.random.default_rng(seed)
    with precision("double"):
        g = gram(Tensor(rng.normal(size=(c, n)))).data
        m = attention_map(Tensor(g)).data
    assert np.max(np.abs(g - g.T)) <= 1e-6
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-6)


def test_alpha_zero_is_identity(double, rng):
    B = Tensor(rng.normal(size=(6, 3, 4)))
    F = B.reshape((6, 12))
    out = apply_attention(attention_map(gram(F)), F, B, 0.0).data
    assert np.array_equal(out, B.data)


def test_identity_attention_doubles(double, rng):
    B = Tensor(rng.normal(size=(5, 2, 3)))
    out = apply_attention(Tensor(np.eye(5)), B.reshape((5, 6)), B, 1.0).data
    assert np.allclose(out, 2 * B.data)


@pytest.mark.parametrize("seed", range(5))
def test_matches_naive_loop(seed, double):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(6, 3, 3)) * 0.5
    cf = CFAM(6, 4, mid_channels=6)
    cf.alpha.data = np.asarray(0.7)
    got = cf.attend(Tensor(B)).data
    assert np.max(np.abs(got - naive_attention(B, 0.7))) < 1e-6


def test_channel_permutation_equivariance(double, rng):
    B = rng.normal(size=(2, 7, 3, 3)) * 0.5
    perm = rng.permutation(7)
    cf = CFAM(7, 4, mid_channels=7)
    cf.alpha.data = np.asarray(1.3)
    a = cf.attend(Tensor(B)).data
    b = cf.attend(Tensor(B[:, perm])).data
    assert np.allclose(a[:, perm], b, atol=1e-12)


def test_identity_convs_pass_input_through(double, rng):
    c = 4
    cf = CFAM(c, c, mid_channels=c).eval()
    for conv in cf.conv_in + cf.conv_out:
        conv.weight.data[:] = 0.0
        conv.weight.data[:, :, 1, 1] = np.eye(c)
    A = np.abs(rng.normal(size=(1, c, 5, 5)))
    out = cfam_forward(Tensor(A), cf).data
    # eval-mode norm with fresh statistics scales by 1/sqrt(1 + eps) per layer
    assert np.allclose(out, A * (1 + 1e-5) ** -2, atol=1e-9)


def test_head_channel_count():
    assert DetectHead(32, 24, 5).out_channels == 145
    assert DetectHead(32, 4, 5).out_channels == 45
    head = DetectHead(8, 4, 5)
    assert head(Tensor(np.zeros((1, 8, 7, 7)))).shape == (1, 45, 7, 7)


def test_cfam_end_to_end_gradient(double, rng):
    cf = CFAM(8, 4, mid_channels=6, rng=rng)
    cf.alpha.data = np.asarray(0.5)
    A = Tensor(rng.normal(size=(2, 8, 4, 4)))
    proj = Tensor(rng.normal(size=(2, 4, 4, 4)))
    assert grad_check(lambda t: (cfam_forward(t, cf) * proj).sum(), A, coords=rng.choice(A.size, 60, replace=False)) < 1e-4
    assert grad_check(lambda a: (cf(A) * proj).sum() + a * 0.0, cf.alpha) < 1e-4


def test_cfam_focal_gradient(double, rng):
    cf = CFAM(4, 4, mid_channels=4, rng=rng)
    cf.alpha.data = np.asarray(0.8)
    A = Tensor(rng.normal(size=(2, 4, 3, 3)))
    y = (rng.random((2, 4, 3, 3)) > 0.5).astype(float)
    f = lambda t: focal_loss(T.sigmoid(cfam_forward(t, cf)), y, gamma=2.0)
    assert grad_check(f, A) < 1e-4
