import numpy as np
import pytest

from actionloc.layers import BatchNorm, Conv2d, Conv3d, batchnorm_forward, conv_nd
from actionloc.tensor import ShapeError, Tensor, grad_check


def test_conv2d_examples(double):
    conv = Conv2d(1, 1, 1)
    conv.weight.data[:] = 2.0
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert np.array_equal(conv(x).data[0, 0], [[2, 4], [6, 8]])

    conv = Conv2d(1, 1, 3, padding=1)
    conv.weight.data[:] = 1.0
    out = conv(Tensor(np.ones((1, 1, 2, 2)))).data
    assert np.array_equal(out, np.full((1, 1, 2, 2), 4.0))

    conv.weight.data[:] = 0.0
    assert not conv(Tensor(np.ones((1, 1, 5, 5)))).data.any()


def test_conv2d_stride_shape():
    conv = Conv2d(3, 8, 3, stride=2, padding=1)
    assert conv(Tensor(np.zeros((2, 3, 16, 16)))).shape == (2, 8, 8, 8)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        Conv2d(3, 4, 3)(Tensor(np.zeros((1, 2, 5, 5))))


def test_conv3d_identity(double, rng):
    conv = Conv3d(2, 2, 1)
    conv.weight.data[:] = np.eye(2).reshape(2, 2, 1, 1, 1)
    x = rng.normal(size=(1, 2, 3, 4, 4))
    assert np.array_equal(conv(Tensor(x)).data, x)


def test_conv3d_temporal_mean(double, rng):
    d = 4
    conv = Conv3d(1, 1, (d, 1, 1))
    conv.weight.data[:] = 1.0 / d
    x = rng.normal(size=(1, 1, d, 3, 3))
    assert np.allclose(conv(Tensor(x)).data[0, 0, 0], x[0, 0].mean(axis=0))


def test_conv3d_matches_loop_oracle(double, rng):
    x = rng.normal(size=(1, 2, 4, 5, 5))
    conv = Conv3d(2, 3, 3, stride=(2, 1, 1), padding=1, rng=rng)
    got = conv(Tensor(x)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    w, b = conv.weight.data, conv.bias.data
    want = np.zeros_like(got)
    for o in range(3):
        for t in range(got.shape[2]):
            for i in range(5):
                for j in range(5):
                    want[0, o, t, i, j] = (xp[0, :, 2 * t:2 * t + 3, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    assert np.allclose(got, want)


def test_conv3d_gradient(double, rng):
    conv = Conv3d(2, 3, 3, stride=(2, 2, 2), padding=1, rng=rng)
    x = Tensor(rng.normal(size=(2, 2, 4, 5, 5)))
    proj = Tensor(rng.normal(size=conv(x).shape))
    assert grad_check(lambda t: (conv(t) * proj).sum(), x) < 1e-4
    assert grad_check(lambda w: (conv_nd(x, w, conv.bias, conv.stride, conv.padding) * proj).sum(), conv.weight) < 1e-4


def test_batchnorm_eval_identity(double, rng):
    bn = BatchNorm(3)
    x = rng.normal(size=(2, 3, 4, 4))
    assert np.allclose(bn(Tensor(x), mode="eval").data, x, atol=1e-4)


def test_batchnorm_constant_batch(double):
    bn = BatchNorm(2)
    bn.shift.data[:] = [0.5, -1.0]
    out = bn(Tensor(np.full((4, 2, 3, 3), 7.0)), mode="train").data
    assert np.allclose(out[:, 0], 0.5) and np.allclose(out[:, 1], -1.0)


def test_batchnorm_train_statistics(double, rng):
    bn = BatchNorm(3)
    bn.scale.data[:] = [1.0, 2.0, 0.5]
    bn.shift.data[:] = [0.0, 1.0, -2.0]
    out = bn(Tensor(rng.normal(3, 5, size=(8, 3, 6, 6))), mode="train").data
    assert np.allclose(out.mean(axis=(0, 2, 3)), bn.shift.data, atol=1e-6)
    assert np.allclose(out.std(axis=(0, 2, 3)), bn.scale.data, atol=1e-3)


def test_batchnorm_train_needs_batch():
    with pytest.raises(ShapeError):
        BatchNorm(3)(Tensor(np.ones((1, 3, 2, 2))), mode="train")


def test_batchnorm_running_stats(double, rng):
    bn = BatchNorm(1, momentum=0.5)
    x = rng.normal(2.0, 3.0, size=(4, 1, 5))
    bn(Tensor(x), mode="train")
    assert np.isclose(bn.running_mean[0], 0.5 * x.mean())
    assert np.isclose(bn.running_var[0], 0.5 + 0.5 * x.var(ddof=1))


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradient(mode, double, rng):
    bn = BatchNorm(3)
    bn.running_mean[:] = rng.normal(size=3)
    bn.running_var[:] = rng.uniform(0.5, 2, size=3)
    bn.scale.data[:] = rng.uniform(0.5, 1.5, size=3)
    x = Tensor(rng.normal(size=(4, 3, 2, 2)))
    proj = Tensor(rng.normal(size=x.shape))
    f = lambda t: (batchnorm_forward(t, bn, mode) * proj).sum()
    assert grad_check(f, x) < 1e-4
    assert grad_check(lambda s: (batchnorm_forward(x, bn, mode) * proj).sum(), bn.scale) < 1e-4


def test_state_dict_roundtrip(rng):
    a, b = Conv2d(2, 3, 3, rng=np.random.default_rng(0)), Conv2d(2, 3, 3, rng=np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    assert np.array_equal(a(x).data, b(x).data)
