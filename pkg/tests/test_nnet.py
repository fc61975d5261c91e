import math

import numpy as np
import pytest

from terrain_twin import gradcheck, nnet
from terrain_twin.nnet import UNetConfig


def _direct_conv(x, w, b):
    n, cin, h, wd = x.shape
    k = w.shape[0]
    r = k // 2
    out = np.zeros((n, w.shape[3], h, wd))
    for a in range(n):
        for co in range(w.shape[3]):
            for i in range(h):
                for j in range(wd):
                    s = b[co]
                    for di in range(k):
                        for dj in range(k):
                            ii, jj = i + di - r, j + dj - r
                            if 0 <= ii < h and 0 <= jj < wd:
                                s += x[a, :, ii, jj] @ w[di, dj, :, co]
                    out[a, co, i, j] = s
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    w[1, 1, 0, 0] = 1
    assert np.array_equal(nnet.conv2d_forward(x, w, np.zeros(1))[0], x)


def test_conv_ones():
    out, _ = nnet.conv2d_forward(np.ones((1, 1, 4, 4)), np.ones((3, 3, 1, 1)), np.zeros(1))
    assert out[0, 0, 1, 1] == 9 and out[0, 0, 0, 0] == 4 and out[0, 0, 0, 1] == 6


def test_conv_bias_only():
    out, _ = nnet.conv2d_forward(np.ones((1, 2, 3, 3)), np.zeros((3, 3, 2, 4)), np.full(4, 2.5))
    assert (out == 2.5).all()


def test_conv_matches_direct_summation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 6))
    w = rng.standard_normal((3, 3, 3, 2))
    b = rng.standard_normal(2)
    assert np.allclose(nnet.conv2d_forward(x, w, b)[0], _direct_conv(x, w, b), atol=1e-12)


def test_conv_backward_zero_and_linear():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 3, 2, 3))
    g = rng.standard_normal((1, 3, 4, 4))
    assert all(not a.any() for a in nnet.conv2d_backward(x, w, np.zeros_like(g)))
    one = nnet.conv2d_backward(x, w, g)
    two = nnet.conv2d_backward(x, w, 2 * g)
    for a, b in zip(one, two):
        assert np.allclose(2 * a, b, rtol=1e-14, atol=0)
    assert np.allclose(one[2], g.sum(axis=(0, 2, 3)))


def test_conv_shape_error():
    with pytest.raises(nnet.ShapeError):
        nnet.conv2d_forward(np.ones((1, 2, 4, 4)), np.ones((3, 3, 3, 1)), np.zeros(1))


@pytest.mark.parametrize("check", [gradcheck.check_conv, gradcheck.check_relu,
                                   gradcheck.check_maxpool, gradcheck.check_tconv,
                                   gradcheck.check_concat, gradcheck.check_dropout_off,
                                   gradcheck.check_softmax_ce])
def test_layer_gradients(check):
    for seed in range(3):
        assert check(np.random.default_rng(seed)).max_rel_error < 1e-6


def test_adjoint_identity_random_shapes():
    # <g, L(x + e d) - L(x)> / e  ->  <L*(g), d> for the linear layers
    rng = np.random.default_rng(4)
    for _ in range(5):
        cin, cout, h, w = rng.integers(1, 4), rng.integers(1, 4), 2 * rng.integers(1, 4), \
            2 * rng.integers(1, 4)
        x = rng.standard_normal((1, cin, h, w))
        d = rng.standard_normal(x.shape)
        k = rng.standard_normal((3, 3, cin, cout))
        g = rng.standard_normal((1, cout, h, w))
        lhs = np.sum(g * (nnet.conv2d_forward(x + 1e-6 * d, k, np.zeros(cout))[0]
                          - nnet.conv2d_forward(x, k, np.zeros(cout))[0])) / 1e-6
        rhs = np.sum(nnet.conv2d_backward(x, k, g)[0] * d)
        assert lhs == pytest.approx(rhs, rel=1e-6)
        kt = rng.standard_normal((2, 2, cin, cout))
        gt = rng.standard_normal((1, cout, 2 * h, 2 * w))
        lhs = np.sum(gt * (nnet.tconv2(x + 1e-6 * d, kt, np.zeros(cout))
                           - nnet.tconv2(x, kt, np.zeros(cout)))) / 1e-6
        rhs = np.sum(nnet.tconv2_backward(x, kt, gt)[0] * d)
        assert lhs == pytest.approx(rhs, rel=1e-6)


def test_relu_values():
    assert nnet.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    assert nnet.relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)).tolist() == [0, 0, 1]


def test_maxpool_values_and_ties():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out, idx = nnet.maxpool2(x)
    assert out.item() == 4 and idx.item() == 3
    c = np.ones((1, 2, 4, 4))
    out, idx = nnet.maxpool2(c)
    assert (out == 1).all() and (idx == 0).all()
    g = nnet.maxpool2_backward(idx, np.ones_like(out))
    assert (g[:, :, ::2, ::2] == 1).all() and g.sum() == out.size
    with pytest.raises(nnet.ShapeError):
        nnet.maxpool2(np.ones((1, 1, 3, 4)))


def test_tconv_scatter():
    w = np.arange(4.0).reshape(2, 2, 1, 1)
    out = nnet.tconv2(np.ones((1, 1, 1, 1)), w, np.zeros(1))
    assert out[0, 0].tolist() == [[0, 1], [2, 3]]
    assert nnet.tconv2(np.ones((1, 1, 8, 8)), np.ones((2, 2, 1, 5)), np.zeros(5)).shape \
        == (1, 5, 16, 16)


def test_concat_split():
    a = np.random.default_rng(0).random((1, 2, 4, 4))
    b = np.random.default_rng(1).random((1, 3, 4, 4))
    c = nnet.concat_channels(a, b)
    assert c.shape == (1, 5, 4, 4)
    ga, gb = nnet.split_channels(c, 2)
    assert np.array_equal(ga, a) and np.array_equal(gb, b)
    assert np.array_equal(nnet.concat_channels(a, np.empty((1, 0, 4, 4))), a)
    with pytest.raises(nnet.ShapeError):
        nnet.concat_channels(a, np.ones((1, 1, 2, 4)))


def test_dropout():
    x = np.ones(100_000)
    assert nnet.dropout(x, 0.0, np.random.default_rng(0), True)[0] is x
    assert nnet.dropout(x, 0.7, None, False)[0] is x
    out, keep = nnet.dropout(x, 0.5, np.random.default_rng(0), True)
    assert abs(out.mean() - 1.0) < 0.02
    assert set(np.unique(out)) == {0.0, 2.0}
    with pytest.raises(ValueError):
        nnet.dropout(x, 1.0, None, True)


def test_softmax_ce_values():
    loss, grad = nnet.softmax_ce(np.zeros((2, 7, 3, 3)), np.zeros((2, 3, 3), int))
    assert loss == pytest.approx(math.log(7), abs=1e-12)
    assert grad.sum() == pytest.approx(0, abs=1e-12)
    logits = np.zeros((1, 7, 2, 2))
    logits[:, 3] = 30
    loss, _ = nnet.softmax_ce(logits, np.full((1, 2, 2), 3))
    assert 0 <= loss < 1e-9
    with pytest.raises(ValueError):
        nnet.softmax_ce(np.zeros((1, 7, 1, 1)), np.array([[[7]]]))


def test_softmax_large_logits_stable():
    p = nnet.softmax(np.array([[1000.0, 999.0, -1000.0]]))
    assert np.isfinite(p).all() and p.sum() == pytest.approx(1, abs=1e-12)


def test_unet_shapes():
    model = nnet.init_params(UNetConfig(), 0)
    out = nnet.unet_forward(model, np.zeros((1, 3, 64, 64), np.float32))
    assert out.shape == (1, 7, 64, 64)
    for depth, size in ((1, 6), (3, 16)):
        m = nnet.init_params(UNetConfig(in_channels=4, depth=depth, base_filters=2), 1)
        assert nnet.unet_forward(m, np.zeros((2, 4, size, size))).shape == (2, 7, size, size)
    with pytest.raises(nnet.ShapeError):
        nnet.unet_forward(model, np.zeros((1, 3, 62, 64), np.float32))


def test_zero_network_gives_ln7():
    model = nnet.init_params(UNetConfig(depth=1, base_filters=4), 0)
    for k in model.params:
        model.params[k][...] = 0
    x = np.random.default_rng(0).random((1, 3, 8, 8)).astype(np.float32)
    logits = nnet.unet_forward(model, x)
    assert not logits.any()
    loss, _ = nnet.softmax_ce(logits.astype(np.float64), np.zeros((1, 8, 8), int))
    assert loss == pytest.approx(math.log(7))


def test_init_params():
    cfg = UNetConfig()
    a = nnet.init_params(cfg, 3)
    b = nnet.init_params(cfg, 3)
    for (name, shape, fan_in) in nnet.param_layout(cfg):
        assert a.params[name].tobytes() == b.params[name].tobytes()
        assert a.params[name].shape == shape
        if name.endswith(".b"):
            assert not a.params[name].any()
        else:
            bound = math.sqrt(6 / fan_in)
            assert np.abs(a.params[name]).max() <= bound


def test_unet_whole_model_gradient():
    r = gradcheck.check_unet(np.random.default_rng(0))
    assert r.max_rel_error < 1e-5


def test_unet_deterministic_with_dropout():
    cfg = UNetConfig(depth=1, base_filters=4, dropout_p=0.5)
    m = nnet.init_params(cfg, 0)
    x = np.random.default_rng(1).random((1, 3, 8, 8)).astype(np.float32)
    a = nnet.unet_forward(m, x, True, np.random.default_rng(2))
    b = nnet.unet_forward(m, x, True, np.random.default_rng(2))
    assert a.tobytes() == b.tobytes()
    assert nnet.unet_forward(m, x).tobytes() == nnet.unet_forward(m, x).tobytes()


def test_unet_config_validation():
    for kw in (dict(in_channels=2), dict(n_classes=5), dict(depth=0), dict(dropout_p=1.0)):
        with pytest.raises(ValueError):
            UNetConfig(**kw).validate()
