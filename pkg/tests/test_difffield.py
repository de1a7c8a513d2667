"""Hand-rolled nets: forward/backward consistency, encoders, optimizer."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volcap import difffield as df


def _rng(seed):
    return np.random.default_rng(np.random.PCG64(seed))


@given(st.integers(0, 10**6))
def test_posenc_output_width_and_bounds(seed):
    rng = _rng(seed)
    enc = df.PosEnc(input_dim=3, num_freqs=5)
    x = rng.uniform(-2.0, 2.0, (10, 3))
    y = df.posenc_apply(enc, x)
    assert y.shape == (10, enc.output_dim)
    assert enc.output_dim == 3 * (1 + 2 * 5)
    # everything past the raw coordinates is a sin or cos
    assert np.abs(y[:, 3:]).max() <= 1.0 + 1e-12
    assert np.allclose(y[:, :3], x)


def test_posenc_backward_matches_fd():
    rng = _rng(2)
    enc = df.PosEnc(input_dim=3, num_freqs=4)
    x = rng.normal(size=(6, 3))
    dy = rng.normal(size=(6, enc.output_dim))
    analytic = df.posenc_backward(enc, x, dy)
    h = 1e-6
    fd = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd[i, j] = ((df.posenc_apply(enc, xp)[i] * dy[i]).sum()
                        - (df.posenc_apply(enc, xm)[i] * dy[i]).sum()) / (2 * h)
    assert np.abs(analytic - fd).max() < 1e-5


def test_mlp_param_gradients_match_numeric():
    rng = _rng(3)
    net = df.MlpNet(sizes=(4, 8, 8, 2), activations=("relu", "relu", "none"),
                    rng=_rng(3))
    for p in net.param_arrays():
        p += rng.normal(0.0, 0.2, size=p.shape)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 2))

    def loss_fn():
        y = net.forward(x)
        net._tape.pop()
        return float((w * y).sum())

    net.zero_grad()
    net.forward(x)
    net.backward(w)
    for p, g in zip(net.param_arrays(), net.grad_arrays()):
        num = df.numeric_grad(loss_fn, p)
        assert df.grad_rel_error(g, num) < 1e-6


def test_conv_param_gradients_match_numeric():
    rng = _rng(4)
    net = df.ConvNet(channels=(2, 4, 3), strides=(2, 1),
                     activations=("relu", "none"), rng=_rng(4))
    for p in net.param_arrays():
        p += rng.normal(0.0, 0.2, size=p.shape)
    x = rng.normal(size=(2, 8, 8))
    y0 = net.forward(x)
    net._tape.pop()
    w = rng.normal(size=y0.shape)

    def loss_fn():
        y = net.forward(x)
        net._tape.pop()
        return float((w * y).sum())

    net.zero_grad()
    net.forward(x)
    net.backward(w)
    for p, g in zip(net.param_arrays(), net.grad_arrays()):
        num = df.numeric_grad(loss_fn, p)
        assert df.grad_rel_error(g, num) < 1e-6


def test_mlp_zero_init_last_outputs_zero():
    net = df.MlpNet(sizes=(3, 6, 2), activations=("relu", "none"),
                    rng=_rng(1), zero_init_last=True)
    y = net.forward(_rng(1).normal(size=(4, 3)))
    net._tape.pop()
    assert np.all(y == 0.0)


def test_bce_matches_formula_and_clamps():
    s = np.array([0.3, 0.999, 1e-12, 0.5])
    t = np.array([1.0, 1.0, 0.0, 0.0])
    loss, grad = df.bce(s, t)
    eps = df.BCE_EPS
    sc = np.clip(s, eps, 1 - eps)
    want = -(t * np.log(sc) + (1 - t) * np.log(1 - sc))
    assert np.allclose(loss, want)
    # saturated probability contributes no gradient
    assert grad[2] == 0.0
    assert grad[0] != 0.0


@given(st.integers(0, 10**6))
def test_sigmoid_range_and_symmetry(seed):
    z = _rng(seed).normal(0.0, 10.0, 50)
    s = df.sigmoid(z)
    assert np.all((s >= 0.0) & (s <= 1.0))
    assert np.allclose(s + df.sigmoid(-z), 1.0, atol=1e-12)


def test_adam_updates_are_deterministic():
    def run():
        net = df.MlpNet(sizes=(2, 4, 1), activations=("relu", "none"),
                        rng=_rng(8))
        state = df.AdamState(net, lr=1e-2)
        rng = _rng(9)
        for _ in range(5):
            x = rng.normal(size=(6, 2))
            net.zero_grad()
            y = net.forward(x)
            net.backward(np.ones_like(y))
            df.adam_step(state, net)
        return [p.copy() for p in net.param_arrays()]

    pa, pb = run(), run()
    for a, b in zip(pa, pb):
        assert np.array_equal(a, b)


def test_bilinear_sample_exact_on_integer_coords():
    rng = _rng(10)
    feat = rng.normal(size=(3, 5, 7))
    uv = np.array([[0.0, 0.0], [6.0, 4.0], [3.0, 2.0]])
    out = df.bilinear_sample(feat, uv)
    want = np.stack([feat[:, 0, 0], feat[:, 4, 6], feat[:, 2, 3]])
    assert np.allclose(out, want)


def test_bilinear_sample_backward_matches_fd():
    rng = _rng(11)
    feat = rng.normal(size=(2, 4, 4))
    uv = rng.uniform(0.2, 2.8, (5, 2))
    dout = rng.normal(size=(5, 2))
    dfeat = df.bilinear_sample_backward(feat.shape, uv, dout)
    h = 1e-6
    num = np.zeros_like(feat)
    for idx in np.ndindex(feat.shape):
        fp, fm = feat.copy(), feat.copy()
        fp[idx] += h
        fm[idx] -= h
        num[idx] = ((df.bilinear_sample(fp, uv) * dout).sum()
                    - (df.bilinear_sample(fm, uv) * dout).sum()) / (2 * h)
    assert np.abs(dfeat - num).max() < 1e-6


def test_zero_grad_clears_tape_and_grads():
    net = df.MlpNet(sizes=(2, 3, 1), activations=("relu", "none"), rng=_rng(2))
    net.forward(np.ones((2, 2)))
    assert len(net._tape) == 1
    net.zero_grad()
    assert len(net._tape) == 0
    assert all(np.all(g == 0.0) for g in net.grad_arrays())
