import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neural_retarget.nn import (
    Adam, ConfigError, MLP, NetworkConfig, NumericError, gradient, load_checkpoint, positional_encode,
    save_checkpoint,
)


def small_config(layers=2, channels=4, bands=1, head="identity", inputs=2, outputs=2):
    return NetworkConfig(input_dim=inputs, hidden_channels=channels, hidden_layers=layers,
                         encoding_bands=bands, output_dim=outputs, output_activation=head)


# -- positional encoding ----------------------------------------------------------

def test_encode_zero():
    np.testing.assert_allclose(positional_encode([0.0], 1), [0.0, 0.0, 1.0])


def test_encode_one():
    np.testing.assert_allclose(positional_encode([1.0], 1), [1.0, 0.0, -1.0], atol=1e-15)


def test_encode_quarter_two_bands():
    # sin/cos evaluated with math, independent of numpy's vectorised path
    expect = [0.25, math.sin(math.pi / 4), math.cos(math.pi / 4), math.sin(math.pi / 2), math.cos(math.pi / 2)]
    np.testing.assert_allclose(positional_encode([0.25], 2), expect, atol=1e-15)


@given(st.integers(1, 3), st.integers(0, 4))
def test_encode_width(d, bands):
    p = np.random.default_rng(d + bands).random((5, d))
    assert positional_encode(p, bands).shape == (5, d * (1 + 2 * bands))


# -- config and forward -----------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(hidden_layers=1), dict(hidden_channels=0), dict(encoding_bands=-1),
                                dict(output_activation="tanh")])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        NetworkConfig(input_dim=2, **kw)


def test_zero_network_identity_head():
    net = MLP.zeros(small_config())
    assert np.all(net(np.random.default_rng(0).random((7, 2))) == 0)


def test_zero_network_sigmoid_head():
    net = MLP.zeros(small_config(head="sigmoid", outputs=3))
    np.testing.assert_array_equal(net(np.random.default_rng(0).random((4, 2))), 0.5)


def test_hand_set_network():
    # x -> W0 (1 unit) -> leaky -> W1 -> leaky (+ residual of layer 0) -> head
    cfg = NetworkConfig(input_dim=1, hidden_channels=1, hidden_layers=2, encoding_bands=0, output_dim=1)
    net = MLP.zeros(cfg, dtype=np.float64)
    net.params["W0"][:] = 2.0
    net.params["b0"][:] = -1.0
    net.params["W1"][:] = 0.5
    net.params["Wout"][:] = 3.0

    def leaky(z):
        return z if z > 0 else 0.01 * z

    for x in (-1.0, 0.2, 0.9):
        h0 = leaky(2 * x - 1)
        h1 = leaky(0.5 * h0) + h0
        assert net(np.array([[x]]))[0, 0] == pytest.approx(3 * h1, rel=1e-12)


def test_forward_shape_mismatch():
    cfg = small_config()
    params = dict(MLP.init(cfg, 0).params, W1=np.zeros((3, 3), np.float32))
    with pytest.raises(ConfigError):
        MLP(cfg, params)
    with pytest.raises(ConfigError):
        MLP.init(cfg, 0)(np.zeros((1, 3)))


def test_forward_is_pure():
    net = MLP.init(small_config(), 3)
    x = np.random.default_rng(1).random((9, 2))
    assert net(x).tobytes() == net(x).tobytes()


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_sigmoid_head_open_interval(seed):
    net = MLP.init(small_config(head="sigmoid", channels=8), seed)
    y = net(np.random.default_rng(seed).normal(size=(16, 2)))
    assert np.all((y > 0) & (y < 1))


# -- gradients --------------------------------------------------------------------

def test_constant_tail_zero_gradient():
    net = MLP.init(small_config(), 0, dtype=np.float64)
    loss, grads, dx = gradient(net, np.random.default_rng(0).random((5, 2)), lambda y: (1.0, np.zeros_like(y)))
    assert loss == 1.0
    assert all(np.all(g == 0) for g in grads.values()) and np.all(dx == 0)


def test_square_loss_linear_unit():
    # one linear unit through the identity head: y = w x (residual path adds h0 twice the slope)
    cfg = NetworkConfig(input_dim=1, hidden_channels=1, hidden_layers=2, encoding_bands=0, output_dim=1)
    net = MLP.zeros(cfg, dtype=np.float64)
    net.params["W0"][:] = 1.0
    net.params["Wout"][:] = 1.0
    w = 0.7
    net.params["W0"][:] = w
    x = np.array([[0.4]])
    # h0 = w x, h1 = 0 + h0, y = h1 -> L = (w x)^2, dL/dW0 = 2 w x^2
    loss, grads, _ = gradient(net, x, lambda y: (float(np.sum(y**2)), 2 * y))
    assert loss == pytest.approx((w * 0.4) ** 2)
    assert grads["W0"][0, 0] == pytest.approx(2 * w * 0.4**2)


def central_difference(net, x, tail, h=1e-4):
    out = {}
    for k, p in net.params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = tail(net(x))[0]
            p[idx] = old - h
            lm = tail(net(x))[0]
            p[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        out[k] = g
    return out


def far_from_kinks(net, x, tol=1e-6):
    _, cache = net.forward_cached(x)
    return all(np.all(np.abs(z) > tol) for z in cache[1])


@pytest.mark.parametrize("head", ["identity", "sigmoid", "leaky-relu"])
@pytest.mark.parametrize("layers", [2, 3])
def test_gradient_matches_finite_differences(head, layers):
    rng = np.random.default_rng(layers)
    w = rng.normal(size=(6, 2))
    tail = lambda y: (float(np.sum(np.sin(y) * w)), np.cos(y) * w)  # noqa: E731
    for seed in range(5):
        net = MLP.init(small_config(layers=layers, channels=8, head=head), seed, dtype=np.float64)
        x = rng.random((6, 2))
        if not far_from_kinks(net, x):
            continue
        _, grads, _ = gradient(net, x, tail)
        fd = central_difference(net, x, tail)
        for k in grads:
            err = np.abs(grads[k] - fd[k]) / np.maximum(1e-8, np.abs(fd[k]) + np.abs(grads[k]))
            assert err.max() < 1e-4, k


def test_input_gradient_matches_finite_differences():
    net = MLP.init(small_config(channels=8, bands=3, outputs=1), 5, dtype=np.float64)
    x = np.random.default_rng(2).random((4, 2))
    dx = net.input_gradient(x)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (net(x + e) - net(x - e))[:, 0] / (2 * h)
        np.testing.assert_allclose(dx[:, j], fd, rtol=1e-5, atol=1e-8)


def test_non_finite_loss_raises():
    net = MLP.init(small_config(), 0)
    with pytest.raises(NumericError) as exc:
        gradient(net, np.zeros((2, 2)), lambda y: (float("nan"), y))
    assert exc.value.term


# -- Adam -------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.5])}
    opt = Adam()
    opt.step(p, {"w": np.zeros(1)})
    assert p["w"][0] == 1.5 and opt.t == 1


def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([0.0])}
    Adam(lr=0.001).step(p, {"w": np.array([2.0])})
    assert p["w"][0] == pytest.approx(-0.001, rel=1e-6)


def test_adam_two_steps_hand_rolled():
    # oracle: the textbook recursion written out independently
    b1, b2, lr, eps = 0.9, 0.999, 0.001, 1e-8
    m = v = x = 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    p = {"w": np.array([0.0])}
    opt = Adam()
    for _ in range(2):
        opt.step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(x, rel=1e-12)
    assert x == pytest.approx(-0.002, rel=1e-4)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=5))
def test_adam_zero_lr_is_noop(g):
    p = {"w": np.arange(len(g), dtype=np.float64)}
    before = p["w"].copy()
    opt = Adam(lr=0.0)
    opt.step(p, {"w": np.array(g)})
    np.testing.assert_array_equal(p["w"], before)
    assert np.all(opt.v["w"] >= 0)


def test_adam_rejects_non_finite():
    with pytest.raises(NumericError):
        Adam().step({"w": np.zeros(1)}, {"w": np.array([np.inf])})


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    net = MLP.init(small_config(channels=5), 4)
    save_checkpoint(net, tmp_path / "a.ckpt", {"note": "x"})
    back, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"note": "x"} and back.config == net.config
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k])
    save_checkpoint(back, tmp_path / "b.ckpt", {"note": "x"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
