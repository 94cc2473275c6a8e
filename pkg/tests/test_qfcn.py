import numpy as np
import pytest

from foldcraft.qfcn import (Adam, ContractError, QNetwork, adam_step, backward, conv2d_forward,
                            default_layers, forward, gradient_check, huber_loss,
                            upsample2x_backward, upsample2x_forward)


def rand_input(rng, H, C=6):
    return rng.random((C, H, H)).astype(np.float32)


@pytest.mark.parametrize("H", [16, 64])
def test_output_matches_input_resolution(H, rng):
    out = forward(QNetwork(seed=0), rand_input(rng, H))
    assert out.shape == (1, H, H)


def test_bad_shapes_rejected(rng):
    net = QNetwork(seed=0)
    with pytest.raises(ContractError):
        forward(net, rand_input(rng, 20))
    with pytest.raises(ContractError):
        forward(net, rng.random((5, 16, 16)))
    with pytest.raises(ContractError):
        backward(net, rand_input(rng, 16), 16, 0, 1.0)


def test_zero_input_zero_head_gives_zero_heatmap():
    net = QNetwork(seed=3)
    net.zero_output_layer()
    assert not forward(net, np.zeros((6, 32, 32), np.float32)).any()


def test_forward_deterministic(rng):
    x = rand_input(rng, 32)
    a = forward(QNetwork(seed=7), x)
    b = forward(QNetwork(seed=7), x)
    assert a.tobytes() == b.tobytes()
    assert np.isfinite(a).all()


def test_backward_zero_and_linear(rng):
    net, x = QNetwork(seed=1), rand_input(rng, 16)
    g0 = backward(net, x, 3, 4, 0.0)
    assert all(not g.any() for g in g0)
    g1 = backward(net, x, 3, 4, 0.25)
    g2 = backward(net, x, 3, 4, 0.5)
    for a, b in zip(g1, g2):
        np.testing.assert_array_equal(2 * a, b)


def test_single_pixel_gradient_matches_dot_product(rng):
    # gradient of out[r, c] must equal the gradient of sum(out * onehot)
    net, x = QNetwork(seed=2).astype(np.float64), rand_input(rng, 16).astype(np.float64)
    out, cache = net.forward(np.moveaxis(x, 0, -1)[None], keep=True)
    onehot = np.zeros_like(out)
    onehot[0, 5, 9, 0] = 1.0
    full = net.backward(cache, onehot)
    single = backward(net, x, 5, 9, 1.0)
    for a, b in zip(full, single):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_huber_examples():
    assert huber_loss(0.3, 0.3) == (0.0, 0.0)
    assert huber_loss(1.5, 1.0) == pytest.approx((0.125, 0.5))
    assert huber_loss(4.0, 1.0) == pytest.approx((2.5, 1.0))
    assert huber_loss(-2.0, 1.0) == pytest.approx((2.5, -1.0))


def test_adam_zero_grads_leave_params():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, lr=0.1)
    adam_step(p, [np.zeros(2)], opt, 0.1, step=1)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_zero_grads_decay_moments():
    p = [np.array([1.0])]
    opt = Adam(p, lr=0.1)
    opt.m[0][:], opt.v[0][:] = 1.0, 1.0
    opt.step(p, [np.zeros(1)])
    np.testing.assert_allclose(opt.m[0], 0.9)
    np.testing.assert_allclose(opt.v[0], 0.999)


def test_adam_first_step_magnitude_is_lr():
    p = [np.array([0.5])]
    opt = Adam(p, lr=1e-3)
    adam_step(p, [np.array([1.0])], opt, 1e-3, step=1)
    assert 0.5 - p[0][0] == pytest.approx(1e-3, rel=1e-6)


def test_adam_constant_grads_converge_to_lr():
    p = [np.array([0.0])]
    opt = Adam(p, lr=1e-4)
    prev = 0.0
    for _ in range(1000):
        adam_step(p, [np.array([3.0])], opt, 1e-4)
        step = prev - p[0][0]
        prev = p[0][0]
    assert step == pytest.approx(1e-4, rel=0.01)


def test_adam_rejects_non_finite():
    p = [np.zeros(2)]
    with pytest.raises(FloatingPointError):
        Adam(p).step(p, [np.array([np.nan, 0.0])])
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(2)], Adam(p), 1e-4, step=5)


def test_upsample_exact_on_constants_and_adjoint(rng):
    x = np.full((1, 4, 4, 2), 0.7)
    np.testing.assert_allclose(upsample2x_forward(x), 0.7)
    a = rng.random((1, 5, 3, 2))
    b = rng.random((1, 10, 6, 2))
    lhs = (upsample2x_forward(a) * b).sum()
    rhs = (a * upsample2x_backward(b)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_conv_same_padding_shapes(rng):
    x = rng.random((2, 16, 16, 3))
    w = rng.random((4, 3, 5, 5))
    y, _ = conv2d_forward(x, w, np.zeros(4), 2)
    assert y.shape == (2, 8, 8, 4)
    y1, _ = conv2d_forward(x, w, np.zeros(4), 1)
    assert y1.shape == (2, 16, 16, 4)


def test_conv_matches_direct_sum(rng):
    x = rng.random((1, 6, 6, 2))
    w = rng.random((3, 2, 3, 3))
    b = rng.random(3)
    y, _ = conv2d_forward(x, w, b, 1)
    xp = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
    r, c = 2, 4
    ref = np.einsum("ijc,ocij->o", xp[r:r + 3, c:c + 3], w) + b
    np.testing.assert_allclose(y[0, r, c], ref, rtol=1e-12)


def test_translation_covariance_of_encoder(rng):
    # shifting the input by 8 px shifts the stride-8 feature map by one cell
    enc = QNetwork(default_layers()[:4], seed=4).astype(np.float64)
    x = rng.random((1, 128, 128, 6))
    xs = np.zeros_like(x)
    xs[:, 8:, :] = x[:, :-8, :]
    a, b = enc.forward(x), enc.forward(xs)
    # interior only: the receptive field must stay clear of the borders
    np.testing.assert_allclose(b[0, 7:10, 6:10], a[0, 6:9, 6:10], rtol=1e-10, atol=1e-12)


def test_checkpoint_round_trip(tmp_path, rng):
    net = QNetwork(default_layers(out_ch=3), seed=5)
    net.save(tmp_path / "n.fcqn", 64)
    back, px = QNetwork.from_bytes((tmp_path / "n.fcqn").read_bytes())
    assert px == 64 and back.layers == net.layers
    for a, b in zip(net.params, back.params):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        QNetwork.from_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError):
        QNetwork.from_bytes(net.to_bytes() + b"\0")


def test_gradient_check_passes():
    rep = gradient_check("small", seed=0)
    assert rep.passed, rep.lines()
    assert set(rep.errors) >= {"conv_s1", "conv_s2", "upsample", "huber", "network"}
    assert rep.errors["upsample"] < 1e-6
    assert rep.seconds < 60
