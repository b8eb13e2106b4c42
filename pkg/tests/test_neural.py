import numpy as np
import pytest

from pdlab.neural import Adam, Mlp, huber, load_checkpoint, masked_softmax, mse, save_checkpoint, soft_update


def numeric_param_grads(net, x, g_out, mask=None, h=1e-5):
    """Central differences of sum(g_out * net(x)) for every parameter entry."""
    out = []
    for p in net.params():
        gp = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = np.sum(g_out * net(x, mask))
            p[idx] = old - h
            down = np.sum(g_out * net(x, mask))
            p[idx] = old
            gp[idx] = (up - down) / (2 * h)
        out.append(gp)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b)))


def test_zero_network_outputs_zero():
    net = Mlp([3, 4, 2])
    for p in net.params():
        p[...] = 0.0
    assert np.all(net(np.ones(3)) == 0.0)


def test_single_layer_is_affine(rng):
    net = Mlp([4, 3], rng=rng)
    x = rng.normal(size=4)
    W, b = net.weights[0], net.biases[0]
    ref = np.array([sum(x[i] * W[i, j] for i in range(4)) + b[j] for j in range(3)])
    assert np.allclose(net(x), ref, atol=1e-14)


def test_tanh_head_range(rng):
    net = Mlp([5, 8, 3], "tanh", rng)
    y = net(rng.normal(size=(100, 5)) * 50)
    assert np.all(np.abs(y) <= 1.0)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        Mlp([3, 2])(np.ones(4))


@pytest.mark.parametrize("output", ["identity", "tanh", "softmax"])
def test_backward_matches_finite_differences(output, rng):
    net = Mlp([5, 7, 6, 4], output, rng)
    x = rng.normal(size=(3, 5))
    mask = np.array([True, False, True, True]) if output == "softmax" else None
    g_out = rng.normal(size=(3, 4))
    _, cache = net.forward(x, mask)
    grads, g_in = net.backward(cache, g_out)
    for a, n in zip(grads, numeric_param_grads(net, x, g_out, mask)):
        assert rel_err(a, n) < 1e-4
    h = 1e-5
    num_in = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num_in[idx] = (np.sum(g_out * net(xp, mask)) - np.sum(g_out * net(xm, mask))) / (2 * h)
    assert rel_err(g_in, num_in) < 1e-4


def test_zero_output_gradient_gives_zero_grads(rng):
    net = Mlp([3, 5, 2], rng=rng)
    _, cache = net.forward(rng.normal(size=(4, 3)))
    grads, g_in = net.backward(cache, np.zeros((4, 2)))
    assert all(np.all(g == 0) for g in grads) and np.all(g_in == 0)


def test_linear_input_gradient(rng):
    net = Mlp([4, 3], rng=rng)
    g = rng.normal(size=3)
    _, cache = net.forward(rng.normal(size=4))
    _, g_in = net.backward(cache, g)
    assert np.allclose(g_in, net.weights[0] @ g)


def test_masked_softmax():
    w = masked_softmax(np.array([1.0, 2.0, 3.0]), np.array([True, False, True]))
    assert w[1] == 0.0
    assert w.sum() == pytest.approx(1.0)
    assert np.all(masked_softmax(np.zeros(3), np.zeros(3, dtype=bool)) == 0.0)


# --- losses --------------------------------------------------------------------------


def test_huber_values():
    assert huber(np.array([0.5]), np.array([0.0]))[0] == pytest.approx(0.125)
    assert huber(np.array([3.0]), np.array([0.0]))[0] == pytest.approx(2.5)


def test_huber_gradient_continuous_at_knee():
    below = huber(np.array([1.0 - 1e-9]), np.zeros(1))[1][0]
    above = huber(np.array([1.0 + 1e-9]), np.zeros(1))[1][0]
    assert below == pytest.approx(above, abs=1e-8)


def test_mse_values():
    assert mse(np.ones(3), np.ones(3))[0] == 0.0
    loss, g = mse(np.full(4, 2.0), np.zeros(4))
    assert loss == 4.0
    assert np.allclose(g, 2 * 2.0 / 4)


# --- optimiser and target updates --------------------------------------------------------------


def test_adam_zero_grad_leaves_params():
    p = [np.array([1.0, -2.0])]
    opt = Adam(0.1)
    opt.step(p, [np.zeros(2)])
    assert np.array_equal(p[0], [1.0, -2.0])
    assert opt.t == 1


def test_adam_constant_gradient_step_is_lr():
    # bias-corrected moments of a constant gradient are g and g^2, so each step is lr * g / (|g| + eps)
    p = [np.array([0.0, 0.0])]
    opt = Adam(0.01)
    g = np.array([3.0, -0.5])
    for _ in range(200):
        before = p[0].copy()
        opt.step(p, [g])
    step = p[0] - before
    assert np.allclose(step, -0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)


def test_adam_zero_lr_is_identity(rng):
    p = [rng.normal(size=(3, 2))]
    ref = p[0].copy()
    Adam(0.0).step(p, [rng.normal(size=(3, 2))])
    assert np.array_equal(p[0], ref)


def test_soft_update_extremes_and_geometric_gap(rng):
    online = Mlp([3, 4, 2], rng=rng)
    target = Mlp([3, 4, 2], rng=np.random.default_rng(99))
    ref = [p.copy() for p in target.params()]
    soft_update(target, online, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(target.params(), ref))
    gap0 = sum(np.sum((t - o) ** 2) for t, o in zip(target.params(), online.params())) ** 0.5
    for s in range(1, 6):
        soft_update(target, online, 0.1)
        gap = sum(np.sum((t - o) ** 2) for t, o in zip(target.params(), online.params())) ** 0.5
        assert gap == pytest.approx(gap0 * 0.9**s, rel=1e-10)
    soft_update(target, online, 1.0)
    assert all(np.array_equal(a, b) for a, b in zip(target.params(), online.params()))


def test_seeded_training_is_deterministic():
    def run():
        r = np.random.default_rng(5)
        net = Mlp([3, 8, 1], rng=np.random.default_rng(1))
        opt = Adam(1e-2)
        for _ in range(20):
            x = r.normal(size=(16, 3))
            y, cache = net.forward(x)
            _, g = mse(y[:, 0], x.sum(1))
            grads, _ = net.backward(cache, g[:, None])
            opt.step(net.params(), grads)
        return net.params()

    assert all(np.array_equal(a, b) for a, b in zip(run(), run()))


def test_checkpoint_round_trip(tmp_path, rng):
    nets = {"a": Mlp([3, 4, 2], "tanh", rng), "b": Mlp([2, 1], rng=rng)}
    save_checkpoint(tmp_path / "c.npz", nets, {"step": 7})
    back, extra = load_checkpoint(tmp_path / "c.npz")
    assert int(extra["step"]) == 7
    for name in nets:
        assert back[name].output == nets[name].output
        assert all(np.array_equal(x, y) for x, y in zip(back[name].params(), nets[name].params()))


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2), __header__=np.array('{"format": "other", "version": 1}'))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.npz")
