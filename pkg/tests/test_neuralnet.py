import numpy as np
import pytest
from fdcheck import max_relative_error, relu_masks

from corealloc.neuralnet import (Adam, Dense, ShapeError, Stack, clip_grad_norm, forward_shared,
                                 global_norm, load_checkpoint, polyak_update, save_checkpoint)


def fd_check(net: Stack, x: np.ndarray, rng, n_probe=60):
    w = rng.normal(size=(x.shape[0], net.out_features))
    _, cache = net.forward(x)
    grads, _ = net.backward(cache, w)
    return max_relative_error(lambda: float(np.sum(w * net(x))), net.params(), grads,
                              lambda: relu_masks(net.forward(x)[1]), rng, n_probe)


def test_input_gradient_matches_differences():
    rng = np.random.default_rng(11)
    net = Stack.build([6, 12, 12, 3], rng, relu_last=False)
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 3))
    _, cache = net.forward(x)
    _, dx = net.backward(cache, w)
    err = max_relative_error(lambda: float(np.sum(w * net(x))), [x], [dx],
                             lambda: relu_masks(net.forward(x)[1]), rng, 30)
    assert err <= 1e-3


@pytest.mark.parametrize("rows", [1, 3, 8])
def test_finite_differences_policy_like_stack(rows):
    rng = np.random.default_rng(rows)
    net = Stack.build([20] + [16] * 7 + [2], rng, relu_last=False)
    x = rng.normal(size=(rows, 20))
    assert fd_check(net, x, rng) <= 1e-3


def test_finite_differences_five_output_stack():
    rng = np.random.default_rng(9)
    net = Stack.build([12, 10, 10, 10, 10, 10, 5], rng, relu_last=False)
    assert fd_check(net, rng.normal(size=(5, 12)), rng) <= 1e-3


def test_forward_examples():
    rng = np.random.default_rng(0)
    ident = Stack([Dense(np.eye(4), np.zeros(4), relu=False)])
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(forward_shared(ident, x), x)
    net = Stack.build([4, 8, 8, 3], rng)
    dup = np.vstack([x[:1], x[:1]])
    y = net(dup)
    np.testing.assert_array_equal(y[0], y[1])
    perm = [2, 0, 1]
    np.testing.assert_allclose(net(x[perm]), net(x)[perm], rtol=0, atol=1e-14)
    with pytest.raises(ShapeError):
        net(np.zeros((2, 5)))


def test_row_locality():
    rng = np.random.default_rng(1)
    net = Stack.build([6, 16, 16, 2], rng, relu_last=False)
    x = rng.normal(size=(5, 6))
    y = net(x)
    x2 = x.copy()
    x2[3] = 0.0
    y2 = net(x2)
    changed = np.any(y != y2, axis=1)
    assert not changed[[0, 1, 2, 4]].any()


def test_backward_examples():
    rng = np.random.default_rng(2)
    net = Stack.build([4, 8, 2], rng, relu_last=False)
    x = rng.normal(size=(3, 4))
    _, cache = net.forward(x)
    grads, dx = net.backward(cache, np.zeros((3, 2)))
    assert all(not g.any() for g in grads) and not dx.any()

    lin = Stack([Dense(rng.normal(size=(2, 4)), np.zeros(2), relu=False)])
    _, cache = lin.forward(x)
    grads, _ = lin.backward(cache, np.ones((3, 2)))
    np.testing.assert_allclose(grads[0], np.tile(x.sum(0), (2, 1)))
    np.testing.assert_allclose(grads[1], [3.0, 3.0])
    with pytest.raises(ShapeError):
        lin.backward(cache, np.ones((2, 2)))


def test_clip_examples():
    g = [np.array([48.0, 64.0])]  # norm 80
    out, norm = clip_grad_norm(g, 40)
    assert norm == 80
    np.testing.assert_allclose(out[0], [24, 32])
    assert global_norm(out) == pytest.approx(40)
    small = [np.array([6.0, 8.0])]
    assert clip_grad_norm(small, 40)[0][0] is small[0]
    zeros = [np.zeros(3)]
    assert not clip_grad_norm(zeros, 40)[0][0].any()
    with pytest.raises(ValueError):
        clip_grad_norm(g, 0)


def test_clip_never_exceeds_max():
    rng = np.random.default_rng(3)
    for _ in range(200):
        gs = [rng.normal(size=s) * rng.uniform(0, 200) for s in [(3, 4), (4,), (7,)]]
        out, _ = clip_grad_norm(gs, 40.0)
        assert global_norm(out) <= 40 + 1e-9


def test_adam_examples():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, lr=0.01)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    opt = Adam(p, lr=0.01)
    opt.step([np.array([3.0, -0.5])])
    np.testing.assert_allclose(p[0], [0.99, -1.99], atol=1e-6)


def test_adam_quadratic():
    x = [np.array([5.0])]
    opt = Adam(x, lr=0.05)
    for _ in range(1000):
        opt.step([2 * (x[0] - 1.5)])
    assert abs(x[0][0] - 1.5) < 1e-2


def test_polyak_examples():
    t, o = [np.zeros(3)], [np.ones(3)]
    polyak_update(t, o, 1.0)
    np.testing.assert_array_equal(t[0], 0)
    polyak_update(t, o, 0.995)
    np.testing.assert_allclose(t[0], 0.005)
    polyak_update(t, o, 0.0)
    np.testing.assert_array_equal(t[0], 1)
    with pytest.raises(ShapeError):
        polyak_update([np.zeros(2)], [np.zeros(3)], 0.5)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    net = Stack.build([5, 7, 3], rng)
    opt = Adam(net.params(), lr=1e-3)
    opt.step([rng.normal(size=p.shape) for p in net.params()])
    arrays = {**net.state("pi"), **opt.state("pi_opt")}
    save_checkpoint(tmp_path / "c.npz", arrays, {"spec": net.spec(), "eta": 0.3})
    back, meta = load_checkpoint(tmp_path / "c.npz")
    net2 = Stack.from_state(back, "pi", meta["spec"])
    opt2 = Adam(net2.params(), lr=1e-3)
    opt2.load_state(back, "pi_opt")
    for a, b in zip(net.params(), net2.params()):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(opt.m + opt.v, opt2.m + opt2.v):
        assert a.tobytes() == b.tobytes()
    assert opt2.t == 1 and meta["eta"] == 0.3


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.npz")
