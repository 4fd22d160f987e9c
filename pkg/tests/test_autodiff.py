import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modno.autodiff import (MlpParams, finite_difference_grad, gradient_relative_errors, load_params,
                            matmul, mlp_backward, mlp_forward, mlp_init, mse_loss_and_grad, optimizer_init,
                            optimizer_step, pack_checkpoint, save_params, unpack_checkpoint)
from modno.exceptions import ConfigError, ShapeError


def test_matmul_identity_and_hand_example():
    a = np.random.default_rng(0).standard_normal((3, 3))
    assert np.array_equal(matmul(np.eye(3), a), a)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    ref = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(matmul(a, b) - ref)) < 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_init_deterministic_and_shapes():
    a, b = mlp_init([2, 8, 4], "tanh", 3), mlp_init([2, 8, 4], "tanh", 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert [w.shape for w in a.weights] == [(8, 2), (4, 8)]
    assert all(np.all(bias == 0) for bias in a.biases)


def test_init_glorot_bound_and_mean():
    p = mlp_init([100, 100, 1], "tanh", 0)
    w = p.weights[0]
    assert np.max(np.abs(w)) <= np.sqrt(6.0 / 200)
    assert abs(w.mean()) < 0.01  # 10^4 draws


@pytest.mark.parametrize("sizes", [[], [3], [3, 0, 1], [3, 1]])
def test_init_rejects_bad_sizes(sizes):
    with pytest.raises(ConfigError):
        mlp_init(sizes)


def test_forward_zero_input_and_constant_net():
    p = MlpParams([1, 1, 1], [np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)], "tanh")
    assert mlp_forward(p, [[0.0]])[0, 0] == 0.0
    q = mlp_init([3, 4, 2], "tanh", 0)
    q = MlpParams(q.layer_sizes, [np.zeros_like(w) for w in q.weights], [np.zeros(4), np.array([1.5, -2.0])])
    assert np.array_equal(mlp_forward(q, np.random.default_rng(0).standard_normal((5, 3))),
                          np.tile([1.5, -2.0], (5, 1)))


@pytest.mark.parametrize("act", ["tanh", "relu", "sine"])
def test_forward_matches_scalar_oracle(act):
    rng = np.random.default_rng(2)
    p = mlp_init([3, 5, 2], act, 4)
    p = p.with_flat(p.flat() + 0.1 * rng.standard_normal(p.n_params))
    x = rng.standard_normal((4, 3))
    f = {"tanh": np.tanh, "relu": lambda z: max(z, 0.0), "sine": np.sin}[act]
    ref = np.zeros((4, 2))
    for n in range(4):
        hidden = [f(sum(p.weights[0][j, i] * x[n, i] for i in range(3)) + p.biases[0][j]) for j in range(5)]
        for o in range(2):
            ref[n, o] = sum(p.weights[1][o, j] * hidden[j] for j in range(5)) + p.biases[1][o]
    assert np.max(np.abs(mlp_forward(p, x) - ref)) < 1e-12


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        mlp_forward(mlp_init([3, 4, 1]), np.ones((2, 2)))


def test_backward_zero_cotangent():
    p = mlp_init([3, 4, 2], "tanh", 0)
    g, gx = mlp_backward(p, np.ones((5, 3)), np.zeros((5, 2)))
    assert all(np.all(a == 0) for a in g.arrays()) and np.all(gx == 0)


def test_backward_linear_neuron_closed_form():
    # a hidden unit with zero input weight and bias 1 feeds tanh(1) into the output neuron
    p = MlpParams([2, 1, 1], [np.zeros((1, 2)), np.array([[0.7]])], [np.array([1.0]), np.array([0.2])])
    g, _ = mlp_backward(p, np.array([[0.3, -0.4]]), np.array([[1.0]]))
    assert np.isclose(g.weights[1][0, 0], np.tanh(1.0))  # dy/dw = input to the neuron
    assert g.biases[1][0] == 1.0


def test_backward_shape_error():
    with pytest.raises(ShapeError):
        mlp_backward(mlp_init([3, 4, 2]), np.ones((5, 3)), np.ones((5, 3)))


@pytest.mark.parametrize("act", ["tanh", "sine"])
def test_backward_matches_two_point_fd(act):
    rng = np.random.default_rng(5)
    p = mlp_init([3, 6, 6, 2], act, 1)
    x, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    _, g = mse_loss_and_grad(p, x, y)
    fd = finite_difference_grad(lambda q: mse_loss_and_grad(q, x, y)[0], p, h=1e-5)
    # two-point differences at h=1e-5 carry ~1e-11 absolute error, so compare against the gradient scale
    assert np.max(np.abs(g.flat() - fd.flat())) < 1e-6 * np.max(np.abs(fd.flat()))


def test_backward_input_gradient_matches_fd():
    rng = np.random.default_rng(6)
    p = mlp_init([3, 5, 2], "tanh", 2)
    x, up = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    _, gx = mlp_backward(p, x, up)
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = 1e-6
        fd[idx] = (np.sum(up * mlp_forward(p, x + e)) - np.sum(up * mlp_forward(p, x - e))) / 2e-6
    assert np.max(np.abs(gx - fd)) < 1e-8


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(-5, 5))
def test_backward_linear_in_cotangent(seed, scale):
    rng = np.random.default_rng(seed)
    p = mlp_init([2, 4, 3], "tanh", rng)
    x, up = rng.standard_normal((3, 2)), rng.standard_normal((3, 3))
    g1, x1 = mlp_backward(p, x, scale * up)
    g2, x2 = mlp_backward(p, x, up)
    assert np.allclose(g1.flat(), scale * g2.flat(), rtol=1e-12, atol=1e-14)
    assert np.allclose(x1, scale * x2, rtol=1e-12, atol=1e-14)


def test_fd_constant_and_quadratic():
    p = mlp_init([2, 3, 1], "tanh", 0)
    assert np.all(finite_difference_grad(lambda q: 3.0, p).flat() == 0)
    g = finite_difference_grad(lambda q: 0.5 * np.sum(q.flat() ** 2), p)
    assert np.allclose(g.flat(), p.flat(), atol=1e-9)
    with pytest.raises(ConfigError):
        finite_difference_grad(lambda q: 0.0, p, h=0)


def test_five_point_fd_meets_relative_tolerance():
    rng = np.random.default_rng(9)
    p = mlp_init([4, 16, 16, 3], "tanh", 3)
    x, y = rng.standard_normal((8, 4)), rng.standard_normal((8, 3))
    _, g = mse_loss_and_grad(p, x, y)
    fd = finite_difference_grad(lambda q: mse_loss_and_grad(q, x, y)[0], p, h=1e-3, stencil=4)
    assert gradient_relative_errors(g, fd).max() < 1e-6


def test_tanh_forward_backward_finite_on_large_inputs():
    p = mlp_init([2, 8, 1], "tanh", 0)
    x = np.array([[1e6, -1e6], [1e300, 0.0]])
    out = mlp_forward(p, x)
    g, gx = mlp_backward(p, x, np.ones((2, 1)))
    assert np.all(np.isfinite(out)) and np.all(np.isfinite(g.flat()))


def test_sgd_examples():
    p = MlpParams([1, 1, 1], [np.ones((1, 1)), np.ones((1, 1))], [np.ones(1), np.ones(1)])
    s = optimizer_init(p, "sgd")
    same, _ = optimizer_step(p, p.zeros_like(), s, 0.1)
    assert np.array_equal(same.flat(), p.flat())
    moved, s2 = optimizer_step(p, p.with_flat(np.full(4, 2.0)), s, 0.1)
    assert np.allclose(moved.flat(), 0.8) and s2.step == 1


def test_adam_first_step_magnitude_is_lr():
    p = mlp_init([2, 3, 1], "tanh", 0)
    for scale in (1e-3, 1.0, 1e3):
        new, _ = optimizer_step(p, p.with_flat(np.full(p.n_params, scale)), optimizer_init(p), 0.01)
        assert np.allclose(p.flat() - new.flat(), 0.01, rtol=1e-4)


def test_optimizer_errors_and_purity():
    p = mlp_init([2, 3, 1], "tanh", 0)
    s = optimizer_init(p)
    with pytest.raises(ConfigError):
        optimizer_step(p, p.zeros_like(), s, 0.0)
    with pytest.raises(ShapeError):
        optimizer_step(p, mlp_init([2, 4, 1]).zeros_like(), s, 0.1)
    before = p.flat().copy()
    _, s2 = optimizer_step(p, p.with_flat(np.ones(p.n_params)), s, 0.1)
    assert np.array_equal(p.flat(), before) and s.step == 0 and s2.step == 1


def test_optimizer_trajectory_deterministic():
    def run():
        p, s = mlp_init([2, 3, 1], "sine", 1), None
        s = optimizer_init(p)
        for k in range(5):
            p, s = optimizer_step(p, p.with_flat(np.sin(p.flat() + k)), s, 0.05)
        return p.flat()
    assert np.array_equal(run(), run())


def test_checkpoint_round_trip(tmp_path):
    nets = [mlp_init([3, 4, 2], "tanh", 0), mlp_init([1, 5, 2], "sine", 1)]
    path = tmp_path / "m.ckpt"
    save_params(path, nets, [7, 8], [0.25, -1.5])
    back, header, extras = load_params(path)
    assert header == [7, 8] and list(extras) == [0.25, -1.5]
    for a, b in zip(nets, back):
        assert a.layer_sizes == b.layer_sizes and a.activation == b.activation
        assert np.array_equal(a.flat(), b.flat())
    assert path.read_bytes().startswith(b"MODNOCKPT")


def test_checkpoint_rejects_corruption():
    buf = pack_checkpoint([mlp_init([2, 3, 1])])
    with pytest.raises(ValueError):
        unpack_checkpoint(b"X" + buf[1:])
    with pytest.raises(ValueError):
        unpack_checkpoint(buf + b"\0")
