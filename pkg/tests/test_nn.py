import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decil.exceptions import InvalidArchitectureError, ShapeError
from decil.nn import AdamState, NetParams, adam_step, backward, forward, init_net, mse_loss


def _net(Ws, bs, activation="tanh"):
    Ws = [np.asarray(W, dtype=float) for W in Ws]
    dims = [Ws[0].shape[1]] + [W.shape[0] for W in Ws]
    return NetParams(dims, Ws, [np.asarray(b, dtype=float) for b in bs], activation)


def _fd_param_grads(net, x, g, step=1e-5):
    """Central differences of <g, forward(net, x)> over every parameter."""
    out = []
    for arr in net.arrays():
        grad = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = g @ forward(net, x)
            arr[idx] = orig - step
            fm = g @ forward(net, x)
            arr[idx] = orig
            grad[idx] = (fp - fm) / (2 * step)
        out.append(grad)
    return out


def _assert_close_rel(analytic, numeric, rtol=1e-4, atol=1e-8):
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        assert np.all(err <= rtol * scale + atol), np.max(err / (scale + atol))


def test_init_biases_zero_and_deterministic():
    net = init_net([2, 2], "tanh", seed=3)
    assert np.array_equal(net.biases[0], [0.0, 0.0])
    again = init_net([2, 2], "tanh", seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(net.arrays(), again.arrays()))


def test_init_first_layer_std_matches_fan_in():
    net = init_net([3, 64, 64, 2], "tanh", seed=7)
    w = net.weights[0]
    assert w.size == 192
    assert abs(w.std() - 1 / math.sqrt(3)) < 0.2 / math.sqrt(3)


@pytest.mark.parametrize("dims", [[3], [], [2, 0, 1], [2, -1]])
def test_init_rejects_bad_architecture(dims):
    with pytest.raises(InvalidArchitectureError):
        init_net(dims)


def test_forward_zero_net():
    net = _net([np.zeros((3, 2))], [np.zeros(3)])
    assert np.array_equal(forward(net, [1.0, 2.0]), np.zeros(3))


def test_forward_identity_layer():
    net = _net([np.eye(2)], [np.zeros(2)])
    assert np.array_equal(forward(net, [0.5, -0.5]), [0.5, -0.5])


def test_forward_two_layer_tanh_by_hand():
    net = _net([[[1.0, 2.0], [0.5, -1.0]], [[1.0, -1.0]]], [[0.1, -0.2], [0.3]])
    h0 = math.tanh(1.0 * 1 + 2.0 * 0 + 0.1)
    h1 = math.tanh(0.5 * 1 - 1.0 * 0 - 0.2)
    expected = h0 - h1 + 0.3
    assert forward(net, [1.0, 0.0])[0] == pytest.approx(expected, abs=1e-15)


def test_forward_shape_error():
    net = init_net([3, 4, 2])
    with pytest.raises(ShapeError):
        forward(net, [1.0, 2.0])


def test_forward_batch_matches_rows():
    net = init_net([3, 8, 2], seed=1)
    X = np.random.default_rng(0).normal(size=(5, 3))
    batch = forward(net, X)
    for i in range(5):
        np.testing.assert_allclose(batch[i], forward(net, X[i]), rtol=0, atol=1e-14)


def test_backward_zero_output_grad():
    net = init_net([3, 5, 2], seed=0)
    grads, gin = backward(net, [0.1, 0.2, 0.3], np.zeros(2))
    assert all(np.all(a == 0) for a in grads.arrays())
    assert np.all(gin == 0)


def test_backward_linear_closed_form():
    W = np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]])
    net = _net([W], [np.zeros(2)])
    x = np.array([0.3, -0.7, 1.1])
    g = np.array([2.0, -1.5])
    grads, gin = backward(net, x, g)
    np.testing.assert_allclose(grads.weights[0], np.outer(g, x), atol=1e-15)
    np.testing.assert_allclose(grads.biases[0], g, atol=1e-15)
    np.testing.assert_allclose(gin, W.T @ g, atol=1e-15)


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_backward_matches_finite_differences(activation):
    rng = np.random.default_rng(11)
    net = init_net([4, 16, 16, 3], activation, seed=5)
    if activation == "relu":
        # keep pre-activations away from the kink
        for b in net.biases[:-1]:
            b += 0.5
    x = rng.normal(size=4)
    g = rng.normal(size=3)
    grads, gin = backward(net, x, g)
    _assert_close_rel(grads.arrays(), _fd_param_grads(net, x, g))
    fd_in = np.array([(g @ forward(net, x + e) - g @ forward(net, x - e)) / 2e-5
                      for e in 1e-5 * np.eye(4)])
    _assert_close_rel([gin], [fd_in])


@settings(max_examples=15, deadline=None)
@given(
    hidden=st.lists(st.integers(1, 12), min_size=0, max_size=2),
    n_in=st.integers(1, 4),
    n_out=st.integers(1, 3),
    seed=st.integers(0, 2**16),
)
def test_gradient_exactness_property(hidden, n_in, n_out, seed):
    net = init_net([n_in, *hidden, n_out], "tanh", seed=seed)
    rng = np.random.default_rng(seed)
    x, g = rng.normal(size=n_in), rng.normal(size=n_out)
    grads, _ = backward(net, x, g)
    _assert_close_rel(grads.arrays(), _fd_param_grads(net, x, g))


def test_backward_homogeneous_in_output_grad():
    net = init_net([3, 6, 6, 2], seed=2)
    x = np.array([0.2, -0.4, 0.9])
    g = np.array([0.7, -1.3])
    g1, i1 = backward(net, x, g)
    g2, i2 = backward(net, x, 2 * g)
    assert all(np.array_equal(2 * a, b) for a, b in zip(g1.arrays(), g2.arrays()))
    assert np.array_equal(2 * i1, i2)


def test_backward_shape_error():
    net = init_net([3, 2])
    with pytest.raises(ShapeError):
        backward(net, [1.0, 2.0, 3.0], [1.0, 2.0, 3.0])


def test_adam_zero_gradient_fixed_point():
    net = init_net([2, 3, 1], seed=0)
    state = AdamState.fresh(net)
    new, st1 = adam_step(net, net.zeros_like(), state)
    assert st1.step_count == 1
    assert all(np.array_equal(a, b) for a, b in zip(net.arrays(), new.arrays()))


def _scalar_net(w):
    return _net([[[w]]], [[0.0]])


def test_adam_first_step_by_hand():
    net = _scalar_net(1.0)
    grad = _net([[[1.0]]], [[0.0]])
    new, _ = adam_step(net, grad, AdamState.fresh(net, learning_rate=0.1))
    # m_hat = v_hat = 1 after bias correction
    assert new.weights[0][0, 0] == pytest.approx(1 - 0.1 * (1 / (1 + 1e-8)), abs=1e-15)
    assert new.weights[0][0, 0] == pytest.approx(0.9, abs=1e-8)


def test_adam_two_steps_match_recursion():
    net = _scalar_net(1.0)
    grad = _net([[[1.0]]], [[0.0]])
    state = AdamState.fresh(net, learning_rate=0.1)
    p1, s1 = adam_step(net, grad, state)
    p2, s2 = adam_step(p1, grad, s1)
    assert s2.step_count == 2
    m2 = 0.9 * 0.1 + 0.1
    v2 = 0.999 * 0.001 + 0.001
    assert s2.first_moment.weights[0][0, 0] == pytest.approx(m2, abs=1e-15)
    assert s2.second_moment.weights[0][0, 0] == pytest.approx(v2, abs=1e-15)
    expected = p1.weights[0][0, 0] - 0.1 * (m2 / (1 - 0.9**2)) / (math.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    assert p2.weights[0][0, 0] == pytest.approx(expected, abs=1e-15)


def test_adam_shape_mismatch():
    net = init_net([2, 3, 1])
    other = init_net([2, 4, 1])
    with pytest.raises(ShapeError):
        adam_step(net, other, AdamState.fresh(net))


def test_adam_state_validation():
    net = init_net([1, 1])
    with pytest.raises(ValueError):
        AdamState.fresh(net, beta1=1.0)
    with pytest.raises(ValueError):
        AdamState.fresh(net, learning_rate=0.0)


def test_adam_trajectory_deterministic():
    def run():
        rng = np.random.default_rng(0)
        net = init_net([2, 8, 1], seed=4)
        state = AdamState.fresh(net)
        for _ in range(100):
            x = rng.normal(size=2)
            pred = forward(net, x)
            _, gpred = mse_loss(pred, [x[0] * x[1]])
            grads, _ = backward(net, x, gpred)
            net, state = adam_step(net, grads, state)
        return net

    a, b = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(a.arrays(), b.arrays()))


@pytest.mark.parametrize("pred,target,loss,grad", [
    ([1, 2, 3], [1, 2, 3], 0.0, [0, 0, 0]),
    ([1, 0], [0, 0], 1.0, [2, 0]),
    ([0.3, -0.4], [0, 0], 0.25, [0.6, -0.8]),
])
def test_mse_loss_examples(pred, target, loss, grad):
    val, g = mse_loss(pred, target)
    assert val == pytest.approx(loss, abs=1e-15)
    np.testing.assert_allclose(g, grad, atol=1e-15)


def test_mse_loss_shape_error():
    with pytest.raises(ShapeError):
        mse_loss([1.0, 2.0], [1.0])


def test_json_round_trip_is_lossless():
    net = init_net([3, 7, 2], "relu", seed=9)
    back = NetParams.from_json(net.to_json())
    assert back.layer_dims == net.layer_dims and back.activation == "relu"
    assert all(np.array_equal(a, b) for a, b in zip(net.arrays(), back.arrays()))
    d = net.to_dict()
    assert set(d) == {"layer_dims", "activation", "weights", "biases"}
    assert len(d["weights"][0]) == 7 and len(d["weights"][0][0]) == 3
