import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from causalsim import nn
from oracles import gradient_check


@pytest.mark.parametrize("kind", ["mse", "l1", "huber", "ce"])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(3)
    net = nn.DenseNet([4, 6, 5, 3], seed=1)
    x = rng.normal(size=(7, 4))
    target = rng.integers(3, size=7) if kind == "ce" else rng.normal(size=(7, 3))
    assert gradient_check(net, x, kind, target, delta=0.5) < 1e-5


def test_softmax_output_gradient():
    rng = np.random.default_rng(0)
    net = nn.DenseNet([3, 4, 3], output_activation="softmax", seed=2)
    x = rng.normal(size=(5, 3))
    assert gradient_check(net, x, "mse", rng.random((5, 3))) < 1e-5


def test_shape_errors():
    net = nn.DenseNet([2, 3, 1])
    with pytest.raises(ValueError):
        net.forward(np.zeros((4, 3)))
    with pytest.raises(ValueError):
        nn.DenseNet([2])
    with pytest.raises(ValueError):
        nn.loss("ce", np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        nn.loss("hinge", np.zeros((2, 1)), np.zeros((2, 1)))


def test_huber_matches_definition():
    pred = np.array([[0.0], [0.3], [2.0]])
    target = np.zeros((3, 1))
    value, _ = nn.loss("huber", pred, target, delta=1.0)
    expected = np.mean([0.0, 0.5 * 0.09, 1.0 * (2.0 - 0.5)])
    assert value == pytest.approx(expected)


def test_ce_is_log_loss():
    logits = np.log(np.array([[0.2, 0.8], [0.5, 0.5]]))
    value, _ = nn.loss("ce", logits, np.array([1, 0]))
    assert value == pytest.approx(-(np.log(0.8) + np.log(0.5)) / 2)


def test_adam_fits_linear_map():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(256, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3
    net = nn.DenseNet([3, 1], seed=0)
    opt = nn.Adam(lr=0.05)
    for _ in range(500):
        out, cache = net.forward(x, keep_cache=True)
        _, g = nn.loss("mse", out, y)
        grads, _ = net.backward(cache, g)
        opt.step(net.params, grads)
    assert nn.loss("mse", net(x), y)[0] < 1e-4


def test_roundtrip_is_exact():
    net = nn.DenseNet([3, 5, 2], seed=9)
    back = nn.DenseNet.from_dict(net.to_dict())
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(net(x), back(x))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10**6))
def test_softmax_rows_sum_to_one(n, k, seed):
    z = np.random.default_rng(seed).normal(scale=30, size=(n, k))
    p = nn.softmax(z)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(np.exp(nn.log_softmax(z)), p)
