"""
Tests for the flat-parameter feedforward networks.
"""
import numpy as np
import pytest

from pno_game.exceptions import DimensionMismatchError, InvalidShapeError, NonFiniteGradientError
from pno_game.models.autodiff_net import (
    SLOPE_FLOOR,
    ActivationKind,
    NetworkShape,
    OptimizerState,
    ParameterSet,
    forward,
    init_network,
    input_gradient,
    optimizer_step,
    parameter_gradient,
)


def _central_jacobian(params, x, h=1e-6):
    cols = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h
        cols.append((forward(params, x + step) - forward(params, x - step)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_parameter_count():
    shape = NetworkShape(3, (4, 5), 2)
    assert shape.parameter_count() == 3 * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2
    assert shape.parameter_count(adaptive=True) == shape.parameter_count() + 2


def test_init_is_deterministic_in_seed():
    shape = NetworkShape(3, (6,), 2)
    a = init_network(shape, ActivationKind(), 11)
    b = init_network(shape, ActivationKind(), 11)
    c = init_network(shape, ActivationKind(), 12)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_init_biases_zero_and_slopes_one():
    params = init_network(NetworkShape(2, (3, 3), 1), ActivationKind("tanh", adaptive=True), 0)
    for weight, bias, slope in params.unflatten()[:-1]:
        assert np.all(bias == 0.0)
        assert slope == 1.0
    assert params.slope_mask().sum() == 2


def test_blocks_rebuild_same_vector():
    params = init_network(NetworkShape(4, (5,), 3), ActivationKind("sine"), 2)
    rebuilt = ParameterSet.from_blocks(params.unflatten(), params.shape, params.activation)
    assert np.array_equal(rebuilt.values, params.values)


def test_batch_matches_single_inputs():
    params = init_network(NetworkShape(3, (7, 7), 2), ActivationKind(), 4)
    x = np.random.default_rng(0).uniform(-1, 1, size=(5, 3))
    batch = forward(params, x)
    for row, out in zip(x, batch):
        assert np.allclose(forward(params, row), out, atol=1e-14)


@pytest.mark.parametrize("activation", [
    ActivationKind("tanh"),
    ActivationKind("sine"),
    ActivationKind("tanh", adaptive=True),
])
def test_input_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(1)
    params = init_network(NetworkShape(4, (6, 6), 3), activation, 9)
    x = rng.uniform(-1, 1, size=4)
    jac = input_gradient(params, x)
    fd = _central_jacobian(params, x)
    assert jac.shape == (3, 4)
    assert np.linalg.norm(jac - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-8)


def test_parameter_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    params = init_network(NetworkShape(3, (5,), 2), ActivationKind("tanh", adaptive=True), 3)
    x = rng.uniform(-1, 1, size=3)
    adjoint = np.array([0.7, -1.3])
    grad = parameter_gradient(params, x, adjoint)
    h = 1e-6
    for p in range(len(params)):
        plus, minus = params.values.copy(), params.values.copy()
        plus[p] += h
        minus[p] -= h
        fd = (adjoint @ forward(params.with_values(plus), x) - adjoint @ forward(params.with_values(minus), x)) / (2 * h)
        assert abs(grad[p] - fd) <= 1e-6 * max(abs(fd), 1.0)


def test_relu_gradient_is_zero_on_dead_units():
    params = init_network(NetworkShape(1, (2,), 1), ActivationKind("relu"), 0)
    values = params.values.copy()
    # both hidden units get weight 1 and bias -10, so they are off for x in [-1, 1]
    values[0:2] = 1.0
    values[2:4] = -10.0
    dead = params.with_values(values)
    assert np.all(input_gradient(dead, np.array([0.5])) == 0.0)


def test_wrong_input_dimension():
    params = init_network(NetworkShape(3, (4,), 1), ActivationKind(), 0)
    with pytest.raises(DimensionMismatchError):
        forward(params, np.zeros(2))


def test_zero_width_is_rejected():
    with pytest.raises(InvalidShapeError):
        init_network(NetworkShape(3, (0,), 1), ActivationKind(), 0)


def test_parameter_vector_length_is_checked():
    with pytest.raises(DimensionMismatchError):
        ParameterSet(np.zeros(3), NetworkShape(3, (4,), 1))


def test_adam_step_moves_against_gradient():
    params = np.array([1.0, -2.0])
    grads = np.array([0.5, -0.5])
    new, state = optimizer_step(params, grads, OptimizerState.zeros(2, learning_rate=0.1))
    assert state.step_count == 1
    # first bias-corrected Adam step has magnitude lr
    assert np.allclose(new, [0.9, -1.9], atol=1e-6)


def test_adam_floors_adaptive_slopes():
    params = init_network(NetworkShape(1, (2,), 1), ActivationKind("tanh", adaptive=True), 0)
    grads = np.where(params.slope_mask(), 1e3, 0.0)
    new, _ = optimizer_step(params, grads, OptimizerState.zeros(len(params), learning_rate=10.0))
    assert np.all(new.values[params.slope_mask()] >= SLOPE_FLOOR)


def test_adam_rejects_non_finite_gradients():
    with pytest.raises(NonFiniteGradientError):
        optimizer_step(np.zeros(2), np.array([np.nan, 0.0]), OptimizerState.zeros(2))
