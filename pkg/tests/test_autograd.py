import math

import numpy as np
import pytest

from straightwm import autograd as ag
from straightwm.errors import ContractError, DegenerateVelocity, DimensionError, NonFiniteError

from oracles import central_diff, random_composite, rel_err


def test_cosine_hand_values():
    assert ag.cosine([1.0, 0.0], [0.0, 1.0]).value == 0.0
    assert ag.cosine([2.0, 2.0], [3.0, 3.0]).value == pytest.approx(1.0, abs=1e-15)
    assert ag.cosine([1.0, 1.0], [1.0, 0.0]).value == pytest.approx(0.7071067811865476, abs=1e-9)


def test_cosine_zero_norm_raises():
    with pytest.raises(DegenerateVelocity):
        ag.cosine([0.0, 0.0], [1.0, 0.0])


def test_square_gradient_at_three():
    (g,) = ag.grad(lambda x: ag.sum_(ag.mul(x, x)), np.array(3.0))
    assert g == 6.0


def test_stop_gradient_target():
    (g,) = ag.grad(lambda x: ag.mse(ag.scale(x, 2.0), ag.stop_gradient(x)), np.array([1.0]))
    assert g[0] == pytest.approx(4.0)
    (g,) = ag.grad(lambda x: ag.mse(x, ag.stop_gradient(x)), np.array([0.3, -2.0]))
    assert np.all(g == 0)


def test_stop_gradient_blocks_only_path():
    w = ag.parameter(np.ones(3))
    other = ag.parameter(np.ones(3))
    loss = ag.sum_(ag.mul(ag.stop_gradient(ag.tanh(w)), other))
    grads = ag.backward(loss)
    assert w not in grads and w.grad is None
    assert np.allclose(other.grad, np.tanh(1.0))


def test_non_scalar_root_rejected():
    with pytest.raises(ContractError):
        ag.backward(ag.parameter(np.ones(2)))


def test_shape_mismatch_rejected():
    with pytest.raises(DimensionError):
        ag.add(ag.parameter(np.ones((2, 3))), np.ones((3, 2)))
    with pytest.raises(DimensionError):
        ag.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_value_rejected():
    with pytest.raises(NonFiniteError):
        ag.constant([np.nan])


def test_bias_broadcast_gradient():
    (gx, gb) = ag.grad(lambda x, b: ag.sum_(ag.square(x + b)), np.ones((4, 3)), np.arange(3.0))
    assert np.allclose(gb, 2 * (1 + np.arange(3.0)) * 4)
    assert gx.shape == (4, 3)


# finite-difference oracle over random composites -----------------------------

@pytest.mark.parametrize("seed", range(100))
def test_random_composite_matches_finite_differences(seed):
    f, inputs = random_composite(seed)
    analytic = ag.grad(f, *inputs)
    for k, x in enumerate(inputs):

        def scalar(v, k=k):
            args = [ag.constant(a) for a in inputs]
            args[k] = ag.constant(v)
            return float(f(*args).value)

        numeric = central_diff(scalar, x)
        assert rel_err(analytic[k], numeric) < 1e-4, (seed, k)


def test_forward_and_backward_deterministic():
    f, inputs = random_composite(7)
    a = ag.grad(f, *inputs)
    b = ag.grad(f, *inputs)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


# Adam ----------------------------------------------------------------------


def test_adam_first_step_constant_grad():
    p = np.array([0.5])
    state = ag.AdamState(lr=0.01)
    ag.adam_step([p], [np.array([1.0])], state)
    # bias-corrected m/sqrt(v) = 1 on step one, so the move is lr / (1 + eps)
    assert p[0] == pytest.approx(0.5 - 0.01 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_grad_keeps_params_and_decays_moments():
    p = np.array([1.0, -2.0])
    state = ag.AdamState(lr=0.1)
    ag.adam_step([p], [np.array([1.0, 1.0])], state)
    before, m_before = p.copy(), state.m[0].copy()
    ag.adam_step([p], [np.zeros(2)], state)
    assert np.allclose(state.m[0], 0.9 * m_before)
    # the first-moment memory still moves p; with a fresh state a zero grad leaves p unchanged
    q = np.array([3.0])
    ag.adam_step([q], [np.zeros(1)], ag.AdamState(lr=0.1))
    assert q[0] == 3.0
    assert not np.array_equal(before, p)


def test_adam_two_steps_on_parabola():
    x = np.array([1.0])
    state = ag.AdamState(lr=0.1)
    prev = abs(x[0])
    for _ in range(2):
        ag.adam_step([x], [2 * x.copy()], state)
        assert abs(x[0]) < prev
        prev = abs(x[0])


def test_adam_groups_use_their_own_rates():
    a, b = ag.parameter(np.ones(1)), ag.parameter(np.ones(1))
    opt = ag.Adam({"slow": ([a], 1e-3), "fast": ([b], 1e-1)})
    ag.backward(ag.sum_(a + b))
    opt.step()
    assert 1 - a.value[0] == pytest.approx(1e-3, rel=1e-6)
    assert 1 - b.value[0] == pytest.approx(1e-1, rel=1e-6)


def test_cosine_gradient_is_orthogonal_to_input():
    rng = np.random.default_rng(3)
    u, v = rng.normal(size=5), rng.normal(size=5)
    gu, _ = ag.grad(lambda a, b: ag.cosine(a, b), u, v)
    # cosine is scale invariant in u, so its gradient has no radial part
    assert abs(gu @ u) < 1e-12 * math.sqrt(u @ u)
