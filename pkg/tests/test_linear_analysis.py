import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from straightwm.errors import ContractError, DimensionError
from straightwm.linear_analysis import (
    LinearSystem,
    _round_robin,
    analyze,
    condition_number,
    cosine_proxy_check,
    effective_condition,
    gramian,
    numerical_rank,
    random_eps_straight,
    rollout_jacobian,
    rotation,
    singular_values,
    spectral_norm,
    sweep_theorem,
    sweep_violations,
    sym_eig,
    write_csv,
)

# hand examples -------------------------------------------------------------------


def test_identity_system():
    sys_ = LinearSystem(np.eye(2), np.eye(2), horizon=3)
    J = rollout_jacobian(sys_)
    assert J.shape == (2, 6)
    np.testing.assert_array_equal(J, np.hstack([np.eye(2)] * 3))
    np.testing.assert_array_equal(gramian(sys_), 3 * np.eye(2))
    rep = analyze(sys_)
    assert rep.kappa_eff == pytest.approx(1.0) and rep.epsilon == 0.0
    assert rep.bound_eps == pytest.approx(1.0) and rep.holds_eps


def test_diagonal_gramian():
    # B = I: W_2 = I + A A^T = diag(1 + 25, 1 + 4)
    sys_ = LinearSystem(np.diag([5.0, 2.0]), np.eye(2), horizon=2)
    np.testing.assert_allclose(gramian(sys_), np.diag([26.0, 5.0]))
    assert analyze(sys_).kappa_eff == pytest.approx(26 / 5)


def test_double_integrator_controllability():
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.0], [1.0]])
    assert analyze(LinearSystem(A, B, 1)).rank == 1
    rep = analyze(LinearSystem(A, B, 2))
    assert rep.rank == 2
    np.testing.assert_allclose(gramian(LinearSystem(A, B, 2)), [[1.0, 1.0], [1.0, 2.0]])
    assert rep.kappa_eff == pytest.approx((3 + math.sqrt(5)) / (3 - math.sqrt(5)), rel=1e-12)
    assert rep.bound_eps is None and rep.notes


def test_effective_condition_ignores_null_space():
    assert effective_condition(np.diag([5.0, 2.0, 0.0])) == pytest.approx(2.5)
    assert numerical_rank(np.diag([5.0, 2.0, 1e-14])) == 2
    with pytest.raises(ContractError):
        effective_condition(np.zeros((2, 2)))
    with pytest.raises(ContractError):
        effective_condition(np.diag([1.0, -1.0]))


def test_singular_values_and_norms():
    M = np.array([[3.0, 0.0], [4.0, 5.0]])
    np.testing.assert_allclose(singular_values(M), np.linalg.svd(M, compute_uv=False), rtol=1e-12)
    assert spectral_norm(M) == pytest.approx(np.linalg.norm(M, 2), rel=1e-13)
    assert condition_number(M) == pytest.approx(np.linalg.cond(M), rel=1e-12)
    assert spectral_norm(np.zeros((3, 2))) == 0.0
    assert math.isinf(condition_number(np.diag([1.0, 0.0])))


def test_system_validation():
    with pytest.raises(DimensionError):
        LinearSystem(np.eye(2), np.eye(3))
    with pytest.raises(ContractError):
        LinearSystem(np.eye(2), np.eye(2), horizon=0)
    with pytest.raises(ContractError):
        LinearSystem(np.eye(2) * np.nan, np.eye(2))


def test_simulate_matches_jacobian():
    rng = np.random.default_rng(0)
    sys_ = LinearSystem(random_eps_straight(rng, 3, 0.2), rng.normal(size=(3, 2)), horizon=4)
    acts = rng.normal(size=(4, 2))
    zK = sys_.simulate(acts)[-1]
    np.testing.assert_allclose(rollout_jacobian(sys_) @ acts.reshape(-1), zK, atol=1e-13)


def test_random_eps_straight_has_exact_eps():
    rng = np.random.default_rng(1)
    for eps in (0.1, 0.4):
        A = random_eps_straight(rng, 4, eps)
        assert np.linalg.norm(A - np.eye(4), 2) == pytest.approx(eps, rel=1e-12)


# Jacobi solver ---------------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 3, 6, 7])
def test_round_robin_covers_every_pair_once(n):
    m = n + (n % 2)
    seen = [tuple(sorted(p)) for rnd in _round_robin(m) for p in rnd]
    assert len(seen) == len(set(seen)) == m * (m - 1) // 2
    for rnd in _round_robin(m):
        flat = [i for p in rnd for i in p]
        assert len(flat) == len(set(flat))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=st.floats(-10, 10)))
def test_sym_eig_properties(M):
    S = M @ M.T
    vals, vecs = sym_eig(S)
    scale = max(1.0, np.linalg.norm(S))
    assert np.all(np.diff(vals) <= 1e-12 * scale)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(len(S)), atol=1e-10)
    np.testing.assert_allclose(vecs @ np.diag(vals) @ vecs.T, S, atol=1e-10 * scale)
    np.testing.assert_allclose(vals, np.sort(np.linalg.eigvalsh(S))[::-1], atol=1e-10 * scale)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises((ContractError, DimensionError)):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


# theorem sweep and proxy -------------------------------------------------------------


def test_small_sweep_has_no_violations(tmp_path):
    rows = sweep_theorem(n_draws=36, seed=5)
    assert sweep_violations(rows) == 0
    assert {r["horizon"] for r in rows} == {2, 5, 10}
    assert {r["target_epsilon"] for r in rows} == {0.1, 0.25, 0.4}
    for r in rows:
        assert r["gram_jacobian_error"] < 1e-10
        assert r["lemma_relative_gap"] < 1e-8
        assert r["epsilon"] == pytest.approx(r["target_epsilon"], rel=1e-10)
    path = tmp_path / "s.csv"
    write_csv(path, rows)
    assert len(path.read_text().splitlines()) == 37
    assert sweep_theorem(n_draws=6, seed=5) == rows[:6]


def test_violation_counter():
    rows = [dict(holds_ratio=True, holds_power=None, holds_eps=True, holds_exp=False)]
    assert sweep_violations(rows) == 1


@pytest.mark.parametrize("theta", [0.05, 0.1, 0.2])
def test_rotation_proxy_is_tight(theta):
    sys_ = LinearSystem(rotation(theta), np.eye(2), horizon=10, z0=np.array([1.0, 0.0]))
    acts = np.zeros((10, 2))
    rep = cosine_proxy_check(sys_, sys_.simulate(acts), acts)
    assert rep.constant_speed
    np.testing.assert_allclose(rep.cosines, math.cos(theta), atol=1e-12)
    np.testing.assert_allclose(rep.lhs, 2 * math.sin(theta / 2), atol=1e-12)
    assert np.all(np.abs(rep.gap) < 1e-9) and not rep.violations.any()


def test_proxy_with_actions_and_variable_speed():
    rng = np.random.default_rng(2)
    sys_ = LinearSystem(random_eps_straight(rng, 3, 0.1), np.eye(3), z0=np.ones(3))
    acts = rng.normal(scale=0.3, size=(8, 3)) + 1.0
    rep = cosine_proxy_check(sys_, sys_.simulate(acts), acts)
    assert not rep.constant_speed and rep.notes
    assert rep.delta_a > 0
    assert len(rep.cosines) == 7


def test_proxy_rejects_stationary():
    sys_ = LinearSystem(np.eye(2), np.eye(2))
    with pytest.raises(ContractError):
        cosine_proxy_check(sys_, np.zeros((3, 2)), np.zeros((2, 2)))
