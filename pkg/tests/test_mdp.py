from __future__ import annotations

import numpy as np
import pytest

from conftest import brute_optimal_q, linear_policy_q
from qbounds.envs import random_mdp
from qbounds.errors import ConvergenceError, DomainError, NumericalError, StructuralError
from qbounds.mdp import (
    Policy,
    SoftConfig,
    TabularMdp,
    bellman_backup_soft,
    bellman_backup_standard,
    boltzmann_policy,
    entropic_cost,
    evaluate_policy_soft,
    evaluate_policy_standard,
    fixed_point,
    greedy_policy,
    logsumexp,
    soft_value,
    solve_soft,
    solve_standard,
    stack_mdps,
    value_iteration_standard,
)


def test_single_state_geometric_series():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.array([[-1.0]]), 0.9)
    assert solve_standard(mdp)[0, 0] == pytest.approx(-10.0, abs=1e-9)
    # With one action under the uniform prior the soft value equals the hard one.
    assert solve_soft(mdp, SoftConfig(2.0))[0, 0] == pytest.approx(-10.0, abs=1e-9)


def test_two_action_soft_closed_form():
    # Q_a = r_a + gamma V, V = (1/beta) log(0.5 e^{beta Q_1} + 0.5 e^{beta Q_2}).
    # Writing Q_a = r_a + c gives c = gamma / (1 - gamma) * (1/beta) log(0.5 e^{beta r_1} + 0.5 e^{beta r_2}).
    r = np.array([[-1.0, -0.2]])
    beta, gamma = 3.0, 0.8
    mdp = TabularMdp(np.ones((1, 2, 1)), r, gamma)
    lse = np.log(0.5 * np.exp(beta * r[0, 0]) + 0.5 * np.exp(beta * r[0, 1])) / beta
    expected = r + gamma / (1 - gamma) * lse
    np.testing.assert_allclose(solve_soft(mdp, SoftConfig(beta), tol=1e-13), expected, atol=1e-10)


def test_standard_matches_policy_enumeration(small_mdp):
    np.testing.assert_allclose(solve_standard(small_mdp, tol=1e-13), brute_optimal_q(small_mdp), atol=1e-9)


def test_policy_evaluation_matches_linear_solve(small_mdp):
    rng = np.random.default_rng(0)
    p = rng.uniform(size=(4, 2))
    pi = Policy(p / p.sum(axis=1, keepdims=True))
    np.testing.assert_allclose(evaluate_policy_standard(small_mdp, pi, 1e-13), linear_policy_q(small_mdp, pi),
                               atol=1e-9)
    cfg = SoftConfig(2.0)
    np.testing.assert_allclose(evaluate_policy_soft(small_mdp, pi, cfg, 1e-13),
                               linear_policy_q(small_mdp, pi, entropic_cost(pi, cfg)), atol=1e-9)


def test_boltzmann_policy_of_soft_optimum_is_self_consistent(small_mdp):
    cfg = SoftConfig(1.5)
    q = solve_soft(small_mdp, cfg, 1e-13)
    np.testing.assert_allclose(evaluate_policy_soft(small_mdp, boltzmann_policy(q, cfg), cfg, 1e-13), q, atol=1e-9)


def test_soft_value_between_prior_mean_and_max(small_mdp):
    # Under a prior the soft value lies between the prior mean and the max.
    cfg = SoftConfig(1.0)
    q = solve_soft(small_mdp, cfg, 1e-13)
    v = soft_value(q, cfg)
    assert np.all(v <= q.max(axis=1) + 1e-12)
    assert np.all(v >= q.mean(axis=1) - 1e-12)


def test_terminal_states_have_no_continuation():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 1] = 1.0
    mdp = TabularMdp(P, np.array([[-1.0], [-5.0]]), 0.9, terminal=np.array([False, True]))
    q = solve_standard(mdp, 1e-13)
    np.testing.assert_allclose(q, [[-1.0 + 0.9 * -5.0], [-5.0]], atol=1e-12)


def test_terminal_rows_may_be_arbitrary():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    mdp = TabularMdp(P, np.array([[0.0], [1.0]]), 0.5, terminal=np.array([False, True]))
    assert solve_standard(mdp)[0, 0] == pytest.approx(0.5)


def test_backups_are_contractions(small_mdp):
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 4, 2))
    cfg = SoftConfig(4.0)
    for backup in (lambda q: bellman_backup_standard(small_mdp, q), lambda q: bellman_backup_soft(small_mdp, q, cfg)):
        assert np.max(np.abs(backup(a) - backup(b))) <= 0.9 * np.max(np.abs(a - b)) + 1e-12


def test_batched_solve_matches_members():
    batch = random_mdp(5, 3, gamma=[0.8, 0.9, 0.99], seed=4, batch=3)
    q = solve_standard(batch, 1e-12)
    for i in range(3):
        np.testing.assert_allclose(q[i], solve_standard(batch.select(i), 1e-12), atol=1e-9)


def test_stack_mdps_round_trip(small_mdp):
    other = random_mdp(4, 2, seed=9)
    stacked = stack_mdps([small_mdp, other])
    assert stacked.batch_shape == (2,)
    np.testing.assert_array_equal(stacked.select(1).transition, other.transition)


def test_convergence_error_on_iteration_cap(small_mdp):
    with pytest.raises(ConvergenceError):
        value_iteration_standard(small_mdp, tol=1e-12, max_iter=3)


def test_non_contraction_detected():
    with pytest.raises(NumericalError):
        fixed_point(lambda q: 2.0 * q + 1.0, np.zeros(3), 0.5, 1e-10, 100)


def test_overflow_raises_numerical_error():
    mdp = TabularMdp(np.ones((1, 1, 1)), np.array([[-1e308]]), 0.99)
    with np.errstate(over="ignore"), pytest.raises(NumericalError):
        solve_standard(mdp)


def test_logsumexp_is_stable():
    z = np.array([1000.0, 1000.0])
    assert logsumexp(z) == pytest.approx(1000.0 + np.log(2.0))
    z = np.array([-1000.0, -np.inf])
    assert logsumexp(z) == pytest.approx(-1000.0)


def test_soft_value_with_large_beta_stays_finite():
    q = np.array([[-100.0, -1.0]])
    v = soft_value(q, SoftConfig(1e6))
    assert np.isfinite(v).all()
    assert v[0] == pytest.approx(-1.0 - np.log(2.0) / 1e6)


@pytest.mark.parametrize("kwargs", [
    dict(transition=np.full((2, 1, 2), 0.4), reward=np.zeros((2, 1)), gamma=0.9),
    dict(transition=np.full((2, 1, 2), 0.5), reward=np.zeros((2, 1)), gamma=1.0),
    dict(transition=np.full((2, 1, 2), 0.5), reward=np.zeros((2, 2)), gamma=0.9),
    dict(transition=np.full((2, 1, 2), 0.5), reward=np.array([[np.nan], [0.0]]), gamma=0.9),
    dict(transition=np.full((2, 1, 3), 0.5), reward=np.zeros((2, 1)), gamma=0.9),
])
def test_invalid_mdps_rejected(kwargs):
    with pytest.raises(StructuralError):
        TabularMdp(**kwargs)


def test_policy_validation():
    with pytest.raises(StructuralError):
        Policy(np.array([[0.5, 0.6]]))
    with pytest.raises(StructuralError):
        Policy(np.array([[0.5, 0.5]]), "greedy")
    assert greedy_policy(np.array([[1.0, 1.0, 0.0]])).actions()[0] == 0


def test_soft_config_validation():
    for beta in (0.0, -1.0, np.inf, np.nan):
        with pytest.raises(StructuralError):
            SoftConfig(beta)
    with pytest.raises(StructuralError):
        SoftConfig(1.0, prior=np.array([1.0, 0.0]))


def test_entropic_cost_zero_for_prior_policy():
    cfg = SoftConfig(2.0, prior=np.array([0.3, 0.7]))
    pi = Policy(np.array([[0.3, 0.7], [0.3, 0.7]]))
    np.testing.assert_allclose(entropic_cost(pi, cfg), 0.0, atol=1e-15)


def test_entropic_cost_refuses_mass_outside_prior():
    cfg = SoftConfig(1.0)
    object.__setattr__(cfg, "prior", np.array([1.0, 0.0]))
    with pytest.raises(DomainError):
        entropic_cost(Policy(np.array([[0.5, 0.5]])), cfg)


def test_nonuniform_prior_soft_solution_consistent(small_mdp):
    cfg = SoftConfig(2.0, prior=np.array([0.2, 0.8]))
    q = solve_soft(small_mdp, cfg, 1e-13)
    np.testing.assert_allclose(bellman_backup_soft(small_mdp, q, cfg), q, atol=1e-11)
    np.testing.assert_allclose(evaluate_policy_soft(small_mdp, boltzmann_policy(q, cfg), cfg, 1e-13), q, atol=1e-9)
