from __future__ import annotations

import json

import numpy as np
import pytest

from qbounds.bounds import (
    EpsilonSpec,
    c_reward,
    compute_bounds,
    compute_C,
    compute_C_hat,
    compute_D,
    compute_D_hat,
    crude_C_bound,
    epsilon_bounds,
    evaluate_policy,
    solve,
    verify_bounds,
    zero_shot_policy,
)
from qbounds.envs import random_mdp
from qbounds.errors import ClassificationError, NumericalError, PreconditionError, StructuralError
from qbounds.mdp import SoftConfig, TabularMdp
from qbounds.transfer import Classification, Regime, and_min, catalog, custom, linear, or_max, transform_reward

STD, SOFT = Regime.STANDARD, Regime.SOFT
TOL = 1e-12


def instance(f, n=30, seed=0, gamma=0.9):
    base = random_mdp(6, 3, (-1.0, 0.0), gamma, seed=seed, batch=n)
    rng = np.random.default_rng(seed + 100)
    rewards = [base.reward] + [rng.uniform(-1.0, 0.0, size=base.reward.shape) for _ in range(f.arity - 1)]
    target = base.with_reward(transform_reward(f, rewards))
    return base, rewards, target


def solved(f, regime, cfg, **kw):
    base, rewards, target = instance(f, **kw)
    qs = [solve(base.with_reward(r), regime, cfg, TOL) for r in rewards]
    return target, qs, solve(target, regime, cfg, TOL)


CASES = [
    (label, regime, beta)
    for label, f in catalog().items()
    for regime, beta in [(STD, None), (SOFT, 1.0), (SOFT, 5.0)]
    if f.classification(regime) != Classification.UNKNOWN
]


@pytest.mark.parametrize("label, regime, beta", CASES)
def test_bounds_regret_and_positivity(label, regime, beta):
    f = catalog()[label]
    cfg = None if beta is None else SoftConfig(beta)
    target, qs, q_tilde = solved(f, regime, cfg, gamma=0.95)
    report = compute_bounds(target, f, qs, regime, cfg, TOL)
    assert verify_bounds(q_tilde, report.lower, report.upper, 1e-8).passed
    assert report.aux_C.min() >= -1e-9
    assert report.regret_D.min() >= -1e-9
    q_pi = evaluate_policy(target, report.zero_shot, regime, cfg, TOL)
    assert np.all(q_tilde - q_pi <= report.regret_D + 1e-8)
    assert np.all(q_pi <= q_tilde + 1e-8)
    r_c = c_reward(target, f, qs, regime, cfg)
    crude = crude_C_bound(r_c if report.aux_kind == "C" else -r_c, target.gamma)
    assert np.all(report.aux_C.max(axis=(-2, -1)) <= crude + 1e-8)


def test_hand_computed_and_example():
    # One state, two self-looping actions, gamma = 0.5.
    P = np.ones((1, 2, 1))
    r1, r2 = np.array([[-1.0, -0.5]]), np.array([[-0.5, -1.0]])
    base = TabularMdp(P, r1, 0.5)
    f = and_min()
    q1, q2 = solve(base, STD), solve(base.with_reward(r2), STD)
    np.testing.assert_allclose(q1, [[-1.5, -1.0]])
    target = base.with_reward(transform_reward(f, [r1, r2]))
    np.testing.assert_allclose(solve(target, STD), [[-2.0, -2.0]])
    c_hat = compute_C_hat(target, f, [q1, q2], STD)
    np.testing.assert_allclose(c_hat, [[0.5, 0.5]], atol=1e-9)
    report = compute_bounds(target, f, [q1, q2], STD)
    np.testing.assert_allclose(report.lower, [[-2.0, -2.0]], atol=1e-9)
    np.testing.assert_allclose(report.upper, [[-1.5, -1.5]], atol=1e-12)
    np.testing.assert_allclose(report.regret_D, [[0.5, 0.5]], atol=1e-9)
    assert report.gap_max == pytest.approx(0.5, abs=1e-9)


@pytest.mark.parametrize("k", [0.5, 2.0])
def test_standard_linear_is_exact(k):
    f = linear(k)
    target, (q,), q_tilde = solved(f, STD, None)
    assert np.max(np.abs(q_tilde - k * q)) <= 1e-8
    report = compute_bounds(target, f, [q], STD, tol=TOL)
    assert report.gap_max <= 1e-8


def test_or_on_shared_dynamics_bound_is_tight_for_identical_tasks():
    base, (r1,), _ = instance(linear(1.0))
    q = solve(base, STD, None, TOL)
    target = base.with_reward(np.maximum(r1, r1))
    report = compute_bounds(target, or_max(), [q, q], STD, tol=TOL)
    assert report.gap_max <= 1e-8


def test_soft_D_variant_also_bounds_regret():
    f = or_max()
    cfg = SoftConfig(2.0)
    target, qs, q_tilde = solved(f, SOFT, cfg)
    C = compute_C(target, f, qs, SOFT, cfg, TOL)
    D_plain = compute_D(target, f, qs, C, SOFT, cfg, TOL)
    D_soft = compute_D(target, f, qs, C, SOFT, cfg, TOL, variant="soft")
    q_pi = evaluate_policy(target, zero_shot_policy(f, qs, SOFT, cfg), SOFT, cfg, TOL)
    assert np.all(q_tilde - q_pi <= D_plain + 1e-8)
    assert np.all(q_tilde - q_pi <= D_soft + 1e-8)
    with pytest.raises(StructuralError):
        compute_D(target, f, qs, C, SOFT, cfg, TOL, variant="other")


def test_wrong_side_rejected():
    f = and_min()
    target, qs, _ = solved(f, STD, None, n=2)
    with pytest.raises(ClassificationError):
        compute_C(target, f, qs, STD)
    with pytest.raises(ClassificationError):
        compute_bounds(target, custom("x1*x1 + x2"), qs, STD)
    # An explicit classification overrides the declared one.
    report = compute_bounds(target, custom("min(x1, x2)"), qs, STD, tol=TOL, classification="concave-conditions")
    assert report.aux_kind == "C_hat"


def test_sign_check_catches_inexact_primitives():
    f = or_max()
    target, qs, _ = solved(f, STD, None, n=4)
    raised = [q + 0.1 for q in qs]
    # Raising both primitives by 0.1 shifts r_C by -0.1 (1 - gamma).
    with pytest.raises(NumericalError):
        compute_C(target, f, raised, STD)
    assert np.isfinite(compute_C(target, f, raised, STD, check_sign=False)).all()


def test_crude_bound_per_member():
    r = np.array([[[1.0, 0.0]], [[2.0, 0.5]]])
    np.testing.assert_allclose(crude_C_bound(r, np.array([0.5, 0.9])), [2.0, 20.0])
    assert crude_C_bound(r[0], 0.5) == pytest.approx(2.0)


@pytest.mark.parametrize("eps", [0.01, 0.05])
@pytest.mark.parametrize("label", ["or", "and", "not", "average"])
def test_epsilon_bounds_contain_optimum(label, eps):
    f = catalog()[label]
    target, qs, q_tilde = solved(f, STD, None, n=20, seed=7)
    rng = np.random.default_rng(11)
    q_bars = [q + rng.uniform(-eps, eps, size=q.shape) for q in qs]
    cls = f.classification(STD)
    if cls.lower_bound:
        C_bar = compute_C(target, f, q_bars, STD, tol=TOL, check_sign=False)
    else:
        C_bar = compute_C_hat(target, f, q_bars, STD, tol=TOL, check_sign=False)
    lo, hi = epsilon_bounds(f, q_bars, EpsilonSpec(eps, 1.0), C_bar, cls, target.gamma)
    assert verify_bounds(q_tilde, lo, hi, 1e-8).passed


def test_epsilon_bounds_both_case_and_preconditions():
    f = linear(1.0)
    q = np.zeros((2, 2))
    lo, hi = epsilon_bounds(f, [q + 0.01], EpsilonSpec(0.01, 1.0), None, "both", 0.9)
    np.testing.assert_allclose(lo, 0.0, atol=1e-15)
    np.testing.assert_allclose(hi, 0.02)
    with pytest.raises(PreconditionError):
        epsilon_bounds(linear(2.0), [q], EpsilonSpec(0.01, 1.0), None, "both", 0.9)
    with pytest.raises(PreconditionError):
        epsilon_bounds(custom("x1"), [q], EpsilonSpec(0.01, 1.0), None, "both", 0.9)
    with pytest.raises(StructuralError):
        epsilon_bounds(f, [q], EpsilonSpec(0.01, 1.0), None, "convex-conditions", 0.9)
    with pytest.raises(StructuralError):
        EpsilonSpec(-1.0, 1.0)


def test_verify_bounds_witness():
    q = np.zeros((2, 3))
    lo = q.copy()
    lo[1, 2] = 0.5
    check = verify_bounds(q, lo, q + 1.0)
    assert not check.passed
    assert check.lower_witness == (1, 2)
    assert check.lower_violation == 0.5


def test_report_serializes():
    f = or_max()
    target, qs, _ = solved(f, STD, None, n=1)
    report = compute_bounds(target.select(0), f, [q[0] for q in qs], STD, tol=TOL, meta={"seed": 0})
    doc = json.loads(report.to_json())
    assert doc["classification"] == "convex-conditions"
    assert np.array(doc["lower"]).shape == (6, 3)
    assert doc["gap_max"] == report.gap_max
    assert doc["meta"] == {"seed": 0}


def test_batched_matches_single():
    f = or_max()
    target, qs, _ = solved(f, STD, None, n=3)
    batch = compute_bounds(target, f, qs, STD, tol=TOL)
    one = compute_bounds(target.select(1), f, [q[1] for q in qs], STD, tol=TOL)
    np.testing.assert_allclose(batch.upper[1], one.upper, atol=1e-10)
