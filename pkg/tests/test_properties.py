from __future__ import annotations

import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from qbounds.bounds import compute_bounds, evaluate_policy, solve, verify_bounds
from qbounds.envs import random_mdp
from qbounds.expr import parse_expression
from qbounds.harness.io import format_float
from qbounds.harness.metrics import kl_policy_divergence
from qbounds.mdp import (
    Policy,
    SoftConfig,
    bellman_backup_soft,
    bellman_backup_standard,
    logsumexp,
    soft_value,
)
from qbounds.transfer import (
    and_min,
    catalog,
    conical_combo,
    convex_combo,
    linear,
    or_max,
    transform_reward,
)

seeds = st.integers(0, 2**31 - 1)
gammas = st.sampled_from([0.5, 0.8, 0.9, 0.99])
betas = st.floats(0.2, 20.0)
PROP = settings(max_examples=40, deadline=None)


def tasks(seed, gamma, arity, n_states=5, n_actions=3):
    base = random_mdp(n_states, n_actions, (-1.0, 0.0), gamma, seed=seed)
    rng = np.random.default_rng([seed, 1])
    rewards = [base.reward] + [rng.uniform(-1.0, 0.0, size=base.reward.shape) for _ in range(arity - 1)]
    return base, rewards


@PROP
@given(seeds, gammas, betas)
def test_backups_are_monotone_and_contracting(seed, gamma, beta):
    mdp = random_mdp(4, 3, gamma=gamma, seed=seed)
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 3))
    b = a + np.abs(rng.normal(size=(4, 3)))
    cfg = SoftConfig(beta)
    for T in (lambda q: bellman_backup_standard(mdp, q), lambda q: bellman_backup_soft(mdp, q, cfg)):
        assert np.all(T(a) <= T(b) + 1e-12)
        assert np.max(np.abs(T(a) - T(b))) <= gamma * np.max(np.abs(a - b)) + 1e-12


@PROP
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(-700, 700))
def test_logsumexp_matches_shifted_naive_sum(values, shift):
    z = np.array(values) + shift
    m = z.max()
    assert math.isclose(logsumexp(z), m + math.log(np.exp(z - m).sum()), rel_tol=1e-12, abs_tol=1e-12)


@PROP
@given(st.lists(st.floats(-100, 0), min_size=2, max_size=5), betas)
def test_soft_value_sandwich(values, beta):
    q = np.array([values])
    v = soft_value(q, SoftConfig(beta))[0]
    assert q.max() - math.log(q.shape[1]) / beta - 1e-9 <= v <= q.max() + 1e-9
    assert v >= q.mean() - 1e-9


@PROP
@given(seeds, gammas, st.sampled_from(list(catalog())))
def test_standard_bounds_hold_for_random_tasks(seed, gamma, label):
    f = catalog()[label]
    base, rewards = tasks(seed, gamma, f.arity)
    target = base.with_reward(transform_reward(f, rewards))
    qs = [solve(base.with_reward(r), "standard", tol=1e-12) for r in rewards]
    q_tilde = solve(target, "standard", tol=1e-12)
    report = compute_bounds(target, f, qs, "standard", tol=1e-12)
    assert verify_bounds(q_tilde, report.lower, report.upper, 1e-8).passed
    q_pi = evaluate_policy(target, report.zero_shot, "standard", tol=1e-12)
    assert np.all(q_tilde - q_pi <= report.regret_D + 1e-8)


@PROP
@given(seeds, st.sampled_from([0.5, 0.9]), betas, st.sampled_from(["or", "and", "average", "not", "linear_2"]))
def test_soft_bounds_hold_for_random_tasks(seed, gamma, beta, label):
    f = catalog()[label]
    cfg = SoftConfig(beta)
    base, rewards = tasks(seed, gamma, f.arity)
    target = base.with_reward(transform_reward(f, rewards))
    qs = [solve(base.with_reward(r), "soft", cfg, 1e-12) for r in rewards]
    q_tilde = solve(target, "soft", cfg, 1e-12)
    report = compute_bounds(target, f, qs, "soft", cfg, 1e-12)
    assert verify_bounds(q_tilde, report.lower, report.upper, 1e-8).passed
    assert report.aux_C.min() >= -1e-9 and report.regret_D.min() >= -1e-9


@PROP
@given(seeds, gammas, st.lists(st.floats(0.0, 2.0), min_size=2, max_size=3).filter(lambda w: sum(w) > 0))
def test_conical_combination_upper_bounds_in_standard_rl(seed, gamma, weights):
    f = conical_combo(weights)
    base, rewards = tasks(seed, gamma, f.arity)
    qs = [solve(base.with_reward(r), "standard", tol=1e-12) for r in rewards]
    q_tilde = solve(base.with_reward(transform_reward(f, rewards)), "standard", tol=1e-12)
    assert np.all(q_tilde <= f(*qs) + 1e-8)


@PROP
@given(seeds, st.sampled_from([0.5, 0.9]), betas,
       st.lists(st.floats(0.0, 1.0), min_size=2, max_size=3).filter(lambda w: 0 < sum(w) <= 1))
def test_convex_combination_upper_bounds_in_soft_rl(seed, gamma, beta, weights):
    f = convex_combo(weights)
    cfg = SoftConfig(beta)
    base, rewards = tasks(seed, gamma, f.arity)
    qs = [solve(base.with_reward(r), "soft", cfg, 1e-12) for r in rewards]
    q_tilde = solve(base.with_reward(transform_reward(f, rewards)), "soft", cfg, 1e-12)
    assert np.all(q_tilde <= f(*qs) + 1e-8)


@PROP
@given(seeds, gammas, st.floats(0.0, 5.0))
def test_nonnegative_linear_maps_are_exact_in_standard_rl(seed, gamma, k):
    base, (r,) = tasks(seed, gamma, 1)
    q = solve(base, "standard", tol=1e-12)
    q_tilde = solve(base.with_reward(k * r), "standard", tol=1e-12)
    assert np.max(np.abs(q_tilde - k * q)) <= 1e-8 * max(1.0, k)


@PROP
@given(seeds, st.sampled_from([0.5, 0.9]), betas)
def test_or_and_sandwich_soft_optimum(seed, gamma, beta):
    cfg = SoftConfig(beta)
    base, rewards = tasks(seed, gamma, 2)
    qs = [solve(base.with_reward(r), "soft", cfg, 1e-12) for r in rewards]
    q_or = solve(base.with_reward(np.maximum(*rewards)), "soft", cfg, 1e-12)
    q_and = solve(base.with_reward(np.minimum(*rewards)), "soft", cfg, 1e-12)
    assert np.all(or_max()(*qs) <= q_or + 1e-8)
    assert np.all(q_and <= and_min()(*qs) + 1e-8)


@PROP
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=4), st.lists(st.floats(0.01, 1.0), min_size=2, max_size=4))
def test_kl_nonnegative_and_zero_on_self(p, q):
    n = min(len(p), len(q))
    a = np.array(p[:n]) / sum(p[:n])
    b = np.array(q[:n]) / sum(q[:n])
    pa, pb = Policy(a[None]), Policy(b[None])
    assert kl_policy_divergence(pa, pb) >= -1e-15
    assert kl_policy_divergence(pa, pa) == 0.0


@PROP
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_csv_floats_round_trip(x):
    assert float(format_float(x)) == x


ATOMS = st.sampled_from(["x1", "x2", "0.5", "3", "x3"])


@st.composite
def expressions(draw, depth=3):
    if depth == 0 or draw(st.booleans()):
        return draw(ATOMS)
    op = draw(st.sampled_from(["+", "-", "*", "max", "min", "neg"]))
    a = draw(expressions(depth=depth - 1))
    if op == "neg":
        return f"neg({a})"
    b = draw(expressions(depth=depth - 1))
    return f"{op}({a}, {b})" if op in ("max", "min") else f"({a}) {op} ({b})"


@PROP
@given(expressions(), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_expression_canonical_form_is_stable(text, xs):
    if not any(v in text for v in ("x1", "x2", "x3")):
        text = f"{text} + x1"
    e = parse_expression(text)
    again = parse_expression(str(e))
    assert str(again) == str(e)
    args = xs[: e.arity]
    np.testing.assert_array_equal(e(*args), again(*args))


@PROP
@given(seeds, gammas)
def test_soft_linear_direction(seed, gamma):
    cfg = SoftConfig(1.0)
    base, (r,) = tasks(seed, gamma, 1)
    q = solve(base, "soft", cfg, 1e-12)
    half = solve(base.with_reward(0.5 * r), "soft", cfg, 1e-12)
    double = solve(base.with_reward(2.0 * r), "soft", cfg, 1e-12)
    assert linear(0.5).classification("soft").upper_bound and np.all(half <= 0.5 * q + 1e-8)
    assert linear(2.0).classification("soft").lower_bound and np.all(2.0 * q <= double + 1e-8)
