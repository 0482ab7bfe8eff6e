from __future__ import annotations

import numpy as np
import pytest

from qbounds.envs import random_mdp
from qbounds.mdp import Policy, TabularMdp


def linear_policy_q(mdp: TabularMdp, pi: Policy, extra: np.ndarray | None = None) -> np.ndarray:
    """Q of a fixed policy by a direct linear solve; ``extra`` is a per-state charge."""
    S, A = mdp.n_states, mdp.n_actions
    P = mdp.transition * (~mdp.terminal)[:, None, None]
    p = pi.probs
    r_pi = (p * mdp.reward).sum(axis=1)
    P_pi = np.einsum("sa,sat->st", p, P)
    c = np.zeros(S) if extra is None else extra
    v = np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, r_pi - c)
    return mdp.reward + mdp.gamma * (P.reshape(S * A, S) @ v).reshape(S, A)


def brute_optimal_q(mdp: TabularMdp) -> np.ndarray:
    """Optimal Q by enumerating all deterministic policies (tiny MDPs only)."""
    import itertools

    S, A = mdp.n_states, mdp.n_actions
    best = None
    for acts in itertools.product(range(A), repeat=S):
        probs = np.zeros((S, A))
        probs[np.arange(S), acts] = 1.0
        q = linear_policy_q(mdp, Policy(probs, "greedy"))
        best = q if best is None else np.maximum(best, q)
    return best


@pytest.fixture
def small_mdp() -> TabularMdp:
    return random_mdp(4, 2, (-1.0, 0.0), 0.9, seed=3)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
