from __future__ import annotations

import numpy as np
import pytest

from qbounds.bounds import solve
from qbounds.envs import (
    ACTIONS,
    GridSpec,
    build_mdp,
    compose_grids,
    grid_reward,
    load_fixture,
    parse_grid,
    primitive_mdps,
    random_mdp,
    random_sparse_grid,
    with_slip,
)
from qbounds.errors import ConfigError, ParseError, StructuralError
from qbounds.transfer import and_min, or_max

UP, DOWN, LEFT, RIGHT = (ACTIONS.index(a) for a in ("up", "down", "left", "right"))


def test_corridor_dynamics_and_rewards():
    mdp = parse_grid("S.D\n", step_reward=-1.0, diamond_reward=0.5, gamma=0.9)
    assert mdp.n_states == 3 and mdp.n_actions == 4
    assert mdp.transition[0, RIGHT, 1] == 1.0
    assert mdp.transition[0, LEFT, 0] == 1.0
    assert mdp.transition[0, UP, 0] == 1.0
    assert mdp.reward[1, RIGHT] == 0.5
    assert mdp.reward[0, RIGHT] == -1.0
    np.testing.assert_array_equal(mdp.initial_dist, [1.0, 0.0, 0.0])
    assert mdp.deterministic
    # Optimal: walk right and then keep bumping into the wall on the diamond.
    q = solve(mdp, "standard", tol=1e-13)
    v_diamond = 0.5 / (1 - 0.9)
    assert q[2, RIGHT] == pytest.approx(v_diamond)
    assert q[0, RIGHT] == pytest.approx(-1.0 + 0.9 * (0.5 + 0.9 * v_diamond))


def test_walls_block_moves():
    mdp = parse_grid("S#.\n...\n")
    assert mdp.n_states == 5
    assert mdp.transition[0, RIGHT, 0] == 1.0
    assert mdp.transition[0, DOWN, 2] == 1.0


def test_penalty_cell_leads_to_terminal_sink():
    mdp = parse_grid("SX\n", penalty_reward=-10.0)
    assert mdp.n_states == 2
    assert mdp.terminal.tolist() == [False, True]
    assert mdp.transition[0, RIGHT, 1] == 1.0
    assert mdp.reward[0, RIGHT] == -10.0
    np.testing.assert_array_equal(mdp.reward[1], 0.0)


def test_slip_kernel_and_expected_rewards():
    spec = GridSpec.from_text("S.D\n", slip=0.4, diamond_reward=1.0, step_reward=0.0)
    mdp = build_mdp(spec)
    np.testing.assert_allclose(mdp.transition.sum(axis=-1), 1.0)
    # From the middle: right with 0.6 + 0.1, left 0.1, up/down bounce 0.2.
    np.testing.assert_allclose(mdp.transition[1, RIGHT], [0.1, 0.2, 0.7])
    assert mdp.reward[1, RIGHT] == pytest.approx(0.7)
    assert not mdp.deterministic
    uniform = build_mdp(GridSpec.from_text("S.D\n", slip=1.0))
    np.testing.assert_allclose(uniform.transition[1, UP], uniform.transition[1, DOWN])


@pytest.mark.parametrize("text, err", [
    ("", ParseError), ("S.\n...\n", ParseError), ("..\n..\n", ParseError), ("SS\n", ParseError),
    ("S?\n", ParseError), ("SX\n", ConfigError),
])
def test_malformed_grids(text, err):
    with pytest.raises(err):
        GridSpec.from_text(text)


def test_parameter_validation():
    with pytest.raises(ConfigError):
        GridSpec.from_text("S.\n", slip=1.5)
    with pytest.raises(ConfigError):
        GridSpec.from_text("S.\n", gamma=1.0)
    with pytest.raises(ConfigError):
        GridSpec.from_text("S#\n", cell_rewards={(0, 1): 1.0})


def test_fixture_layouts_are_compatible():
    or_specs = [GridSpec.from_text(load_fixture(n), penalty_reward=-100.0) for n in ("or_left.txt", "or_down.txt")]
    maze_specs = [GridSpec.from_text(load_fixture(n)) for n in ("maze_task1.txt", "maze_task2.txt")]
    for specs in (or_specs, maze_specs):
        assert specs[0].shape == (6, 6)
        mdp = compose_grids(or_max(), specs)
        assert mdp.n_states == specs[0].n_states
    with pytest.raises(StructuralError):
        primitive_mdps([or_specs[0], maze_specs[0]])


def test_composed_reward_is_f_of_primitive_rewards():
    specs = [GridSpec.from_text(load_fixture(n)) for n in ("maze_task1.txt", "maze_task2.txt")]
    specs = with_slip(specs, 0.3)
    comp = compose_grids(and_min(), specs)
    prim = primitive_mdps(specs)
    np.testing.assert_allclose(comp.reward, np.minimum(prim.reward[0], prim.reward[1]))
    np.testing.assert_array_equal(comp.transition, prim.transition)
    assert prim.batch_shape == (2,)
    assert all(s.slip == 0.3 for s in specs)


def test_crlf_and_missing_trailing_newline():
    a = parse_grid("S.\r\n.D")
    b = parse_grid("S.\n.D\n")
    np.testing.assert_array_equal(a.transition, b.transition)


def test_random_sparse_grid_is_seeded():
    a = random_sparse_grid(6, 5, seed=3)
    b = random_sparse_grid(6, 5, seed=3)
    assert a == b
    assert len(a.cell_rewards) == 5
    assert all(0.0 <= v <= 1.0 for v in a.cell_rewards.values())
    r = grid_reward(a)
    assert np.count_nonzero(r) > 0
    with pytest.raises(ConfigError):
        random_sparse_grid(6, 36)


def test_random_mdp_shapes_and_determinism():
    m = random_mdp(5, 3, seed=1, batch=4, gamma=[0.8, 0.9, 0.99, 0.9])
    assert m.batch_shape == (4,)
    np.testing.assert_allclose(m.transition.sum(axis=-1), 1.0)
    assert m.reward.min() >= -1.0 and m.reward.max() <= 0.0
    np.testing.assert_array_equal(random_mdp(5, 3, seed=1).reward, random_mdp(5, 3, seed=1).reward)
