import numpy as np
import pytest

from dqnadapt import oracle
from dqnadapt.envs import (
    DOWN, GO, GRID_ACTIONS, GRID_ADAPTED, GRID_MAX_STEPS, GRID_ORIGINAL, LEFT, RIGHT, STOP, SUCCESS, UP,
    GridState, IntersectionEnv, IntersectionParams, IntersectionState, grid_move, grid_step, grid_success, in_grid,
)
from dqnadapt.oracle import STATIONARY, STEP_AUGMENTED, QTable
from dqnadapt.qlearn import run_episode

P = IntersectionParams()


@pytest.fixture(scope="module")
def tables():
    return {(t.name, v): oracle.solve_grid_q(t, 1.0, v)
            for t in (GRID_ORIGINAL, GRID_ADAPTED) for v in (STATIONARY, STEP_AUGMENTED)}


def test_stationary_hand_values(tables):
    t = tables[("original", STATIONARY)]
    assert t.q((0, 1), LEFT) == 20
    assert (t.q((2, 2), LEFT), t.q((2, 2), UP), t.q((2, 2), RIGHT)) == (17, -20, -100)
    np.testing.assert_array_equal(t.row((1, 1)), [19, 17, 15, -20])


def test_adapted_values(tables):
    t = tables[("adapted", STATIONARY)]
    assert t.q((0, 1), LEFT) == -20
    assert t.q((2, 2), UP) == 20


@pytest.mark.parametrize("variant", [STATIONARY, STEP_AUGMENTED])
def test_leaving_the_grid_costs_100(tables, variant):
    t = tables[("original", variant)]
    steps = range(GRID_MAX_STEPS + 1) if variant == STEP_AUGMENTED else [0]
    for c in t.cells():
        for a in GRID_ACTIONS:
            if not in_grid(grid_move(c, a)):
                assert all(t.q(c, a, k) == -100 for k in steps)


@pytest.mark.parametrize("task", [GRID_ORIGINAL, GRID_ADAPTED])
def test_step_augmented_equals_brute_force(tables, task):
    t = tables[(task.name, STEP_AUGMENTED)]
    for c in task.white_cells():
        for k in range(GRID_MAX_STEPS + 1):
            for a in GRID_ACTIONS:
                assert t.q(c, a, k) == oracle.brute_force_q(c, k, a, task)


def test_brute_force_edges():
    assert oracle.brute_force_q((0, 1), 7, LEFT, GRID_ORIGINAL) == 20
    for a in (UP, LEFT):
        assert oracle.brute_force_q((2, 2), 10, a, GRID_ORIGINAL) in (-100, -20)
    assert oracle.brute_force_q((2, 2), 10, LEFT, GRID_ORIGINAL) == -100


@pytest.mark.parametrize("task", ["original", "adapted"])
def test_bellman_residual(tables, task):
    assert oracle.bellman_residual(tables[(task, STATIONARY)]) <= 1e-9


def test_discounted_table_is_consistent():
    t = oracle.solve_grid_q(GRID_ORIGINAL, 0.9)
    assert oracle.bellman_residual(t) <= 1e-9
    assert t.q((0, 1), LEFT) == 20


def test_optimal_actions(tables):
    t = tables[("original", STATIONARY)]
    assert oracle.optimal_action(t, (0, 1)) == LEFT
    assert oracle.optimal_action(t, (1, 0)) == UP


def test_tie_rule():
    values = {((y, x), a): 1.0 for y in range(3) for x in range(3) for a in GRID_ACTIONS}
    t = QTable(GRID_ORIGINAL, 1.0, STATIONARY, values)
    assert oracle.optimal_action(t, (2, 2)) == UP


def test_optimal_path_succeeds(tables):
    t = tables[("original", STATIONARY)]
    path = oracle.optimal_path(t)
    assert path == [((2, 2), LEFT), ((2, 1), UP), ((1, 1), UP), ((0, 1), LEFT)]
    state, traj = GridState(2, 2, 0), []
    for _, a in path:
        tr = grid_step(state, a, GRID_ORIGINAL)
        traj.append(tr)
        state = tr.next_state
    assert grid_success(traj, GRID_ORIGINAL)


def test_expert_equals_optimal_action(tables):
    expert = oracle.GridExpert(GRID_ORIGINAL)
    t = tables[("original", STATIONARY)]
    for c in GRID_ORIGINAL.white_cells():
        for k in range(GRID_MAX_STEPS + 1):
            assert expert(GridState(c[0], c[1], k)) == oracle.optimal_action(t, c)


def test_expert_succeeds_from_every_start():
    for task in (GRID_ORIGINAL, GRID_ADAPTED):
        expert = oracle.GridExpert(task)
        for c in task.white_cells():
            state, traj = GridState(c[0], c[1], 0), []
            while not traj or not traj[-1].terminal:
                traj.append(grid_step(state, expert(state), task))
                state = traj[-1].next_state
            assert grid_success(traj, task)


def line_state(ado):
    return IntersectionState(P.ego_start_x, P.ego_lane_y, tuple(sorted(ado)), 0, None, False, np.random.default_rng(0))


def test_intersection_expert_inside_lane_goes():
    s = IntersectionState(P.ado_lane_x, P.ego_lane_y, (P.ego_lane_y - 20.0,), 3, 100.0, False, np.random.default_rng(0))
    assert oracle.intersection_expert(s, 80.0, P) == GO


def test_intersection_expert_stops_without_gap():
    s = line_state([240.0, 310.0])
    assert oracle.intersection_expert(s, 80.0, P) == STOP


def test_intersection_expert_gap_threshold():
    s = line_state([180.0, 325.0])  # 145 px gap, car below already clear
    assert oracle.intersection_expert(s, 80.0, P) == GO
    assert oracle.intersection_expert(s, 120.0, P) == GO
    s = line_state([240.0, 330.0])  # 90 px gap but the car above is too close
    assert oracle.intersection_expert(s, 80.0, P) == STOP


@pytest.mark.parametrize("gap", [80.0, 120.0])
def test_intersection_expert_audit(gap):
    env = IntersectionEnv(gap)
    expert = oracle.IntersectionExpert(gap, env.params)
    rng = np.random.default_rng(2024)
    wins = sum(run_episode(env, None, "expert", rng, expert)[-1].outcome == SUCCESS for _ in range(500))
    assert wins / 500 >= 0.99
