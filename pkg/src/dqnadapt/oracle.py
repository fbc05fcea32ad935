"""Exact GridWorld Q-values, an enumeration cross-check, and expert policies."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np

from .envs import (
    GRID_ACTIONS, GRID_MAX_STEPS, GRID_START, GO, ONGOING, R_GOAL, R_HAZARD, R_LIVING,
    R_OBSTACLE, R_OUT, STOP, Cell, GridState, GridTask, IntersectionParams, IntersectionState,
    grid_move, grid_outcome, in_grid, straddling_gap,
)

STATIONARY = "stationary"
STEP_AUGMENTED = "step_augmented"
VARIANTS = (STATIONARY, STEP_AUGMENTED)

_VI_TOL = 1e-12
_VI_MAX_SWEEPS = 10_000


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class QTable:
    """Oracle Q-values.

    ``values`` is keyed ``(cell, action)`` for the stationary variant and
    ``(cell, step, action)`` for the step-augmented one.
    """
    task: GridTask
    gamma: float
    variant: str
    values: Mapping[tuple, float]

    def q(self, cell: Cell, action: int, step: int = 0) -> float:
        if self.variant == STATIONARY:
            return self.values[(cell, action)]
        return self.values[(cell, step, action)]

    def row(self, cell: Cell, step: int = 0) -> np.ndarray:
        return np.array([self.q(cell, a, step) for a in GRID_ACTIONS])

    def cells(self) -> list[Cell]:
        return self.task.nonterminal_cells()


def _stationary_reward(nxt: Cell, task: GridTask) -> tuple[float, bool]:
    if not in_grid(nxt):
        return R_OUT, True
    if nxt == task.goal:
        return R_GOAL, True
    if nxt == task.hazard:
        return R_HAZARD, True
    if nxt == task.obstacle:
        return R_OBSTACLE, False
    return R_LIVING, False


def solve_grid_q(task: GridTask, gamma: float = 1.0, variant: str = STATIONARY) -> QTable:
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if variant == STATIONARY:
        return QTable(task, gamma, variant, _value_iteration(task, gamma))
    if variant == STEP_AUGMENTED:
        return QTable(task, gamma, variant, _backward_induction(task, gamma))
    raise ValueError(f"unknown oracle variant {variant!r}")


def _value_iteration(task: GridTask, gamma: float) -> dict:
    cells = task.nonterminal_cells()  # raster order
    q = {(c, a): 0.0 for c in cells for a in GRID_ACTIONS}
    for _ in range(_VI_MAX_SWEEPS):
        delta = 0.0
        for c in cells:
            for a in GRID_ACTIONS:
                nxt = grid_move(c, a)
                r, terminal = _stationary_reward(nxt, task)
                new = r if terminal else r + gamma * max(q[(nxt, b)] for b in GRID_ACTIONS)
                delta = max(delta, abs(new - q[(c, a)]))
                q[(c, a)] = new
        if delta < _VI_TOL:
            return q
    raise OracleError("value iteration did not converge")


def _backward_induction(task: GridTask, gamma: float) -> dict:
    cells = task.nonterminal_cells()
    q: dict = {}
    for k in range(GRID_MAX_STEPS, -1, -1):
        for c in cells:
            for a in GRID_ACTIONS:
                nxt, r, outcome = grid_outcome(c, a, k, task)
                if outcome != ONGOING:
                    q[(c, k, a)] = r
                else:
                    q[(c, k, a)] = r + gamma * max(q[(nxt, k + 1, b)] for b in GRID_ACTIONS)
    return q


def brute_force_q(cell: Cell, step: int, action: int, task: GridTask, gamma: float = 1.0) -> float:
    """Best return over every continuation, found by plain recursion over the episode tree."""
    if step > GRID_MAX_STEPS:
        raise ValueError("step beyond the episode horizon")

    def q(c: Cell, k: int, a: int) -> float:
        nxt, r, outcome = grid_outcome(c, a, k, task)
        if outcome != ONGOING:
            return r
        best = -math.inf
        for b in GRID_ACTIONS:
            v = q(nxt, k + 1, b)
            if v > best:
                best = v
        return r + gamma * best

    return q(cell, step, action)


def bellman_residual(table: QTable) -> float:
    """Largest violation of the stationary Bellman equation."""
    if table.variant != STATIONARY:
        raise ValueError("residual is defined for the stationary table")
    worst = 0.0
    for c in table.cells():
        for a in GRID_ACTIONS:
            nxt = grid_move(c, a)
            r, terminal = _stationary_reward(nxt, table.task)
            rhs = r if terminal else r + table.gamma * max(table.q(nxt, b) for b in GRID_ACTIONS)
            worst = max(worst, abs(rhs - table.q(c, a)))
    return worst


def optimal_action(table: QTable, state: Union[GridState, Cell]) -> int:
    """Argmax of the oracle row; ties go to up < down < left < right."""
    if isinstance(state, GridState):
        cell, step = state.cell, state.steps
    else:
        cell, step = tuple(state), 0
    return int(np.argmax(table.row(cell, step)))


def optimal_path(table: QTable, start: Cell = GRID_START) -> list[tuple[Cell, int]]:
    """(cell, optimal action) pairs visited by the greedy oracle policy from ``start``."""
    pairs = []
    cell, step = start, 0
    while step <= GRID_MAX_STEPS:
        a = optimal_action(table, GridState(cell[0], cell[1], step if table.variant == STEP_AUGMENTED else 0))
        pairs.append((cell, a))
        nxt, _, outcome = grid_outcome(cell, a, step, table.task)
        if outcome != ONGOING:
            break
        cell, step = nxt, step + 1
    return pairs


class GridExpert:
    """Always plays the oracle-optimal action."""
    kind = "grid_oracle"

    def __init__(self, task: GridTask, gamma: float = 1.0, table: Optional[QTable] = None):
        self.table = table if table is not None else solve_grid_q(task, gamma, STATIONARY)
        self.task = self.table.task

    def __call__(self, state: GridState) -> int:
        return optimal_action(self.table, state)


def intersection_expert(state: IntersectionState, task_gap: float,
                        params: IntersectionParams = IntersectionParams()) -> int:
    """Scripted crossing policy.

    Inside the lane it keeps going. Approach steps that stay short of the lane
    are always taken. From the stop line it goes only if driving straight
    through from now on, with the current traffic moving at its fixed speed,
    keeps ``params.expert_clearance`` px of free space to every car and enters
    a gap of at least ``task_gap``.
    """
    if state.ego_x >= params.lane_left:
        return GO
    if state.ego_x + params.ego_velocity < params.lane_left:
        return GO
    return GO if crossing_is_safe(state, task_gap, params) else STOP


def crossing_is_safe(state: IntersectionState, task_gap: float,
                     params: IntersectionParams = IntersectionParams()) -> bool:
    ado = np.asarray(state.ado, dtype=np.float64)
    lim = (2 * params.car_radius + params.expert_clearance) ** 2
    x = state.ego_x
    k = 0
    gap = state.entry_gap
    while x < params.lane_right:
        k += 1
        x = state.ego_x + k * params.ego_velocity
        ys = ado + k * params.ado_velocity
        ys = ys[ys <= params.despawn_y]
        if gap is None and x >= params.lane_left:
            gap = straddling_gap(ys.tolist(), params.ego_lane_y)
        dx2 = (x - params.ado_lane_x) ** 2
        if dx2 < lim and np.any(dx2 + (ys - state.ego_y) ** 2 < lim):
            return False
    return gap is not None and gap >= task_gap


class IntersectionExpert:
    kind = "intersection_scripted"

    def __init__(self, task_gap: float, params: IntersectionParams = IntersectionParams()):
        self.task_gap = float(task_gap)
        self.params = params

    def __call__(self, state: IntersectionState) -> int:
        return intersection_expert(state, self.task_gap, self.params)
