"""GridWorld and Intersection environments.

Both environments are functional: ``reset`` returns a fresh state and ``step``
returns a :class:`Transition` without mutating its input state. The only
mutable thing is the ``numpy.random.Generator`` that drives intersection spawns,
which each state carries along and which ``step`` advances.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np

ONGOING = "ongoing"
SUCCESS = "success"
UNSAFE_CROSS = "unsafe_cross"
COLLISION = "collision"
HAZARD = "hazard"
OUT_OF_BOUNDS = "out_of_bounds"
FROZEN = "frozen"
OUTCOMES = (ONGOING, SUCCESS, UNSAFE_CROSS, COLLISION, HAZARD, OUT_OF_BOUNDS, FROZEN)


class TerminalStateError(RuntimeError):
    """Raised when stepping an episode that has already ended."""


@dataclass(frozen=True)
class Transition:
    state: Any
    action: int
    reward: float
    next_state: Any
    terminal: bool
    outcome: str = ONGOING

    def __post_init__(self):
        if self.terminal != (self.outcome != ONGOING):
            raise ValueError(f"terminal={self.terminal} inconsistent with outcome {self.outcome!r}")


# --------------------------------------------------------------------------
# GridWorld
# --------------------------------------------------------------------------

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
GRID_ACTIONS = (UP, DOWN, LEFT, RIGHT)
GRID_ACTION_NAMES = ("up", "down", "left", "right")
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}

GRID_SIZE = 3
GRID_MAX_STEPS = 10
GRID_START = (2, 2)

R_GOAL = 20.0
R_HAZARD = -20.0
R_OBSTACLE = -5.0
R_OUT = -100.0
R_FROZEN = -100.0
R_LIVING = -1.0

Cell = tuple[int, int]


def in_grid(cell: Cell) -> bool:
    return 0 <= cell[0] < GRID_SIZE and 0 <= cell[1] < GRID_SIZE


@dataclass(frozen=True)
class GridTask:
    goal: Cell
    hazard: Cell
    obstacle: Cell
    name: str = "custom"

    def __post_init__(self):
        cells = (self.goal, self.hazard, self.obstacle)
        if len(set(cells)) != 3:
            raise ValueError("goal, hazard and obstacle must be distinct cells")
        for c in cells:
            if not in_grid(c):
                raise ValueError(f"cell {c} outside the grid")

    @property
    def terminal_cells(self) -> tuple[Cell, Cell]:
        return (self.goal, self.hazard)

    def white_cells(self) -> list[Cell]:
        special = {self.goal, self.hazard, self.obstacle}
        return [(y, x) for y in range(GRID_SIZE) for x in range(GRID_SIZE) if (y, x) not in special]

    def nonterminal_cells(self) -> list[Cell]:
        return [(y, x) for y in range(GRID_SIZE) for x in range(GRID_SIZE)
                if (y, x) not in (self.goal, self.hazard)]


GRID_ORIGINAL = GridTask(goal=(0, 0), hazard=(1, 2), obstacle=(1, 0), name="original")
GRID_ADAPTED = GridTask(goal=(1, 2), hazard=(0, 0), obstacle=(1, 0), name="adapted")


@dataclass(frozen=True)
class GridState:
    y: int
    x: int
    steps: int = 0

    @property
    def cell(self) -> Cell:
        return (self.y, self.x)


def grid_reset(task: GridTask, start_mode: str = "fixed", rng: Optional[np.random.Generator] = None) -> GridState:
    if start_mode == "fixed":
        return GridState(*GRID_START, 0)
    if start_mode == "random":
        if rng is None:
            raise ValueError("random start mode needs a generator")
        cells = task.white_cells()
        y, x = cells[int(rng.integers(len(cells)))]
        return GridState(y, x, 0)
    raise ValueError(f"unknown start mode {start_mode!r}")


def grid_move(cell: Cell, action: int) -> Cell:
    dy, dx = _MOVES[action]
    return (cell[0] + dy, cell[1] + dx)


def grid_outcome(cell: Cell, action: int, steps: int, task: GridTask) -> tuple[Cell, float, str]:
    """Where ``action`` from ``cell`` (after ``steps`` actions) leads, and what it pays."""
    if action not in _MOVES:
        raise ValueError(f"invalid grid action {action!r}")
    nxt = grid_move(cell, action)
    if not in_grid(nxt):
        return nxt, R_OUT, OUT_OF_BOUNDS
    if nxt == task.goal:
        return nxt, R_GOAL, SUCCESS
    if nxt == task.hazard:
        return nxt, R_HAZARD, HAZARD
    if steps + 1 > GRID_MAX_STEPS:
        return nxt, R_FROZEN, FROZEN
    if nxt == task.obstacle:
        return nxt, R_OBSTACLE, ONGOING
    return nxt, (0.0 if steps == 0 else R_LIVING), ONGOING


def grid_step(state: GridState, action: int, task: GridTask) -> Transition:
    if state.steps > GRID_MAX_STEPS or state.cell in task.terminal_cells or not in_grid(state.cell):
        raise TerminalStateError(f"cannot step terminal grid state {state}")
    nxt, reward, outcome = grid_outcome(state.cell, action, state.steps, task)
    next_state = GridState(nxt[0], nxt[1], state.steps + 1)
    return Transition(state, action, reward, next_state, outcome != ONGOING, outcome)


def grid_success(trajectory: Sequence[Transition], task: GridTask) -> bool:
    """Goal entered and the obstacle never visited (start cell included)."""
    if not trajectory:
        return False
    cells = [trajectory[0].state.cell] + [t.next_state.cell for t in trajectory]
    return task.goal in cells and task.obstacle not in cells


def grid_features(state: GridState) -> np.ndarray:
    return np.array([state.y, state.x], dtype=np.float64)


# --------------------------------------------------------------------------
# Intersection
# --------------------------------------------------------------------------

STOP, GO = 0, 1
INTERSECTION_ACTIONS = (STOP, GO)
N_VISIBLE_ADO = 10
# empty ado slots: above the spawn point, so never inside a gap
PAD = -100.0

R_CROSS_SAFE = 3000.0
R_CROSS_UNSAFE = -9500.0
R_COLLISION = -9500.0
R_FROZEN_CAR = -20000.0
R_PROGRESS = -1.0
R_NO_PROGRESS = -6.0


@dataclass(frozen=True)
class IntersectionParams:
    """Geometry, speeds and traffic density, all in pixels and steps."""
    world_w: float = 600.0
    world_h: float = 600.0
    ego_lane_y: float = 300.0
    ado_lane_x: float = 300.0
    lane_width: float = 60.0
    car_radius: float = 15.0
    ego_start_x: float = 260.0
    ego_velocity: float = 10.0
    ado_velocity: float = 5.0
    spawn_prob: float = 0.05
    min_spawn_gap: float = 40.0
    spawn_y: float = 0.0
    max_steps: int = 500
    warmup_steps: int = 130
    feature_scale: float = 100.0
    expert_clearance: float = 10.0
    pad_value: float = PAD

    @property
    def lane_left(self) -> float:
        return self.ado_lane_x - self.lane_width / 2

    @property
    def lane_right(self) -> float:
        return self.ado_lane_x + self.lane_width / 2

    @property
    def despawn_y(self) -> float:
        return self.world_h + self.car_radius

    @property
    def visible_below(self) -> float:
        # ado cars just past the ego lane stay visible while they still constrain a crossing
        return self.ego_lane_y + self.lane_width


@dataclass(frozen=True)
class IntersectionState:
    ego_x: float
    ego_y: float
    ado: tuple[float, ...]  # ado centre y, ascending (newest at the top first)
    steps: int = 0
    entry_gap: Optional[float] = None  # measured once when the ego centre enters the lane
    done: bool = False
    rng: Optional[np.random.Generator] = field(default=None, compare=False, repr=False)


def _spawn_ok(ado: Sequence[float], params: IntersectionParams) -> bool:
    return not ado or ado[0] - params.spawn_y >= params.min_spawn_gap


def _advance_traffic(ado: tuple[float, ...], u: float, params: IntersectionParams) -> tuple[float, ...]:
    moved = tuple(y + params.ado_velocity for y in ado if y + params.ado_velocity <= params.despawn_y)
    if u < params.spawn_prob and _spawn_ok(moved, params):
        moved = (params.spawn_y,) + moved
    return moved


def straddling_gap(ado: Sequence[float], lane_y: float) -> float:
    """Centre distance between the nearest ado at/below ``lane_y`` and the nearest above it.

    A missing neighbour counts as infinitely far away.
    """
    above = [y for y in ado if y < lane_y]
    below = [y for y in ado if y >= lane_y]
    if not above or not below:
        return float("inf")
    return min(below) - max(above)


def intersection_reset(params: IntersectionParams = IntersectionParams(),
                       rng: Optional[np.random.Generator] = None, seed: Optional[int] = None) -> IntersectionState:
    if rng is None:
        rng = np.random.default_rng(seed)
    ado: tuple[float, ...] = ()
    for _ in range(params.warmup_steps):
        ado = _advance_traffic(ado, rng.random(), params)
    return IntersectionState(params.ego_start_x, params.ego_lane_y, ado, 0, None, False, rng)


def _collides(ego_x: float, ego_y: float, ado: Sequence[float], params: IntersectionParams) -> bool:
    lim = (2 * params.car_radius) ** 2
    dx2 = (ego_x - params.ado_lane_x) ** 2
    if dx2 >= lim:
        return False
    return any(dx2 + (y - ego_y) ** 2 < lim for y in ado)


def intersection_step(state: IntersectionState, action: int, task_gap: float,
                      params: IntersectionParams = IntersectionParams()) -> Transition:
    if state.done:
        raise TerminalStateError("cannot step a finished intersection episode")
    if action not in (STOP, GO):
        raise ValueError(f"invalid intersection action {action!r}")
    rng = state.rng
    if rng is None:
        raise ValueError("intersection state carries no generator")
    ego_x = state.ego_x + (params.ego_velocity if action == GO else 0.0)
    ado = _advance_traffic(state.ado, rng.random(), params)
    steps = state.steps + 1
    gap = state.entry_gap
    if gap is None and ego_x >= params.lane_left:
        gap = straddling_gap(ado, params.ego_lane_y)

    if _collides(ego_x, state.ego_y, ado, params):
        reward, outcome = R_COLLISION, COLLISION
    elif ego_x >= params.lane_right:
        if gap is not None and gap >= task_gap:
            reward, outcome = R_CROSS_SAFE, SUCCESS
        else:
            reward, outcome = R_CROSS_UNSAFE, UNSAFE_CROSS
    elif steps > params.max_steps:
        reward, outcome = R_FROZEN_CAR, FROZEN
    else:
        reward = R_PROGRESS if action == GO else R_NO_PROGRESS
        outcome = ONGOING
    terminal = outcome != ONGOING
    nxt = IntersectionState(ego_x, state.ego_y, ado, steps, gap, terminal, rng)
    return Transition(state, action, reward, nxt, terminal, outcome)


def visible_ado(ado: Sequence[float], params: IntersectionParams) -> list[float]:
    """Ado positions that can still constrain a crossing, nearest the line first.

    Includes cars just past the line (within one lane width) because they
    bound the gap from below.
    """
    vis = sorted((y for y in ado if y < params.visible_below), reverse=True)
    return vis[:N_VISIBLE_ADO]


def intersection_features(state: IntersectionState, params: IntersectionParams = IntersectionParams()) -> np.ndarray:
    s = params.feature_scale
    out = np.full(16, params.pad_value / s)
    vis = visible_ado(state.ado, params)
    out[:len(vis)] = np.asarray(vis) / s
    gap = straddling_gap(state.ado, params.ego_lane_y)
    out[10] = state.ego_x / s
    out[11] = state.ego_y / s
    out[12] = max(params.lane_right - state.ego_x, 0.0) / s
    out[13] = 1.0 if params.lane_left <= state.ego_x < params.lane_right else 0.0
    out[14] = 1.0 if gap >= 80.0 else 0.0
    out[15] = 1.0 if gap >= 120.0 else 0.0
    return out


# --------------------------------------------------------------------------
# Common episodic interface
# --------------------------------------------------------------------------

class GridEnv:
    name = "grid"
    n_actions = 4
    n_features = 2
    layer_dims = (2, 512, 4)

    def __init__(self, task: GridTask = GRID_ORIGINAL, start_mode: str = "fixed"):
        self.task = task
        self.start_mode = start_mode

    def reset(self, rng: np.random.Generator) -> GridState:
        return grid_reset(self.task, self.start_mode, rng)

    def step(self, state: GridState, action: int, rng=None) -> Transition:
        return grid_step(state, action, self.task)

    def features(self, state: GridState) -> np.ndarray:
        return grid_features(state)

    def success(self, trajectory: Sequence[Transition]) -> bool:
        return grid_success(trajectory, self.task)

    def with_task(self, task: GridTask) -> "GridEnv":
        return GridEnv(task, self.start_mode)

    @property
    def task_id(self) -> str:
        return self.task.name


class IntersectionEnv:
    name = "intersection"
    n_actions = 2
    n_features = 16
    layer_dims = (16, 1024, 2)

    def __init__(self, task_gap: float = 80.0, params: IntersectionParams = IntersectionParams()):
        if task_gap not in (80.0, 120.0):
            raise ValueError(f"task gap must be 80 or 120, got {task_gap}")
        self.task_gap = float(task_gap)
        self.params = params

    @property
    def task(self) -> float:
        return self.task_gap

    def reset(self, rng: np.random.Generator) -> IntersectionState:
        # each episode owns a child generator so episodes are reproducible individually
        child = np.random.default_rng(rng.integers(2**63))
        return intersection_reset(self.params, child)

    def step(self, state: IntersectionState, action: int, rng=None) -> Transition:
        return intersection_step(state, action, self.task_gap, self.params)

    def features(self, state: IntersectionState) -> np.ndarray:
        return intersection_features(state, self.params)

    def success(self, trajectory: Sequence[Transition]) -> bool:
        return bool(trajectory) and trajectory[-1].outcome == SUCCESS

    def with_task(self, task_gap: float) -> "IntersectionEnv":
        return IntersectionEnv(task_gap, self.params)

    @property
    def task_id(self) -> str:
        return f"gap{int(self.task_gap)}"


class IntersectionBatch:
    """Many intersection episodes advanced in lockstep with numpy arrays.

    Episode ``i`` consumes the same random numbers, in the same order, as a
    scalar episode started from ``IntersectionEnv.reset`` with the ``i``-th
    child seed, so both paths produce identical outcomes.
    """

    def __init__(self, env: IntersectionEnv, n: int, rng: np.random.Generator):
        p = self.params = env.params
        self.task_gap = env.task_gap
        self.n = n
        horizon = p.warmup_steps + p.max_steps + 1
        self.u = np.stack([np.random.default_rng(rng.integers(2**63)).random(horizon) for _ in range(n)])
        cap = int(np.ceil((p.despawn_y - p.spawn_y) / max(p.min_spawn_gap, 1e-9))) + 2
        self.ado = np.full((n, cap), np.nan)
        self.t = 0
        for _ in range(p.warmup_steps):
            self._traffic()
        self.ego_x = np.full(n, p.ego_start_x)
        self.steps = np.zeros(n, dtype=np.int64)
        self.gap = np.full(n, np.nan)
        self.done = np.zeros(n, dtype=bool)
        self.outcome = np.full(n, ONGOING, dtype=object)

    def _traffic(self):
        p = self.params
        u = self.u[:, self.t]
        self.t += 1
        self.ado += p.ado_velocity
        with np.errstate(invalid="ignore"):
            self.ado[self.ado > p.despawn_y] = np.nan
        first = self.ado[:, 0]
        ok = np.isnan(first) | (first - p.spawn_y >= p.min_spawn_gap)
        spawn = (u < p.spawn_prob) & ok
        if spawn.any():
            shifted = np.concatenate([np.full((self.n, 1), p.spawn_y), self.ado[:, :-1]], axis=1)
            self.ado = np.where(spawn[:, None], shifted, self.ado)

    def _straddling_gap(self) -> np.ndarray:
        lane_y = self.params.ego_lane_y
        with np.errstate(invalid="ignore"):
            above = np.where(self.ado < lane_y, self.ado, -np.inf).max(axis=1)
            below = np.where(self.ado >= lane_y, self.ado, np.inf).min(axis=1)
        gap = below - above
        gap[np.isinf(above) | np.isinf(below)] = np.inf
        return gap

    def features(self) -> np.ndarray:
        p = self.params
        s = p.feature_scale
        out = np.full((self.n, 16), p.pad_value / s)
        with np.errstate(invalid="ignore"):
            vis = np.where(self.ado < p.visible_below, self.ado, -np.inf)
        vis = -np.sort(-vis, axis=1)[:, :N_VISIBLE_ADO]
        mask = np.isfinite(vis)
        out[:, :vis.shape[1]] = np.where(mask, vis / s, p.pad_value / s)
        gap = self._straddling_gap()
        out[:, 10] = self.ego_x / s
        out[:, 11] = p.ego_lane_y / s
        out[:, 12] = np.maximum(p.lane_right - self.ego_x, 0.0) / s
        out[:, 13] = ((self.ego_x >= p.lane_left) & (self.ego_x < p.lane_right)).astype(float)
        out[:, 14] = (gap >= 80.0).astype(float)
        out[:, 15] = (gap >= 120.0).astype(float)
        return out

    def step(self, actions: np.ndarray) -> None:
        """Advance every unfinished episode by one action; finished ones are frozen in place."""
        p = self.params
        live = ~self.done
        go = (np.asarray(actions) == GO) & live
        self.ego_x = self.ego_x + np.where(go, p.ego_velocity, 0.0)
        prev = self.ado.copy()
        self._traffic()
        self.ado = np.where(live[:, None], self.ado, prev)
        self.steps += live
        entering = live & np.isnan(self.gap) & (self.ego_x >= p.lane_left)
        if entering.any():
            self.gap = np.where(entering, self._straddling_gap(), self.gap)
        lim = (2 * p.car_radius) ** 2
        dx2 = (self.ego_x - p.ado_lane_x) ** 2
        with np.errstate(invalid="ignore"):
            hit = ((dx2[:, None] + (self.ado - p.ego_lane_y) ** 2) < lim).any(axis=1) & (dx2 < lim)
        crossed = self.ego_x >= p.lane_right
        safe = crossed & ~np.isnan(self.gap) & (self.gap >= self.task_gap)
        frozen = self.steps > p.max_steps
        new = np.full(self.n, ONGOING, dtype=object)
        new[frozen] = FROZEN
        new[crossed] = UNSAFE_CROSS
        new[safe] = SUCCESS
        new[hit] = COLLISION
        new[~live] = self.outcome[~live]
        self.outcome = new
        self.done = self.outcome != ONGOING
