"""Task accuracy, Q-value MSE against the oracle, and the settle statistic."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import nnet
from .envs import (
    GRID_ACTIONS, GRID_START, SUCCESS, GridEnv, GridState, IntersectionBatch, IntersectionEnv,
    grid_reset, grid_step, grid_success,
)
from .nnet import NetParams
from .oracle import STEP_AUGMENTED, QTable, optimal_path
from .qlearn import EvalPoint

SCOPE_ALL = "all"
SCOPE_OPTIMAL = "optimal_path"
SCOPE_OPTIMAL_WIDE = "optimal_path_all_actions"


class UnsupportedEnvironment(ValueError):
    pass


def grid_policy(net: NetParams, env: GridEnv) -> dict:
    """Greedy action per non-terminal cell; features do not include the step count."""
    cells = env.task.nonterminal_cells()
    q = nnet.forward(net, np.array(cells, dtype=np.float64))
    return {c: int(np.argmax(row)) for c, row in zip(cells, q)}


def grid_rollout(policy: dict, env: GridEnv, start: GridState) -> list:
    state, traj = start, []
    while True:
        tr = grid_step(state, policy[state.cell], env.task)
        traj.append(tr)
        if tr.terminal:
            return traj
        state = tr.next_state


def accuracy(net: NetParams, env, n_rollouts: int, rng: np.random.Generator) -> float:
    """Fraction of greedy rollouts that accomplish the task."""
    if n_rollouts < 1:
        raise ValueError("need at least one rollout")
    if isinstance(env, GridEnv):
        policy = grid_policy(net, env)
        cache: dict = {}
        wins = 0
        for _ in range(n_rollouts):
            start = grid_reset(env.task, env.start_mode, rng)
            if start not in cache:
                cache[start] = grid_success(grid_rollout(policy, env, start), env.task)
            wins += cache[start]
        return wins / n_rollouts
    if isinstance(env, IntersectionEnv):
        return float(np.mean(intersection_outcomes(net, env, n_rollouts, rng) == SUCCESS))
    raise UnsupportedEnvironment(f"no accuracy metric for {type(env).__name__}")


def intersection_outcomes(net: NetParams, env: IntersectionEnv, n: int, rng: np.random.Generator,
                          policy=None) -> np.ndarray:
    """Terminal outcome labels of ``n`` greedy rollouts (or rollouts of ``policy(batch)``)."""
    batch = IntersectionBatch(env, n, rng)
    while not batch.done.all():
        if policy is None:
            actions = np.argmax(nnet.forward(net, batch.features()), axis=1)
        else:
            actions = policy(batch)
        batch.step(actions)
    return batch.outcome


def start_cells(env=None) -> tuple:
    """Cells an episode of ``env`` may start from (the fixed corner by default)."""
    if isinstance(env, GridEnv) and env.start_mode == "random":
        return tuple(env.task.white_cells())
    return (GRID_START,)


def scope_pairs(table: QTable, scope: str, starts=(GRID_START,)) -> list[tuple]:
    """(cell, action, step) triples over which an MSE is taken.

    ``all`` covers the six white cells; the step index only matters for the
    step-augmented table, where off-path cells are read at step 1. The
    optimal scopes take the union of the optimal paths from every start cell.
    """
    if scope == SCOPE_ALL:
        return [(c, a, 1) for c in table.task.white_cells() for a in GRID_ACTIONS]
    if scope not in (SCOPE_OPTIMAL, SCOPE_OPTIMAL_WIDE):
        raise ValueError(f"unknown MSE scope {scope!r}")
    first: dict = {}  # (cell, action) -> earliest step it is reached at
    for start in starts:
        for k, (c, a) in enumerate(optimal_path(table, start)):
            for b in (GRID_ACTIONS if scope == SCOPE_OPTIMAL_WIDE else (a,)):
                first[(c, b)] = min(k, first.get((c, b), k))
    return [(c, b, k) for (c, b), k in first.items()]


def mse_q(net: NetParams, table: QTable, scope: str = SCOPE_ALL, env=None) -> float:
    if env is not None and not isinstance(env, GridEnv):
        raise UnsupportedEnvironment("Q-value MSE needs the grid oracle")
    if net.n_inputs != 2 or net.n_outputs != 4:
        raise UnsupportedEnvironment(f"network dims {net.layer_dims} are not a grid network")
    pairs = scope_pairs(table, scope, start_cells(env))
    cells = sorted({c for c, _, _ in pairs})
    out = dict(zip(cells, nnet.forward(net, np.array(cells, dtype=np.float64))))
    step_aware = table.variant == STEP_AUGMENTED
    err = [out[c][a] - table.q(c, a, k if step_aware else 0) for c, a, k in pairs]
    return float(np.mean(np.square(err)))


def evaluate(net: NetParams, env, n_rollouts: int, rng: np.random.Generator,
             table: Optional[QTable] = None, optimal_scope: str = SCOPE_OPTIMAL) -> EvalPoint:
    acc = accuracy(net, env, n_rollouts, rng)
    if table is None:
        return EvalPoint(0, acc)
    return EvalPoint(0, acc, mse_q(net, table, optimal_scope, env), mse_q(net, table, SCOPE_ALL, env))


def settle_episode(evals: Sequence[EvalPoint], level: float = 1.0) -> Optional[int]:
    """First eval episode from which accuracy never drops below ``level`` again."""
    if not evals:
        raise ValueError("no evaluations")
    settle = None
    for point in reversed(evals):
        if point.accuracy >= level:
            settle = point.episode
        else:
            break
    return settle


def plateau_accuracy(evals: Sequence[EvalPoint], fraction: float = 0.25) -> float:
    """Mean accuracy over the last ``fraction`` of evaluations."""
    if not evals:
        raise ValueError("no evaluations")
    k = max(1, int(round(len(evals) * fraction)))
    return float(np.mean([p.accuracy for p in evals[-k:]]))


def rolling_accuracy(evals: Sequence[EvalPoint], window: int = 3) -> np.ndarray:
    """Trailing mean of the last ``window`` accuracies at each evaluation."""
    if window < 1:
        raise ValueError("window must be positive")
    acc = np.array([p.accuracy for p in evals], dtype=float)
    out = np.empty_like(acc)
    for i in range(len(acc)):
        out[i] = acc[max(0, i - window + 1): i + 1].mean()
    return out


def first_reaching(evals: Sequence[EvalPoint], level: float, window: int = 3) -> Optional[int]:
    """Earliest eval episode whose rolling accuracy (full window only) is at least ``level``."""
    roll = rolling_accuracy(evals, window)
    for i in range(window - 1, len(evals)):
        if roll[i] >= level - 1e-12:
            return evals[i].episode
    return None


def window_mean(evals: Sequence[EvalPoint], lo: int, hi: int) -> float:
    """Mean accuracy of evals with ``lo <= episode < hi``."""
    acc = [p.accuracy for p in evals if lo <= p.episode < hi]
    if not acc:
        raise ValueError(f"no evaluations in [{lo}, {hi})")
    return float(np.mean(acc))


def tail_std(evals: Sequence[EvalPoint], fraction: float = 0.5) -> float:
    """Standard deviation of accuracy over the last ``fraction`` of evals."""
    k = max(1, int(round(len(evals) * fraction)))
    return float(np.std([p.accuracy for p in evals[-k:]]))
