"""Deep Q-learning, behavioural cloning, and the training loop with periodic greedy evaluation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import nnet
from .envs import (
    GRID_ADAPTED, GRID_ORIGINAL, GridEnv, IntersectionEnv, IntersectionParams, Transition,
)
from .nnet import NetParams

ON_POLICY, RANDOM, EXPERT = "on_policy", "random", "expert"

ALGORITHMS: dict[str, tuple[str, ...]] = {
    "on_policy": (ON_POLICY,),
    "random_explore": (RANDOM,),
    "expert_demos": (EXPERT,),
    "alt_random_onpolicy": (RANDOM, ON_POLICY),
    "alt_random_expert": (RANDOM, EXPERT),
    "alt_onpolicy_expert": (ON_POLICY, EXPERT),
    "alt_random_onpolicy_expert": (RANDOM, ON_POLICY, EXPERT),
    "supervised": (),
}
ALGORITHM_ORDER = tuple(ALGORITHMS)

TAKEN_ACTION = "taken_action"
OVERWRITE_MAX = "overwrite_max"
EPISODE_SWEEP = "episode_sweep"
PER_STEP = "per_step"


class ConfigError(ValueError):
    pass


# (env, learner) -> (lr, gamma); learner is "supervised" or "dqn"
DEFAULT_HYPERS: dict[tuple[str, str], tuple[float, float]] = {
    ("grid", "supervised"): (1e-4, 1.0),
    ("grid", "dqn"): (1e-4, 1.0),
    ("intersection", "supervised"): (1e-3, 0.95),
    ("intersection", "dqn"): (1e-7, 0.95),
}


def episode_mode(algorithm: str, episode: int) -> str:
    cycle = ALGORITHMS[algorithm]
    if not cycle:
        raise ConfigError(f"{algorithm} has no action-selection cycle")
    return cycle[episode % len(cycle)]


def uses_expert(algorithm: str) -> bool:
    return algorithm == "supervised" or EXPERT in ALGORITHMS[algorithm]


@dataclass
class TrainConfig:
    env: str = "grid"
    task: str = "original"
    algorithm: str = "alt_onpolicy_expert"
    episodes: int = 20_000
    # None picks the per-environment default from DEFAULT_HYPERS
    lr: Optional[float] = None
    gamma: Optional[float] = None
    eval_every: int = 10
    eval_rollouts: int = 250
    seed: int = 0
    update_rule: str = TAKEN_ACTION
    update_timing: str = EPISODE_SWEEP
    base_checkpoint: Optional[str] = None
    start_mode: str = "random"
    hidden: Optional[int] = None
    bias_init: str = "uniform"
    compute_mse: Optional[bool] = None
    oracle_variant: str = "stationary"
    optimal_scope: str = "optimal_path"
    settle_level: float = 1.0
    # intersection geometry / traffic overrides, see IntersectionParams
    env_params: dict = field(default_factory=dict)

    def __post_init__(self):
        learner = "supervised" if self.algorithm == "supervised" else "dqn"
        lr, gamma = DEFAULT_HYPERS.get((self.env, learner), (1e-4, 1.0))
        if self.lr is None:
            self.lr = lr
        if self.gamma is None:
            self.gamma = gamma
        self.validate()

    def validate(self) -> None:
        if self.env not in ("grid", "intersection"):
            raise ConfigError(f"unknown env {self.env!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.env == "grid" and self.task not in ("original", "adapted"):
            raise ConfigError(f"unknown grid task {self.task!r}")
        if self.env == "intersection" and self.task not in ("original", "adapted", "gap80", "gap120"):
            raise ConfigError(f"unknown intersection task {self.task!r}")
        if int(self.episodes) != self.episodes or self.episodes < 0:
            raise ConfigError("episodes must be a non-negative integer")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.eval_every < 1 or self.eval_rollouts < 1:
            raise ConfigError("eval_every and eval_rollouts must be positive")
        if self.update_rule not in (TAKEN_ACTION, OVERWRITE_MAX):
            raise ConfigError(f"unknown update rule {self.update_rule!r}")
        if self.update_timing not in (EPISODE_SWEEP, PER_STEP):
            raise ConfigError(f"unknown update timing {self.update_timing!r}")
        if self.bias_init not in nnet.BIAS_INITS:
            raise ConfigError(f"unknown bias init {self.bias_init!r}")
        if self.start_mode not in ("fixed", "random"):
            raise ConfigError(f"unknown start mode {self.start_mode!r}")
        if self.oracle_variant not in ("stationary", "step_augmented"):
            raise ConfigError(f"unknown oracle variant {self.oracle_variant!r}")
        if self.optimal_scope not in ("optimal_path", "optimal_path_all_actions"):
            raise ConfigError(f"unknown optimal scope {self.optimal_scope!r}")
        if self.env == "intersection" and self.compute_mse:
            raise ConfigError("MSE metrics need the grid oracle; intersection has none")
        known = {f.name for f in fields(IntersectionParams)}
        bad = set(self.env_params) - known
        if bad:
            raise ConfigError(f"unknown environment parameters {sorted(bad)}")

    @property
    def wants_mse(self) -> bool:
        return self.env == "grid" if self.compute_mse is None else bool(self.compute_mse)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_env(config: TrainConfig):
    if config.env == "grid":
        task = GRID_ORIGINAL if config.task == "original" else GRID_ADAPTED
        return GridEnv(task, config.start_mode)
    gap = 120.0 if config.task in ("adapted", "gap120") else 80.0
    return IntersectionEnv(gap, IntersectionParams(**config.env_params))


def layer_dims_for(config: TrainConfig) -> tuple[int, ...]:
    if config.env == "grid":
        return (2, config.hidden or 512, 4)
    return (16, config.hidden or 1024, 2)


def make_expert(env):
    from .oracle import GridExpert, IntersectionExpert
    if isinstance(env, GridEnv):
        return GridExpert(env.task)
    return IntersectionExpert(env.task_gap, env.params)


@dataclass
class EvalPoint:
    episode: int
    accuracy: float
    mse_optimal: Optional[float] = None
    mse_all: Optional[float] = None


@dataclass
class RunRecord:
    evals: list[EvalPoint]
    net: NetParams
    config: dict
    settle_episode: Optional[int] = None
    plateau: Optional[float] = None
    base: Optional[dict] = None

    def final(self) -> EvalPoint:
        return self.evals[-1]


# --------------------------------------------------------------------------
# Action selection and updates
# --------------------------------------------------------------------------

def select_action(mode: str, net: NetParams, state, env, expert: Optional[Callable] = None,
                  rng: Optional[np.random.Generator] = None) -> int:
    if mode == ON_POLICY:
        return nnet.greedy_action(nnet.forward(net, env.features(state)))
    if mode == RANDOM:
        if rng is None:
            raise ValueError("random action selection needs a generator")
        return int(rng.integers(env.n_actions))
    if mode == EXPERT:
        if expert is None:
            raise ConfigError("expert mode needs an expert policy")
        return int(expert(state))
    raise ValueError(f"unknown selection mode {mode!r}")


def dqn_update(net: NetParams, trajectory: Sequence[Transition], gamma: float, lr: float,
               update_rule: str = TAKEN_ACTION, features: Callable = None) -> NetParams:
    """One Bellman regression step per transition, in trajectory order.

    The prediction is copied into a target vector and one entry is overwritten
    with ``r + gamma * max Q(s')`` (just ``r`` on terminal steps): the taken
    action's entry, or under ``overwrite_max`` the entry holding the current
    maximum.
    """
    if not trajectory:
        raise ValueError("empty trajectory")
    if features is None:
        raise ValueError("dqn_update needs the environment's feature encoder")
    for tr in trajectory:
        _dqn_step(net, features(tr.state), tr.action, tr.reward,
                  None if tr.terminal else features(tr.next_state), gamma, lr, update_rule)
    return net


def _dqn_step(net: NetParams, x: np.ndarray, action: int, reward: float, x_next: Optional[np.ndarray],
              gamma: float, lr: float, update_rule: str) -> float:
    pred = nnet.forward(net, x)
    q_new = reward if x_next is None else reward + gamma * float(np.max(nnet.forward(net, x_next)))
    target = pred.copy()
    idx = action if update_rule == TAKEN_ACTION else int(np.argmax(pred))
    target[idx] = q_new
    return nnet.fit_step(net, x, target, lr)


def supervised_update(net: NetParams, x: np.ndarray, expert_action: int, lr: float) -> NetParams:
    """Regress the output onto the one-hot vector of the expert action."""
    target = np.zeros(net.n_outputs)
    target[expert_action] = 1.0
    nnet.fit_step(net, np.asarray(x, dtype=np.float64), target, lr)
    return net


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    init_ss, train_ss = ss.spawn(2)
    return int(init_ss.generate_state(1)[0]), np.random.default_rng(train_ss)


def eval_rng(seed: int, eval_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7919, eval_index]))


def run_episode(env, net: NetParams, mode: str, rng: np.random.Generator, expert=None,
                on_step: Optional[Callable[[Transition], None]] = None) -> list[Transition]:
    state = env.reset(rng)
    traj = []
    while True:
        a = select_action(mode, net, state, env, expert, rng)
        tr = env.step(state, a)
        traj.append(tr)
        if on_step is not None:
            on_step(tr)
        if tr.terminal:
            return traj
        state = tr.next_state


def _supervised_states(env, net, rng, expert) -> list:
    if isinstance(env, GridEnv):
        from .envs import GridState
        return [GridState(y, x, 0) for (y, x) in env.task.white_cells()]
    states = []
    for mode in (EXPERT, RANDOM):
        states.extend(tr.state for tr in run_episode(env, net, mode, rng, expert))
    # consecutive states are strongly correlated; decorrelate the SGD sequence
    return [states[i] for i in rng.permutation(len(states))]


def train(config: TrainConfig, env=None, oracle=None, expert=None, init_net: Optional[NetParams] = None,
          progress: Optional[Callable[[EvalPoint], None]] = None) -> RunRecord:
    from . import metrics

    config.validate()
    env = env if env is not None else make_env(config)
    dims = layer_dims_for(config)
    init_seed, rng = _streams(config.seed)
    if init_net is not None:
        if tuple(init_net.layer_dims) != dims:
            raise ConfigError(f"base network dims {init_net.layer_dims} do not match {dims}")
        net = init_net.copy()
    else:
        net = nnet.init_network(dims, init_seed, config.bias_init)

    if uses_expert(config.algorithm) and expert is None:
        expert = make_expert(env)
    if config.wants_mse:
        if not isinstance(env, GridEnv):
            raise metrics.UnsupportedEnvironment("MSE metrics are only defined for the grid")
        if oracle is None:
            from .oracle import solve_grid_q
            oracle = solve_grid_q(env.task, config.gamma, config.oracle_variant)

    evals: list[EvalPoint] = []

    def evaluate(episode: int):
        point = metrics.evaluate(net, env, config.eval_rollouts, eval_rng(config.seed, len(evals)),
                                 oracle if config.wants_mse else None, config.optimal_scope)
        point.episode = episode
        evals.append(point)
        if progress is not None:
            progress(point)

    evaluate(0)
    feats = env.features
    lr, gamma, rule = config.lr, config.gamma, config.update_rule

    def online(tr: Transition):
        _dqn_step(net, feats(tr.state), tr.action, tr.reward,
                  None if tr.terminal else feats(tr.next_state), gamma, lr, rule)

    for ep in range(config.episodes):
        if config.algorithm == "supervised":
            for s in _supervised_states(env, net, rng, expert):
                supervised_update(net, feats(s), expert(s), lr)
        else:
            mode = episode_mode(config.algorithm, ep)
            if config.update_timing == PER_STEP:
                run_episode(env, net, mode, rng, expert, online)
            else:
                traj = run_episode(env, net, mode, rng, expert)
                dqn_update(net, traj, gamma, lr, rule, feats)
        if (ep + 1) % config.eval_every == 0:
            evaluate(ep + 1)

    if not net.all_finite():
        raise FloatingPointError("network parameters became non-finite during training")
    settle = metrics.settle_episode(evals, config.settle_level)
    plateau = None if settle is not None else metrics.plateau_accuracy(evals)
    return RunRecord(evals, net, config.to_dict(), settle, plateau)
