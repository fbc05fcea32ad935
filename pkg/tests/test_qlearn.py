from collections import Counter

import numpy as np
import pytest

from dqnadapt import nnet, qlearn
from dqnadapt.envs import GRID_ORIGINAL, LEFT, SUCCESS, UP, GridEnv, GridState, Transition
from dqnadapt.nnet import NetParams
from dqnadapt.oracle import GridExpert
from dqnadapt.qlearn import ConfigError, TrainConfig


def fixed_output_net(values):
    """A 2-input net whose output ignores the input."""
    values = np.asarray(values, dtype=float)
    return NetParams((2, len(values)), [np.zeros((len(values), 2))], [values.copy()])


def test_algorithm_cycles():
    assert qlearn.episode_mode("alt_random_onpolicy_expert", 0) == "random"
    assert qlearn.episode_mode("alt_random_onpolicy_expert", 4) == "on_policy"
    assert qlearn.episode_mode("alt_onpolicy_expert", 3) == "expert"
    assert qlearn.ALGORITHM_ORDER[5] == "alt_onpolicy_expert"
    with pytest.raises(ConfigError):
        qlearn.episode_mode("supervised", 0)


def test_on_policy_takes_argmax():
    env = GridEnv()
    net = fixed_output_net([1, 3, 2, 0])
    assert qlearn.select_action("on_policy", net, GridState(2, 2), env) == 1


def test_random_selection_is_uniform():
    env, rng = GridEnv(), np.random.default_rng(0)
    counts = Counter(qlearn.select_action("random", None, GridState(2, 2), env, rng=rng) for _ in range(10000))
    assert all(abs(counts[a] / 10000 - 0.25) <= 0.02 for a in range(4))


def test_expert_selection():
    assert qlearn.select_action("expert", None, GridState(1, 0), GridEnv(), GridExpert(GRID_ORIGINAL)) == UP


def test_dqn_target_touches_only_taken_action():
    env = GridEnv()
    net = nnet.init_network([2, 8, 4], 0, bias_init="uniform")
    x = env.features(GridState(0, 1, 2))
    pred = nnet.forward(net, x)
    # one SGD step toward the target: only the taken action's error is non-zero
    tr = Transition(GridState(0, 1, 2), LEFT, 20.0, GridState(0, 0, 3), True, SUCCESS)
    expected_target = pred.copy()
    expected_target[LEFT] = 20.0
    ref = net.copy()
    nnet.sgd_step(ref, nnet.backward_mse(ref, x, expected_target), 0.01)
    qlearn.dqn_update(net, [tr], 1.0, 0.01, features=env.features)
    np.testing.assert_allclose(net.flat(), ref.flat())


def test_overwrite_max_rule_replaces_argmax_entry():
    env = GridEnv()
    net = fixed_output_net([5.0, 1.0, 0.0, 0.0])
    tr = Transition(GridState(0, 1, 2), LEFT, 20.0, GridState(0, 0, 3), True, SUCCESS)
    qlearn.dqn_update(net, [tr], 1.0, 0.1, qlearn.OVERWRITE_MAX, env.features)
    assert net.biases[0][0] != 5.0
    assert net.biases[0][LEFT] == 0.0


def test_bellman_consistent_net_is_fixed_point():
    env = GridEnv()
    net = fixed_output_net([0.0, 0.0, 20.0, 0.0])
    before = net.flat()
    tr = Transition(GridState(0, 1, 2), LEFT, 20.0, GridState(0, 0, 3), True, SUCCESS)
    qlearn.dqn_update(net, [tr], 1.0, 0.1, features=env.features)
    assert np.array_equal(before, net.flat())


def test_single_state_mdp_converges():
    net = NetParams((1, 1), [np.array([[0.3]])], [np.zeros(1)])
    s = GridState(0, 0)
    tr = Transition(s, 0, 5.0, s, True, SUCCESS)
    feats = lambda state: np.array([1.0])
    for _ in range(10000):
        qlearn.dqn_update(net, [tr], 1.0, 1e-2, features=feats)
    assert abs(nnet.forward(net, [1.0])[0] - 5.0) < 1e-2


def test_supervised_update_fixed_point():
    net = fixed_output_net([0.0, 1.0, 0.0, 0.0])
    before = net.flat()
    qlearn.supervised_update(net, np.array([2.0, 2.0]), 1, 0.1)
    assert np.array_equal(before, net.flat())


def test_supervised_converges_to_expert():
    env, expert = GridEnv(), GridExpert(GRID_ORIGINAL)
    net = nnet.init_network([2, 64, 4], 0, bias_init="uniform")
    cells = GRID_ORIGINAL.white_cells()
    for _ in range(4000):
        for c in cells:
            qlearn.supervised_update(net, env.features(GridState(*c)), expert(GridState(*c)), 0.02)
    out = nnet.forward(net, np.array(cells, dtype=float))
    for c, row in zip(cells, out):
        assert int(np.argmax(row)) == expert(GridState(*c))
    assert np.all(out > -0.5) and np.all(out < 1.5)


@pytest.mark.parametrize("kw", [
    dict(env="maze"), dict(algorithm="sarsa"), dict(lr=0.0), dict(gamma=1.5), dict(episodes=-1),
    dict(update_rule="x"), dict(env="intersection", compute_mse=True), dict(env_params={"nope": 1}),
    dict(start_mode="corner"), dict(task="other"),
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_digest_is_stable():
    a, b = TrainConfig(seed=3), TrainConfig(seed=3)
    assert a.digest() == b.digest() != TrainConfig(seed=4).digest()


def test_zero_episodes_keeps_network():
    rec = qlearn.train(TrainConfig(episodes=0, eval_rollouts=20))
    assert len(rec.evals) == 1 and rec.evals[0].episode == 0
    init_seed, _ = qlearn._streams(0)
    fresh = nnet.init_network((2, 512, 4), init_seed, "uniform")
    assert np.array_equal(rec.net.flat(), fresh.flat())


def test_training_is_deterministic():
    cfg = TrainConfig(algorithm="alt_random_onpolicy_expert", episodes=60, eval_every=20, eval_rollouts=30, seed=5)
    a, b = qlearn.train(cfg), qlearn.train(cfg)
    assert [vars(e) for e in a.evals] == [vars(e) for e in b.evals]
    assert np.array_equal(a.net.flat(), b.net.flat())


def test_eval_cadence():
    rec = qlearn.train(TrainConfig(algorithm="expert_demos", episodes=50, eval_every=10, eval_rollouts=10))
    assert [e.episode for e in rec.evals] == [0, 10, 20, 30, 40, 50]
    assert all(e.mse_optimal is not None and e.mse_all is not None for e in rec.evals)


def test_short_grid_run_learns():
    cfg = TrainConfig(algorithm="alt_onpolicy_expert", episodes=3000, eval_every=500, eval_rollouts=60, seed=1)
    rec = qlearn.train(cfg)
    first, last = rec.evals[0], rec.final()
    assert last.accuracy > first.accuracy + 0.3
    assert last.mse_optimal < first.mse_optimal / 5


def test_intersection_run_has_no_mse():
    cfg = TrainConfig(env="intersection", algorithm="supervised", episodes=3, eval_every=3, eval_rollouts=5,
                      lr=1e-3, gamma=0.99)
    rec = qlearn.train(cfg)
    assert rec.final().mse_all is None
    assert rec.net.layer_dims == (16, 1024, 2)


def test_per_environment_defaults():
    assert (TrainConfig().lr, TrainConfig().gamma) == qlearn.DEFAULT_HYPERS[("grid", "dqn")]
    sup = TrainConfig(env="intersection", algorithm="supervised")
    assert (sup.lr, sup.gamma) == qlearn.DEFAULT_HYPERS[("intersection", "supervised")]
    assert TrainConfig(env="intersection", algorithm="on_policy", lr=0.5).lr == 0.5
