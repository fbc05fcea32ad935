import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dqnadapt import adapt, nnet
from dqnadapt.adapt import CorruptCheckpoint
from dqnadapt.envs import GRID_ADAPTED, GRID_ORIGINAL
from dqnadapt.qlearn import ConfigError, TrainConfig


def test_round_trip(tmp_path):
    net = nnet.init_network([2, 512, 4], 3, bias_init="uniform")
    path = adapt.save_checkpoint(net, {"note": "x"}, tmp_path / "a.ckpt")
    back, prov = adapt.load_checkpoint(path)
    assert back.layer_dims == net.layer_dims
    assert back.flat().tobytes() == net.flat().tobytes()
    assert prov == {"note": "x"}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=2, max_size=4), st.integers(0, 2**32 - 1))
def test_round_trip_bit_exact(tmp_path_factory, dims, seed):
    rng = np.random.default_rng(seed)
    net = nnet.NetParams.from_flat(dims, rng.normal(size=nnet.init_network(dims, 0).n_params()) * 1e3)
    path = tmp_path_factory.mktemp("ck") / "n.ckpt"
    adapt.save_checkpoint(net, {}, path)
    assert adapt.load_checkpoint(path)[0].flat().tobytes() == net.flat().tobytes()


def test_special_values_survive(tmp_path):
    net = nnet.NetParams.from_flat((1, 3), np.array([np.inf, -0.0, 5e-324, np.nan, 1.0, -1.0]))
    adapt.save_checkpoint(net, {}, tmp_path / "s.ckpt")
    back = adapt.load_checkpoint(tmp_path / "s.ckpt")[0]
    assert back.flat().tobytes() == net.flat().tobytes()


@pytest.mark.parametrize("damage", ["truncate", "magic", "version", "trailing"])
def test_corrupt_files_are_rejected(tmp_path, damage):
    path = adapt.save_checkpoint(nnet.init_network([2, 4, 4], 0), {"a": 1}, tmp_path / "c.ckpt")
    blob = path.read_bytes()
    if damage == "truncate":
        blob = blob[: len(blob) // 2]
    elif damage == "magic":
        blob = b"X" + blob[1:]
    elif damage == "version":
        blob = blob[:8] + (99).to_bytes(4, "little") + blob[12:]
    else:
        blob = blob + b"\0"
    path.write_bytes(blob)
    with pytest.raises(CorruptCheckpoint):
        adapt.load_checkpoint(path)


def test_save_leaves_no_temp_files(tmp_path):
    adapt.save_checkpoint(nnet.init_network([2, 4, 4], 0), {}, tmp_path / "m.ckpt")
    adapt.save_checkpoint(nnet.init_network([2, 4, 4], 1), {}, tmp_path / "m.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def test_adapt_task():
    assert adapt.adapt_task(GRID_ORIGINAL) == GRID_ADAPTED
    assert adapt.adapt_task(adapt.adapt_task(GRID_ORIGINAL)) == GRID_ORIGINAL
    assert adapt.adapt_task(80) == 120.0
    with pytest.raises(ValueError):
        adapt.adapt_task(120)


def test_dimension_mismatch(tmp_path):
    path = adapt.save_checkpoint(nnet.init_network([16, 1024, 2], 0), {"env": "intersection"}, tmp_path / "i.ckpt")
    with pytest.raises(ConfigError):
        adapt.retrain(path, TrainConfig(task="adapted", episodes=0))


def test_zero_episode_retrain_returns_base(tmp_path):
    net = nnet.init_network([2, 512, 4], 8, bias_init="uniform")
    path = adapt.save_checkpoint(net, {"env": "grid"}, tmp_path / "b.ckpt")
    rec = adapt.retrain(path, TrainConfig(task="adapted", episodes=0, eval_rollouts=10))
    assert rec.net.flat().tobytes() == net.flat().tobytes()
    assert rec.base["file_sha256"] == adapt.file_digest(path)


def test_retrain_does_not_mutate_base():
    net = nnet.init_network([2, 512, 4], 8, bias_init="uniform")
    before = net.flat().copy()
    adapt.retrain((net, {"env": "grid"}), TrainConfig(task="adapted", episodes=20, eval_every=10, eval_rollouts=5))
    assert np.array_equal(before, net.flat())


def test_provenance():
    cfg = TrainConfig(seed=4)
    prov = adapt.provenance_for(cfg)
    assert prov["config_hash"] == cfg.digest() and prov["seed"] == 4
