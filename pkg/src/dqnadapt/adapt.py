"""Checkpoints and retraining a base network on the modified task.

Checkpoint layout (all little-endian)::

    b"DQNCKPT\\0"            8-byte magic
    uint32 version
    uint32 n_layers_dims, then that many uint32 layer sizes
    float64[...] parameters, layer by layer, weights (row-major) then biases
    uint32 metadata length, then UTF-8 JSON provenance
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .envs import GRID_ADAPTED, GRID_ORIGINAL, GridTask
from .nnet import NetParams
from .qlearn import ConfigError, RunRecord, TrainConfig, layer_dims_for, train

MAGIC = b"DQNCKPT\0"
VERSION = 1
_U32 = struct.Struct("<I")


class CorruptCheckpoint(ValueError):
    pass


def save_checkpoint(net: NetParams, provenance: dict, path: Union[str, Path]) -> Path:
    """Write atomically: temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    dims = net.layer_dims
    meta = json.dumps(provenance, sort_keys=True).encode("utf-8")
    blob = b"".join([
        MAGIC,
        _U32.pack(VERSION),
        _U32.pack(len(dims)),
        struct.pack(f"<{len(dims)}I", *dims),
        net.flat().astype("<f8").tobytes(),
        _U32.pack(len(meta)),
        meta,
    ])
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[NetParams, dict]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CorruptCheckpoint(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    (version,) = _U32.unpack(take(4))
    if version != VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    (n_dims,) = _U32.unpack(take(4))
    if not 2 <= n_dims <= 64:
        raise CorruptCheckpoint(f"{path}: implausible layer count {n_dims}")
    dims = struct.unpack(f"<{n_dims}I", take(4 * n_dims))
    if min(dims) < 1:
        raise CorruptCheckpoint(f"{path}: zero-width layer")
    n_params = sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(n_dims - 1))
    payload = np.frombuffer(take(8 * n_params), dtype="<f8").astype(np.float64)
    (n_meta,) = _U32.unpack(take(4))
    meta_raw = take(n_meta)
    if pos != len(data):
        raise CorruptCheckpoint(f"{path}: {len(data) - pos} trailing bytes")
    try:
        provenance = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable metadata ({exc})") from exc
    return NetParams.from_flat(dims, payload), provenance


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def provenance_for(config: TrainConfig, env_id: Optional[str] = None) -> dict:
    return {
        "config_hash": config.digest(),
        "env": env_id or config.env,
        "task": config.task,
        "algorithm": config.algorithm,
        "episodes": config.episodes,
        "seed": config.seed,
    }


def adapt_task(task):
    """The modified task: grid goal and hazard swap places, intersection gap 80 -> 120."""
    if isinstance(task, GridTask):
        name = {"original": "adapted", "adapted": "original"}.get(task.name, task.name)
        return GridTask(goal=task.hazard, hazard=task.goal, obstacle=task.obstacle, name=name)
    if isinstance(task, (int, float)) and not isinstance(task, bool):
        if float(task) == 80.0:
            return 120.0
        raise ValueError(f"only the 80 px crossing task has an adapted variant, got {task}")
    if task in ("original", "gap80"):
        return "adapted"
    raise ValueError(f"cannot adapt task {task!r}")


def retrain(base: Union[str, Path, tuple[NetParams, dict]], config: TrainConfig, **train_kwargs) -> RunRecord:
    """Train exactly like ``train`` but starting from the base network's parameters."""
    if isinstance(base, (str, Path)):
        digest = file_digest(base)
        net, prov = load_checkpoint(base)
        prov = dict(prov, file_sha256=digest, path=str(base))
    else:
        net, prov = base
        prov = dict(prov)
    dims = layer_dims_for(config)
    if tuple(net.layer_dims) != dims:
        raise ConfigError(f"base network has dims {net.layer_dims}, {config.env} needs {dims}")
    if prov.get("env") not in (None, config.env):
        raise ConfigError(f"base was trained on {prov['env']!r}, not {config.env!r}")
    record = train(config, init_net=net, **train_kwargs)
    record.base = prov
    return record


# Base-model recipes. The DQN base uses a larger step size than the table
# defaults and is extended in chunks until it is a faithful Q-approximator.
ONEHOT_BASE = dict(algorithm="supervised", episodes={"grid": 20000, "intersection": 15000}, lr=None)
DQN_BASE = dict(algorithm="alt_random_expert", episodes={"grid": 40000, "intersection": 100000},
                lr={"grid": 1e-3, "intersection": None})
DQN_BASE_MSE = 50.0
DQN_BASE_EXTEND = 10000
DQN_BASE_MAX_EXTENSIONS = 6


def _base_config(recipe: dict, env: str, seed: int, **overrides) -> TrainConfig:
    task = "original" if env == "grid" else "gap80"
    kw = dict(env=env, task=task, algorithm=recipe["algorithm"], episodes=recipe["episodes"][env], seed=seed)
    lr = recipe["lr"] and recipe["lr"].get(env)
    if lr:
        kw["lr"] = lr
    kw.update(overrides)
    return TrainConfig(**kw)


def build_onehot_base(env: str = "grid", seed: int = 0, **overrides) -> tuple[NetParams, dict, RunRecord]:
    """Behavioral-cloning base on the original task."""
    config = _base_config(ONEHOT_BASE, env, seed, **overrides)
    record = train(config)
    return record.net, dict(provenance_for(config), base_kind="onehot"), record


def dqn_base_ok(record: RunRecord) -> bool:
    last = record.evals[-1]
    if last.accuracy < 1.0 - 1e-12:
        return False
    return last.mse_all is None or last.mse_all < DQN_BASE_MSE


def build_dqn_base(env: str = "grid", seed: int = 0, **overrides) -> tuple[NetParams, dict, RunRecord]:
    """Q-learning base on the original task.

    On the grid, training continues in chunks from the current weights until
    the final evaluation has accuracy 1 and MSEq below ``DQN_BASE_MSE`` (or the
    extension cap is hit, which is recorded in the provenance).
    """
    config = _base_config(DQN_BASE, env, seed, **overrides)
    record = train(config)
    extensions = 0
    if env == "grid":
        while not dqn_base_ok(record) and extensions < DQN_BASE_MAX_EXTENSIONS:
            extensions += 1
            more = replace(config, episodes=DQN_BASE_EXTEND, seed=config.seed + 1000 * extensions)
            record = train(more, init_net=record.net)
    prov = dict(provenance_for(config), base_kind="dqn", extensions=extensions,
                meets_target=bool(env != "grid" or dqn_base_ok(record)))
    return record.net, prov, record
