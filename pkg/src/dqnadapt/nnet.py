"""Small fully-connected ReLU network trained with per-sample SGD on an MSE loss.

Hidden layers use ReLU, the output layer is linear. Everything is float64.
Weight matrices are stored ``(out, in)`` so that ``W @ x`` maps a layer's input
to its pre-activation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class NetParams:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("number of layers does not match layer_dims")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i + 1], self.layer_dims[i])
            if W.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: expected weight {shape}, got {W.shape}")

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "NetParams":
        return NetParams(self.layer_dims, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        """All parameters as one vector, layer by layer, weights (row-major) before biases."""
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, layer_dims: Sequence[int], payload: np.ndarray) -> "NetParams":
        dims = tuple(int(d) for d in layer_dims)
        expected = sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))
        payload = np.asarray(payload, dtype=np.float64)
        if payload.shape != (expected,):
            raise ValueError(f"payload has {payload.size} values, dims {dims} need {expected}")
        weights, biases, k = [], [], 0
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            weights.append(payload[k:k + n_in * n_out].reshape(n_out, n_in).copy())
            k += n_in * n_out
            biases.append(payload[k:k + n_out].copy())
            k += n_out
        return cls(dims, weights, biases)

    def all_finite(self) -> bool:
        return all(np.isfinite(W).all() and np.isfinite(b).all() for W, b in zip(self.weights, self.biases))


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    loss: float = field(default=0.0)


def _check_dims(layer_dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(layer_dims)
    if len(dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output size")
    if any(int(d) != d or d < 1 for d in dims):
        raise ValueError(f"layer sizes must be positive integers, got {dims}")
    return tuple(int(d) for d in dims)


BIAS_INITS = ("zero", "uniform")


def init_network(layer_dims: Sequence[int], seed: int, bias_init: str = "zero") -> NetParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.

    Biases are zero by default. ``bias_init="uniform"`` draws them from the
    same range as the weights; without that, a bias-free ReLU layer is
    positively homogeneous in its input, so grid cells on one ray from the
    origin, such as (1, 1) and (2, 2), start out with proportional outputs.
    """
    dims = _check_dims(layer_dims)
    if bias_init not in BIAS_INITS:
        raise ValueError(f"unknown bias init {bias_init!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        if bias_init == "uniform":
            biases.append(rng.uniform(-bound, bound, size=n_out))
        else:
            biases.append(np.zeros(n_out))
    return NetParams(dims, weights, biases)


def _as_input(net: NetParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (net.n_inputs,):
        raise ValueError(f"input has shape {x.shape}, network expects {net.n_inputs} features")
    return x


def forward(net: NetParams, x) -> np.ndarray:
    """Network output for one input vector, or a batch of shape (n, n_inputs)."""
    a = _as_input(net, x)
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ W.T + b
        if i < last:
            a = np.maximum(a, 0.0)
    return a


def _forward_cache(net: NetParams, x: np.ndarray):
    acts, pre = [x], []
    a = x
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = W @ a + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < last else z
        acts.append(a)
    return acts, pre


def _backprop(net: NetParams, acts, pre, err: np.ndarray) -> Gradients:
    # err is dL/d(output)
    n = len(net.weights)
    gW: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    delta = err
    for i in range(n - 1, -1, -1):
        gW[i] = np.outer(delta, acts[i])
        gb[i] = delta
        if i > 0:
            delta = (net.weights[i].T @ delta) * (pre[i - 1] > 0.0)
    return Gradients(gW, gb)


def backward_mse(net: NetParams, x, target) -> Gradients:
    """Loss ``mean((forward(x) - target)**2)`` and its exact gradient."""
    x = _as_input(net, x)
    if x.ndim != 1:
        raise ValueError("backward_mse takes a single input vector")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (net.n_outputs,):
        raise ValueError(f"target has shape {target.shape}, network outputs {net.n_outputs}")
    acts, pre = _forward_cache(net, x)
    diff = acts[-1] - target
    grads = _backprop(net, acts, pre, diff * (2.0 / diff.size))
    grads.loss = float(np.mean(diff * diff))
    return grads


def sgd_step(net: NetParams, grads: Gradients, lr: float) -> NetParams:
    """In-place ``param -= lr * grad``; returns ``net`` for chaining."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if len(grads.weights) != len(net.weights) or len(grads.biases) != len(net.biases):
        raise ValueError("gradient layer count does not match network")
    for W, b, gW, gb in zip(net.weights, net.biases, grads.weights, grads.biases):
        if gW.shape != W.shape or gb.shape != b.shape:
            raise ValueError("gradient shapes do not match network")
    for W, b, gW, gb in zip(net.weights, net.biases, grads.weights, grads.biases):
        W -= lr * gW
        b -= lr * gb
    return net


def fit_step(net: NetParams, x: np.ndarray, target: np.ndarray, lr: float) -> float:
    """Fused backward_mse + sgd_step for the training loops. Returns the loss before the step."""
    acts, pre = _forward_cache(net, x)
    diff = acts[-1] - target
    delta = diff * (2.0 / diff.size)
    for i in range(len(net.weights) - 1, -1, -1):
        W = net.weights[i]
        if i > 0:
            nxt = (W.T @ delta) * (pre[i - 1] > 0.0)
        W -= lr * np.outer(delta, acts[i])
        net.biases[i] -= lr * delta
        if i > 0:
            delta = nxt
    return float(np.mean(diff * diff))


def greedy_action(q: np.ndarray) -> int:
    """Argmax with ties going to the lowest action index."""
    return int(np.argmax(q))
