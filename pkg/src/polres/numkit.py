"""Minimal numeric kernel: small fully-connected nets with exact gradients.

Everything is float64 and pure: parameters travel as flat vectors, ops
return new arrays and never mutate their inputs.

Canonical parameter layout for an arch with layers L1..Lk (hidden dims
then output): W1 row-major (fan_out x fan_in, C order), b1, W2, b2, ...
Weight row i holds the incoming weights of output unit i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class NetArch:
    """Shape of a small MLP; the activation applies to hidden layers only."""

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden dims must be >= 1")
        if len(self.hidden) > 4:
            raise ValueError("at most 4 hidden layers")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, input to output."""
        dims = (self.input_dim, *self.hidden, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims())


def unpack_params(arch: NetArch, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into (W, b) views per layer. W has shape (fan_out, fan_in)."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (arch.param_count(),):
        raise ValueError(
            f"expected {arch.param_count()} parameters, got shape {params.shape}"
        )
    layers = []
    off = 0
    for fi, fo in arch.layer_dims():
        w = params[off : off + fi * fo].reshape(fo, fi)
        off += fi * fo
        b = params[off : off + fo]
        off += fo
        layers.append((w, b))
    return layers


def pack_params(arch: NetArch, layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    flat = [np.concatenate([w.ravel(), b]) for w, b in layers]
    out = np.concatenate(flat)
    if out.shape != (arch.param_count(),):
        raise ValueError("layer shapes do not match arch")
    return out.astype(np.float64)


def net_init(arch: NetArch, seed: int) -> np.ndarray:
    """Scaled-uniform weights with bound sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fi, fo in arch.layer_dims():
        bound = np.sqrt(6.0 / (fi + fo))
        w = rng.uniform(-bound, bound, size=(fo, fi))
        b = np.zeros(fo)
        layers.append((w, b))
    return pack_params(arch, layers)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_deriv(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # a is the already-computed activation value at z
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(np.float64)


def _forward_cached(arch, params, x2d):
    """Forward pass keeping pre- and post-activations for backprop."""
    layers = unpack_params(arch, params)
    acts = [x2d]
    pre = []
    a = x2d
    for idx, (w, b) in enumerate(layers):
        z = a @ w.T + b
        pre.append(z)
        if idx < len(layers) - 1:
            a = _activate(arch.activation, z)
        else:
            a = z
        acts.append(a)
    return layers, acts, pre


def net_forward_batch(arch: NetArch, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Forward a (batch, input_dim) matrix; returns (batch, output_dim)."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ValueError(f"expected (batch, {arch.input_dim}) input, got {x.shape}")
    _, acts, _ = _forward_cached(arch, params, x)
    return acts[-1]


def net_forward(arch: NetArch, params: np.ndarray, inputs) -> np.ndarray:
    """Forward a single input vector."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape != (arch.input_dim,):
        raise ValueError(f"expected input of length {arch.input_dim}, got {x.shape}")
    return net_forward_batch(arch, params, x[None, :])[0]


def net_backward_batch(
    arch: NetArch, params: np.ndarray, inputs: np.ndarray, output_grads: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop a batch of output gradients.

    Returns (param_grad, input_grads): the parameter gradient is summed
    over the batch, input_grads has one row per sample.
    """
    x = np.asarray(inputs, dtype=np.float64)
    g = np.asarray(output_grads, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ValueError(f"expected (batch, {arch.input_dim}) input, got {x.shape}")
    if g.shape != (x.shape[0], arch.output_dim):
        raise ValueError(f"expected (batch, {arch.output_dim}) output grad, got {g.shape}")

    layers, acts, pre = _forward_cached(arch, params, x)
    grads = [None] * len(layers)
    delta = g
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        dw = delta.T @ acts[idx]
        db = delta.sum(axis=0)
        grads[idx] = (dw, db)
        delta = delta @ w
        if idx > 0:
            delta = delta * _activate_deriv(arch.activation, pre[idx - 1], acts[idx])
    return pack_params(arch, grads), delta


def net_backward(
    arch: NetArch, params: np.ndarray, inputs, output_grad
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of output . output_grad w.r.t. params and the input."""
    x = np.asarray(inputs, dtype=np.float64)
    g = np.asarray(output_grad, dtype=np.float64)
    if x.shape != (arch.input_dim,):
        raise ValueError(f"expected input of length {arch.input_dim}, got {x.shape}")
    if g.shape != (arch.output_dim,):
        raise ValueError(f"expected output grad of length {arch.output_dim}, got {g.shape}")
    pgrad, igrad = net_backward_batch(arch, params, x[None, :], g[None, :])
    return pgrad, igrad[0]


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError("params and grad must have the same shape")
    return params - lr * grad


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators; t counts completed steps."""

    t: int
    m: np.ndarray
    v: np.ndarray


def adam_init(n: int) -> AdamState:
    return AdamState(t=0, m=np.zeros(n), v=np.zeros(n))


def adam_step(
    state: AdamState,
    params: np.ndarray,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[AdamState, np.ndarray]:
    """Bias-corrected Adam update; returns the new state and parameters."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError("mismatched shapes in adam_step")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(t=t, m=m, v=v), new_params
