"""Learnable environment-dynamics models: losses, adaptation, prediction.

Continuous models regress the state delta s' - s from a normalized
(state, one-hot action) input; discrete models emit categorical logits
over successor states. The continuous loss is a sum of squared errors
over the batch, the discrete loss a mean cross entropy (kept as-is, so
their effective learning rates differ with batch size).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numkit
from .envs import CartpoleState, GridState, Transition, GRID_SIZE

CONTINUOUS = "continuous"
DISCRETE = "discrete"


@dataclass(frozen=True)
class Normalizer:
    """Affine scaling for a continuous model, x -> (x - mean) / scale.

    mean/scale cover input_dim + output_dim entries: the first block
    normalizes raw (state, one-hot action) inputs, the trailing block the
    delta regression targets, whose predictions are denormalized on the
    way out. Dimensions with near-zero variance keep a floor scale.
    """

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        scale = np.asarray(self.scale, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        if mean.shape != scale.shape or mean.ndim != 1:
            raise ValueError("normalizer mean/scale must be 1-D and same length")
        if np.any(scale <= 0.0):
            raise ValueError("normalizer scales must be positive")

    def split(self, input_dim: int, output_dim: int):
        if len(self.mean) != input_dim + output_dim:
            raise ValueError(
                f"normalizer covers {len(self.mean)} dims, model needs {input_dim + output_dim}"
            )
        return (
            (self.mean[:input_dim], self.scale[:input_dim]),
            (self.mean[input_dim:], self.scale[input_dim:]),
        )


def identity_normalizer(dim: int) -> Normalizer:
    return Normalizer(mean=np.zeros(dim), scale=np.ones(dim))


def normalizer_from_moments(
    count: float, total: np.ndarray, total_sq: np.ndarray, floor: float = 1e-3
) -> Normalizer:
    """Build a normalizer from pooled first/second moments."""
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    return Normalizer(mean=mean, scale=np.maximum(np.sqrt(var), floor))


@dataclass(frozen=True)
class DynamicsModel:
    """Parameterized next-state predictor; immutable value."""

    kind: str
    arch: numkit.NetArch
    params: np.ndarray
    normalizer: Normalizer | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, DISCRETE):
            raise ValueError(f"unknown model kind {self.kind!r}")
        params = np.asarray(self.params, dtype=np.float64)
        object.__setattr__(self, "params", params)
        if params.shape != (self.arch.param_count(),):
            raise ValueError("params length does not match arch")
        if self.kind == DISCRETE and self.normalizer is not None:
            raise ValueError("discrete models take no normalizer")

    @property
    def state_dim(self) -> int:
        # continuous: output is the state delta; discrete: output is |S| logits
        return self.arch.output_dim

    @property
    def n_actions(self) -> int:
        return self.arch.input_dim - self.arch.output_dim


@dataclass(frozen=True)
class EnsembleModel:
    """Independently initialized models over one arch/kind."""

    members: tuple[DynamicsModel, ...]

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if m.kind != first.kind or m.arch != first.arch:
                raise ValueError("ensemble members must share kind and arch")

    @property
    def kind(self) -> str:
        return self.members[0].kind


@dataclass(frozen=True)
class SupportQuerySplit:
    support: tuple[Transition, ...]
    query: tuple[Transition, ...]


TransitionBatch = Sequence[Transition]


# --- input/target encoding ---


def _one_hot(indices: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(indices), width))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def continuous_batch_arrays(batch: TransitionBatch, n_actions: int):
    """Raw inputs (state ++ one-hot action) and delta targets for a continuous batch."""
    states = np.array([_state_array(t.s) for t in batch])
    nexts = np.array([_state_array(t.s_next) for t in batch])
    actions = np.array([t.a for t in batch], dtype=np.intp)
    inputs = np.concatenate([states, _one_hot(actions, n_actions)], axis=1)
    return inputs, nexts - states


def discrete_batch_arrays(batch: TransitionBatch, n_states: int, n_actions: int):
    """One-hot (state, action) inputs and successor cell indices for a discrete batch."""
    cells = np.array([t.s.cell for t in batch], dtype=np.intp)
    actions = np.array([t.a for t in batch], dtype=np.intp)
    targets = np.array([t.s_next.cell for t in batch], dtype=np.intp)
    inputs = np.concatenate([_one_hot(cells, n_states), _one_hot(actions, n_actions)], axis=1)
    return inputs, targets


def _scaling(model: DynamicsModel):
    norm = model.normalizer or identity_normalizer(model.arch.input_dim + model.arch.output_dim)
    return norm.split(model.arch.input_dim, model.arch.output_dim)


def _model_inputs(model: DynamicsModel, batch: TransitionBatch):
    if model.kind == CONTINUOUS:
        raw, deltas = continuous_batch_arrays(batch, model.n_actions)
        (imean, iscale), (dmean, dscale) = _scaling(model)
        return (raw - imean) / iscale, (deltas - dmean) / dscale
    inputs, targets = discrete_batch_arrays(batch, model.state_dim, model.n_actions)
    return inputs, targets


def _check_kind(model: DynamicsModel, batch: TransitionBatch, expected: str):
    if model.kind != expected:
        raise ValueError(f"expected a {expected} model, got {model.kind}")
    if not batch:
        raise ValueError("empty transition batch")
    if expected == DISCRETE and not isinstance(batch[0].s, GridState):
        raise ValueError("batch state kind does not match the model")
    if expected == CONTINUOUS and isinstance(batch[0].s, GridState):
        raise ValueError("batch state kind does not match the model")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# --- losses and gradients ---


def loss_continuous(model: DynamicsModel, batch: TransitionBatch) -> float:
    """Sum over the batch of squared 2-norm prediction error on state deltas."""
    _check_kind(model, batch, CONTINUOUS)
    inputs, targets = _model_inputs(model, batch)
    pred = numkit.net_forward_batch(model.arch, model.params, inputs)
    diff = pred - targets
    return float(np.sum(diff * diff))


def loss_discrete(model: DynamicsModel, batch: TransitionBatch) -> float:
    """Mean cross entropy (natural log) of the successor distribution."""
    _check_kind(model, batch, DISCRETE)
    inputs, targets = _model_inputs(model, batch)
    logits = numkit.net_forward_batch(model.arch, model.params, inputs)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(batch)), targets].mean())


def model_loss(model: DynamicsModel, batch: TransitionBatch) -> float:
    if model.kind == CONTINUOUS:
        return loss_continuous(model, batch)
    return loss_discrete(model, batch)


def loss_grad(model: DynamicsModel, batch: TransitionBatch) -> tuple[float, np.ndarray]:
    """Loss value and its exact gradient w.r.t. the flat parameters."""
    inputs, targets = _model_inputs(model, batch)
    if model.kind == CONTINUOUS:
        pred = numkit.net_forward_batch(model.arch, model.params, inputs)
        diff = pred - targets
        loss = float(np.sum(diff * diff))
        out_grad = 2.0 * diff
    else:
        logits = numkit.net_forward_batch(model.arch, model.params, inputs)
        logp = _log_softmax(logits)
        loss = float(-logp[np.arange(len(batch)), targets].mean())
        probs = np.exp(logp)
        out_grad = probs.copy()
        out_grad[np.arange(len(batch)), targets] -= 1.0
        out_grad /= len(batch)
    grad, _ = numkit.net_backward_batch(model.arch, model.params, inputs, out_grad)
    return loss, grad


def loss_hvp(model: DynamicsModel, batch: TransitionBatch, vec: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product of the batch loss (Pearlmutter R-op).

    Pushes a parameter-space tangent through the forward pass and the
    gradient backward pass; no finite differences involved.
    """
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != model.params.shape:
        raise ValueError("tangent length does not match params")
    arch = model.arch
    inputs, targets = _model_inputs(model, batch)
    layers = numkit.unpack_params(arch, model.params)
    tangents = numkit.unpack_params(arch, vec)

    acts = [np.asarray(inputs, dtype=np.float64)]
    r_acts = [np.zeros_like(acts[0])]
    pre = []
    r_pre = []
    n_layers = len(layers)
    for idx, ((w, b), (vw, vb)) in enumerate(zip(layers, tangents)):
        a, ra = acts[-1], r_acts[-1]
        z = a @ w.T + b
        rz = a @ vw.T + ra @ w.T + vb
        pre.append(z)
        r_pre.append(rz)
        if idx < n_layers - 1:
            out = numkit._activate(arch.activation, z)
            d1 = numkit._activate_deriv(arch.activation, z, out)
            acts.append(out)
            r_acts.append(d1 * rz)
        else:
            acts.append(z)
            r_acts.append(rz)

    out, r_out = acts[-1], r_acts[-1]
    if model.kind == CONTINUOUS:
        delta = 2.0 * (out - targets)
        r_delta = 2.0 * r_out
    else:
        logp = _log_softmax(out)
        probs = np.exp(logp)
        n = len(batch)
        delta = probs.copy()
        delta[np.arange(n), targets] -= 1.0
        delta /= n
        # R{softmax} = p * (rz - <p, rz>)
        dots = (probs * r_out).sum(axis=1, keepdims=True)
        r_delta = probs * (r_out - dots) / n

    hvp_layers = [None] * n_layers
    for idx in range(n_layers - 1, -1, -1):
        w, _ = layers[idx]
        vw, _ = tangents[idx]
        a_prev, ra_prev = acts[idx], r_acts[idx]
        r_dw = r_delta.T @ a_prev + delta.T @ ra_prev
        r_db = r_delta.sum(axis=0)
        hvp_layers[idx] = (r_dw, r_db)
        if idx > 0:
            u = delta @ w
            ru = r_delta @ w + delta @ vw
            z_prev = pre[idx - 1]
            a_hidden = acts[idx]
            d1 = numkit._activate_deriv(arch.activation, z_prev, a_hidden)
            if arch.activation == "tanh":
                d2 = -2.0 * a_hidden * d1
            else:
                d2 = np.zeros_like(z_prev)
            delta = u * d1
            r_delta = ru * d1 + u * d2 * r_pre[idx - 1]
    return numkit.pack_params(arch, hvp_layers)


def adapt(model: DynamicsModel, support: TransitionBatch, alpha: float, steps: int) -> DynamicsModel:
    """Full-batch SGD on the matching loss; the input model is left untouched."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not support:
        raise ValueError("empty support set")
    params = model.params
    current = model
    for _ in range(steps):
        _, grad = loss_grad(current, support)
        params = numkit.sgd_step(params, grad, alpha)
        current = replace(model, params=params)
    return current


# --- prediction ---


def _state_array(s) -> np.ndarray:
    if isinstance(s, CartpoleState):
        return s.as_array()
    return np.asarray(s, dtype=np.float64)


def _like_state(template, arr: np.ndarray):
    if isinstance(template, CartpoleState):
        return CartpoleState(*arr)
    return arr


def continuous_delta_batch(model: DynamicsModel, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Predicted (denormalized) state deltas for row-wise (state, action) pairs."""
    raw = np.concatenate([states, _one_hot(np.asarray(actions, dtype=np.intp), model.n_actions)], axis=1)
    (imean, iscale), (dmean, dscale) = _scaling(model)
    out = numkit.net_forward_batch(model.arch, model.params, (raw - imean) / iscale)
    return out * dscale + dmean


def successor_probs(model: DynamicsModel, s: GridState, a: int) -> np.ndarray:
    """Softmax successor distribution of a discrete model."""
    if model.kind != DISCRETE:
        raise ValueError("successor_probs needs a discrete model")
    inputs = np.zeros((1, model.arch.input_dim))
    inputs[0, s.cell] = 1.0
    inputs[0, model.state_dim + a] = 1.0
    logits = numkit.net_forward_batch(model.arch, model.params, inputs)
    return np.exp(_log_softmax(logits))[0]


def predict_next(model: DynamicsModel, s, a: int, rng: np.random.Generator | None = None):
    """Next-state prediction.

    Continuous: s plus the predicted delta (deterministic). Discrete: the
    argmax successor without an rng, or a categorical draw with one.
    """
    if model.kind == CONTINUOUS:
        arr = _state_array(s)
        delta = continuous_delta_batch(model, arr[None, :], np.array([a]))[0]
        return _like_state(s, arr + delta)
    probs = successor_probs(model, s, a)
    if rng is None:
        cell = int(np.argmax(probs))
    else:
        cell = int(rng.choice(model.state_dim, p=probs))
    return GridState(cell // GRID_SIZE, cell % GRID_SIZE)


def predict_next_stochastic(ens: EnsembleModel, s, a: int, rng: np.random.Generator):
    """Gaussian draw with the ensemble mean and per-dimension population std."""
    if ens.kind != CONTINUOUS:
        raise ValueError("stochastic prediction needs a continuous ensemble")
    arr = _state_array(s)
    actions = np.array([a])
    deltas = np.stack(
        [continuous_delta_batch(m, arr[None, :], actions)[0] for m in ens.members]
    )
    mean = deltas.mean(axis=0)
    std = deltas.std(axis=0)  # population std (divide by member count)
    draw = mean + std * rng.standard_normal(mean.shape)
    return _like_state(s, arr + draw)


def split_support_query(
    batch: TransitionBatch, m: int, n: int, rng: np.random.Generator
) -> SupportQuerySplit:
    """Disjoint uniform sample without replacement: m support, n query."""
    if m < 1 or n < 1:
        raise ValueError("support and query sizes must be >= 1")
    if m + n > len(batch):
        raise ValueError(f"need {m + n} transitions, batch has {len(batch)}")
    idx = rng.choice(len(batch), size=m + n, replace=False)
    support = tuple(batch[i] for i in idx[:m])
    query = tuple(batch[i] for i in idx[m:])
    return SupportQuerySplit(support=support, query=query)


# --- checkpoint format (versioned JSON, bit-exact float round trip) ---

CHECKPOINT_VERSION = 1


def model_to_dict(model: DynamicsModel) -> dict:
    norm = None
    if model.normalizer is not None:
        norm = {
            "mean": [float(x) for x in model.normalizer.mean],
            "scale": [float(x) for x in model.normalizer.scale],
        }
    return {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "arch": {
            "input_dim": model.arch.input_dim,
            "hidden": list(model.arch.hidden),
            "output_dim": model.arch.output_dim,
            "activation": model.arch.activation,
        },
        "normalizer": norm,
        "params": [float(x) for x in model.params],
    }


def model_from_dict(doc: dict) -> DynamicsModel:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    arch = numkit.NetArch(
        input_dim=int(doc["arch"]["input_dim"]),
        hidden=tuple(int(h) for h in doc["arch"]["hidden"]),
        output_dim=int(doc["arch"]["output_dim"]),
        activation=doc["arch"]["activation"],
    )
    norm = None
    if doc.get("normalizer") is not None:
        norm = Normalizer(
            mean=np.array(doc["normalizer"]["mean"], dtype=np.float64),
            scale=np.array(doc["normalizer"]["scale"], dtype=np.float64),
        )
    return DynamicsModel(
        kind=doc["kind"],
        arch=arch,
        params=np.array(doc["params"], dtype=np.float64),
        normalizer=norm,
    )


def save_checkpoint(model: DynamicsModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_checkpoint(path) -> DynamicsModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
