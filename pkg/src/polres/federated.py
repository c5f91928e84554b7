"""Preparation stage: the federated meta-learning round protocol.

Each round the server broadcasts its dynamics-model parameters, every
client adapts a copy on a local support split and reports the query-set
gradient (meta modes) or its locally updated parameters (fedavg). Only
these report payloads ever cross the client boundary; raw transitions
stay local.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import dynamics, numkit
from .envs import Environment, GridEnv, Transition

META_FIRST_ORDER = "meta_first_order"
META_SECOND_ORDER = "meta_second_order"
FEDAVG = "fedavg"
NONE = "none"
AGGREGATIONS = (META_FIRST_ORDER, META_SECOND_ORDER, FEDAVG, NONE)

# behavior-policy constants for preparation-time collection
BEHAVIOR_EPSILON = 0.2
GRID_BEHAVIOR_LR = 0.5
GRID_BEHAVIOR_GAMMA = 0.99


class DivergenceError(RuntimeError):
    """Raised when a preparation loss goes non-finite."""


@dataclass(frozen=True)
class FedConfig:
    K: int = 10
    rounds: int = 300
    n_interval: int = 5
    X: int = 100
    M: int = 32
    N: int = 32
    alpha: float = 1e-2
    beta: float = 1e-3
    inner_steps: int = 1
    aggregation: str = META_FIRST_ORDER
    outer_optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be >= 1")
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("learning rates must be positive")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown outer optimizer {self.outer_optimizer!r}")
        if self.aggregation == META_SECOND_ORDER and self.inner_steps != 1:
            raise ValueError("meta_second_order supports inner_steps=1 only")


@dataclass(frozen=True)
class ClientNode:
    """One client RL system: its environment, behavior policy state, and buffer."""

    index: int
    env: Environment
    buffer: tuple[Transition, ...] = ()
    q_table: np.ndarray | None = None  # grid behavior policy (learned while collecting)
    local_model: dynamics.DynamicsModel | None = None  # used by aggregation 'none'


@dataclass(frozen=True)
class ClientReport:
    """What a client sends to the server after one round."""

    index: int
    query_loss: float
    payload_kind: str  # "meta_grad" | "avg_params" | "local"
    payload: np.ndarray
    # (count, sum, sum of squares) over raw model inputs of newly collected
    # transitions; lets the server maintain the shared input normalizer
    # without seeing any transition.
    input_moments: tuple[int, np.ndarray, np.ndarray] | None = None


@dataclass(frozen=True)
class ServerState:
    model: dynamics.DynamicsModel
    opt_state: numkit.AdamState
    round: int
    aggregation: str
    outer_optimizer: str = "adam"
    beta: float = 1e-3
    moment_count: int = 0
    moment_sum: np.ndarray | None = None
    moment_sumsq: np.ndarray | None = None


def init_server(model: dynamics.DynamicsModel, cfg: FedConfig) -> ServerState:
    return ServerState(
        model=model,
        opt_state=numkit.adam_init(model.arch.param_count()),
        round=0,
        aggregation=cfg.aggregation,
        outer_optimizer=cfg.outer_optimizer,
        beta=cfg.beta,
    )


def _greedy_or_random(q_row: np.ndarray, rng: np.random.Generator, eps: float) -> int:
    if rng.random() < eps:
        return int(rng.integers(len(q_row)))
    return int(np.argmax(q_row))


def _collect_grid(node: ClientNode, count: int, rng: np.random.Generator):
    """Collect transitions while the client agent keeps learning its policy."""
    q = node.q_table.copy() if node.q_table is not None else np.zeros((25, 4))
    out: list[Transition] = []
    env = node.env
    while len(out) < count:
        s = env.reset(rng)
        for _ in range(env.episode_cap):
            a = _greedy_or_random(q[s.cell], rng, BEHAVIOR_EPSILON)
            tr = env.step(s, a, rng)
            target = tr.reward
            if not tr.done:
                target += GRID_BEHAVIOR_GAMMA * q[tr.s_next.cell].max()
            q[s.cell, a] += GRID_BEHAVIOR_LR * (target - q[s.cell, a])
            out.append(tr)
            if len(out) >= count or tr.done:
                break
            s = tr.s_next
    return q, out[:count]


def _collect_cartpole(node: ClientNode, count: int, rng: np.random.Generator):
    # random excitation; enough to identify the dynamics at desk scale
    out: list[Transition] = []
    env = node.env
    while len(out) < count:
        s = env.reset(rng)
        for _ in range(env.episode_cap):
            a = int(rng.integers(env.n_actions))
            tr = env.step(s, a, rng)
            out.append(tr)
            if len(out) >= count or tr.done:
                break
            s = tr.s_next
    return None, out[:count]


def _raw_input_moments(model: dynamics.DynamicsModel, batch) -> tuple[int, np.ndarray, np.ndarray]:
    # moments over (raw inputs ++ delta targets); feeds the shared normalizer
    raw, deltas = dynamics.continuous_batch_arrays(batch, model.n_actions)
    both = np.concatenate([raw, deltas], axis=1)
    return len(batch), both.sum(axis=0), (both * both).sum(axis=0)


def client_round(
    node: ClientNode,
    broadcast: dynamics.DynamicsModel,
    cfg: FedConfig,
    round_idx: int,
    rng: np.random.Generator,
) -> tuple[ClientNode, ClientReport]:
    """One client's work in one round; pure given its inputs."""
    q_table = node.q_table
    buffer = node.buffer
    moments = None

    if round_idx % cfg.n_interval == 0:
        if isinstance(node.env, GridEnv):
            q_table, fresh = _collect_grid(node, cfg.X, rng)
        else:
            q_table, fresh = _collect_cartpole(node, cfg.X, rng)
        buffer = buffer + tuple(fresh)
        if broadcast.kind == dynamics.CONTINUOUS:
            moments = _raw_input_moments(broadcast, fresh)

    if len(buffer) < cfg.M + cfg.N:
        raise ValueError(
            f"client {node.index}: buffer has {len(buffer)} transitions, needs {cfg.M + cfg.N}"
        )
    split = dynamics.split_support_query(buffer, cfg.M, cfg.N, rng)

    local_model = node.local_model
    if cfg.aggregation == NONE:
        # isolated local training: no shared initialization, persistent model
        if local_model is None:
            raise ValueError("aggregation 'none' needs clients with a local model")
        local_model = dynamics.adapt(local_model, split.support, cfg.alpha, cfg.inner_steps)
        qloss = dynamics.model_loss(local_model, split.query)
        payload_kind, payload = "local", local_model.params
    else:
        adapted = dynamics.adapt(broadcast, split.support, cfg.alpha, cfg.inner_steps)
        qloss, qgrad = dynamics.loss_grad(adapted, split.query)
        if cfg.aggregation == META_SECOND_ORDER:
            hvp = dynamics.loss_hvp(broadcast, split.support, qgrad)
            payload_kind, payload = "meta_grad", qgrad - cfg.alpha * hvp
        elif cfg.aggregation == META_FIRST_ORDER:
            payload_kind, payload = "meta_grad", qgrad
        else:  # fedavg
            payload_kind, payload = "avg_params", adapted.params

    new_node = replace(node, q_table=q_table, buffer=buffer, local_model=local_model)
    report = ClientReport(
        index=node.index,
        query_loss=float(qloss),
        payload_kind=payload_kind,
        payload=payload,
        input_moments=moments,
    )
    return new_node, report


def _absorb_moments(server: ServerState, reports: Sequence[ClientReport]) -> ServerState:
    count = server.moment_count
    total = server.moment_sum
    total_sq = server.moment_sumsq
    for rep in sorted(reports, key=lambda r: r.index):
        if rep.input_moments is None:
            continue
        c, s, s2 = rep.input_moments
        count += c
        total = s.copy() if total is None else total + s
        total_sq = s2.copy() if total_sq is None else total_sq + s2
    if count == server.moment_count or server.model.kind != dynamics.CONTINUOUS:
        return replace(server, moment_count=count, moment_sum=total, moment_sumsq=total_sq)
    norm = dynamics.normalizer_from_moments(count, total, total_sq)
    return replace(
        server,
        model=replace(server.model, normalizer=norm),
        moment_count=count,
        moment_sum=total,
        moment_sumsq=total_sq,
    )


def _outer_update(server: ServerState, mean_grad: np.ndarray) -> ServerState:
    if server.outer_optimizer == "adam":
        opt, params = numkit.adam_step(server.opt_state, server.model.params, mean_grad, server.beta)
    else:
        opt, params = server.opt_state, numkit.sgd_step(server.model.params, mean_grad, server.beta)
    return replace(server, model=replace(server.model, params=params), opt_state=opt)


def server_meta_update(server: ServerState, reports: Sequence[ClientReport]) -> ServerState:
    """Average client meta-gradients (sorted by index) and step the outer optimizer."""
    if not reports:
        raise ValueError("no reports to aggregate")
    if any(r.payload_kind != "meta_grad" for r in reports):
        raise ValueError("server_meta_update needs meta-gradient payloads")
    ordered = sorted(reports, key=lambda r: r.index)
    mean_grad = np.zeros_like(server.model.params)
    for rep in ordered:
        mean_grad += rep.payload
    mean_grad /= len(ordered)
    server = _absorb_moments(server, reports)
    server = _outer_update(server, mean_grad)
    return replace(server, round=server.round + 1)


def server_fedavg_update(server: ServerState, reports: Sequence[ClientReport]) -> ServerState:
    """Replace the server parameters with the uniform mean of client parameters."""
    if not reports:
        raise ValueError("no reports to aggregate")
    if any(r.payload_kind != "avg_params" for r in reports):
        raise ValueError("server_fedavg_update needs parameter payloads")
    ordered = sorted(reports, key=lambda r: r.index)
    mean_params = np.zeros_like(server.model.params)
    for rep in ordered:
        mean_params += rep.payload
    mean_params /= len(ordered)
    server = _absorb_moments(server, reports)
    server = replace(server, model=replace(server.model, params=mean_params))
    return replace(server, round=server.round + 1)


def init_clients(
    client_envs: Sequence[Environment], cfg: FedConfig, template: dynamics.DynamicsModel
) -> list[ClientNode]:
    """One node per environment; local models only matter for aggregation 'none'."""
    nodes = []
    for i, env in enumerate(client_envs):
        local = None
        if cfg.aggregation == NONE:
            params = numkit.net_init(template.arch, _derive_seed(cfg.seed, "client_init", i))
            local = replace(template, params=params)
        nodes.append(ClientNode(index=i, env=env, local_model=local))
    return nodes


def _derive_seed(*parts) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, str):
            out.extend(p.encode())
        else:
            out.append(int(p))
    return out


def client_rng(seed: int, round_idx: int, client_index: int) -> np.random.Generator:
    return np.random.default_rng(_derive_seed(seed, "round", round_idx, client_index))


def run_preparation(
    clients: Sequence[ClientNode], cfg: FedConfig, server: ServerState
) -> tuple[ServerState, list[ClientNode], list[tuple[int, float]]]:
    """Run cfg.rounds federation rounds; returns the server, clients, and loss log."""
    clients = list(clients)
    loss_log: list[tuple[int, float]] = []
    for r in range(cfg.rounds):
        reports = []
        for i, node in enumerate(clients):
            rng = client_rng(cfg.seed, r, node.index)
            clients[i], rep = client_round(node, server.model, cfg, r, rng)
            reports.append(rep)
        mean_loss = float(np.mean([rep.query_loss for rep in reports]))
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"non-finite mean query loss at round {r}")
        loss_log.append((r, mean_loss))
        if cfg.aggregation in (META_FIRST_ORDER, META_SECOND_ORDER):
            server = server_meta_update(server, reports)
        elif cfg.aggregation == FEDAVG:
            server = server_fedavg_update(server, reports)
        else:  # none: no shared model update
            server = replace(_absorb_moments(server, reports), round=server.round + 1)
    return server, clients, loss_log
