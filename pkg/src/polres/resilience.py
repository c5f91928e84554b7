"""Diagnosis and recovery, plus the base RL learners whose policies get poisoned.

Model-free recovery continues value learning in the deployment environment
with bootstrap targets expanded h steps through the diagnosed dynamics
model. Model-based recovery plans with receding-horizon CEM over imagined
rollouts. Reward and termination rules are supplied analytically by the
environment family; only transitions ever reach the agent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import dynamics, numkit
from .envs import (
    CartpoleState,
    GridState,
    Transition,
    cartpole_reward,
    grid_reward,
    run_episode,
)
from .numkit import NetArch

DQN_ARCH = NetArch(4, (64, 64), 2, activation="relu")
DQN_LR = 1e-3
DQN_BATCH = 64
DQN_WARMUP = 1000
DQN_SYNC_EVERY = 500
DQN_REPLAY_CAP = 50_000
DQN_ANNEAL_STEPS = 5_000

TABULAR_LR = 0.3
RECOVERY_EPSILON = 0.2


@dataclass(frozen=True)
class TabularQ:
    """Per-(cell, action) action values for the grid; target equals online."""

    values: np.ndarray  # (25, 4)
    gamma: float = 0.99

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.shape != (25, 4):
            raise ValueError("tabular Q needs shape (25, 4)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class NetQ:
    """Small Q network with separate frozen target parameters."""

    arch: NetArch
    params: np.ndarray
    target_params: np.ndarray
    gamma: float = 0.99

    def __post_init__(self):
        if np.shape(self.params) != np.shape(self.target_params):
            raise ValueError("target params must match params")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


QFunction = TabularQ | NetQ


@dataclass(frozen=True)
class ImaginedStep:
    s: object
    a: int
    s_next: object
    reward: float
    alive: int  # 1 while the imagined trajectory has not terminated


@dataclass(frozen=True)
class MveConfig:
    h: int = 3
    gamma: float = 0.99

    def __post_init__(self):
        if not 0 <= self.h <= 10:
            raise ValueError("rollout depth must lie in [0, 10]")


@dataclass(frozen=True)
class CemConfig:
    H: int = 20
    population: int = 200
    elite_frac: float = 0.10
    iterations: int = 5
    init_mean: float = 0.5
    init_std: float = 0.5

    def __post_init__(self):
        if min(self.H, self.population, self.iterations) < 1:
            raise ValueError("H, population, iterations must be >= 1")
        if self.population * self.elite_frac < 2:
            raise ValueError("population * elite_frac must be >= 2")
        if self.init_std < 0:
            raise ValueError("init_std must be >= 0")

    @property
    def n_elite(self) -> int:
        return max(2, int(round(self.population * self.elite_frac)))


@dataclass(frozen=True)
class DiagnosisConfig:
    n_episodes: int = 2
    adapt_steps: int = 20
    alpha: float = 1e-2
    epsilon: float = 0.2  # exploration mixed into the collection policy

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")


# --- policies over Q functions ---


def q_values(q: QFunction, s) -> np.ndarray:
    if isinstance(q, TabularQ):
        return q.values[s.cell]
    return numkit.net_forward(q.arch, q.params, _state_vec(s))


def q_target_value(q: QFunction, s, a: int) -> float:
    if isinstance(q, TabularQ):
        return float(q.values[s.cell, a])
    return float(numkit.net_forward(q.arch, q.target_params, _state_vec(s))[a])


def greedy_action(q: QFunction, s) -> int:
    return int(np.argmax(q_values(q, s)))


def greedy_policy(q: QFunction):
    return lambda s, rng: greedy_action(q, s)


def epsilon_greedy_policy(q: QFunction, epsilon: float):
    n = 4 if isinstance(q, TabularQ) else q.arch.output_dim

    def policy(s, rng):
        if rng.random() < epsilon:
            return int(rng.integers(n))
        return greedy_action(q, s)

    return policy


def _state_vec(s) -> np.ndarray:
    if isinstance(s, CartpoleState):
        return s.as_array()
    return np.asarray(s, dtype=np.float64)


def _imagine_rules(state):
    """Known reward/termination rule for the state's environment family."""
    if isinstance(state, GridState):
        return grid_reward
    return cartpole_reward


# --- base learners ---


def train_poisoned_policy(env, learner: str, budget: int, seed: int):
    """Train the victim agent in (possibly poisoned) env; returns (policy, Q)."""
    if budget < 1:
        raise ValueError("budget must be >= 1 episode")
    if learner == "tabular_q":
        q = train_tabular_q(env, budget, np.random.default_rng([seed, 101]))
    elif learner == "dqn":
        q = train_dqn(env, budget, np.random.default_rng([seed, 102]))
    else:
        raise ValueError(f"unknown learner {learner!r}")
    return greedy_policy(q), q


def train_tabular_q(env, episodes: int, rng: np.random.Generator, gamma: float = 0.99) -> TabularQ:
    """Epsilon-greedy tabular Q-learning with a linear exploration schedule."""
    values = np.zeros((25, 4))
    for ep in range(episodes):
        eps = max(0.05, 1.0 - 2.0 * ep / max(episodes, 1))
        s = env.reset(rng)
        for _ in range(env.episode_cap):
            if rng.random() < eps:
                a = int(rng.integers(4))
            else:
                a = int(np.argmax(values[s.cell]))
            tr = env.step(s, a, rng)
            target = tr.reward
            if not tr.done:
                target += gamma * values[tr.s_next.cell].max()
            values[s.cell, a] += TABULAR_LR * (target - values[s.cell, a])
            if tr.done:
                break
            s = tr.s_next
    return TabularQ(values=values, gamma=gamma)


class _Replay:
    """Fixed-capacity ring buffer of transitions."""

    def __init__(self, cap: int):
        self.cap = cap
        self.items: list[Transition] = []
        self.pos = 0

    def push(self, tr: Transition):
        if len(self.items) < self.cap:
            self.items.append(tr)
        else:
            self.items[self.pos] = tr
            self.pos = (self.pos + 1) % self.cap

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(len(self.items), size=n)
        return [self.items[i] for i in idx]

    def __len__(self):
        return len(self.items)


def _batch_q(arch, params, states: np.ndarray) -> np.ndarray:
    return numkit.net_forward_batch(arch, params, states)


def _dqn_update(q: NetQ, opt, batch: Sequence[Transition], mcfg: MveConfig | None, model):
    """One minibatch step; plain double-style targets when mcfg is None or h=0."""
    states = np.array([_state_vec(t.s) for t in batch])
    actions = np.array([t.a for t in batch], dtype=np.intp)
    rewards = np.array([t.reward for t in batch])
    next_states = np.array([_state_vec(t.s_next) for t in batch])
    alive = np.array([0.0 if t.done else 1.0 for t in batch])

    h = mcfg.h if mcfg is not None else 0
    gamma = mcfg.gamma if mcfg is not None else q.gamma

    cur, cur_alive = next_states, alive.copy()
    targets = rewards.copy()
    for i in range(1, h + 1):
        acts = np.argmax(_batch_q(q.arch, q.params, cur), axis=1)
        deltas = dynamics.continuous_delta_batch(model, cur, acts)
        nxt = cur + deltas
        step_rewards, terminal = _cartpole_reward_batch(nxt)
        targets += gamma**i * cur_alive * step_rewards
        cur_alive = cur_alive * (1.0 - terminal)
        cur = nxt
    boot_acts = np.argmax(_batch_q(q.arch, q.params, cur), axis=1)
    boot_vals = _batch_q(q.arch, q.target_params, cur)[np.arange(len(batch)), boot_acts]
    targets += gamma ** (h + 1) * cur_alive * boot_vals

    preds = _batch_q(q.arch, q.params, states)
    out_grad = np.zeros_like(preds)
    picked = preds[np.arange(len(batch)), actions]
    out_grad[np.arange(len(batch)), actions] = 2.0 * (picked - targets) / len(batch)
    grad, _ = numkit.net_backward_batch(q.arch, q.params, states, out_grad)
    opt, params = numkit.adam_step(opt, q.params, grad, DQN_LR)
    return replace(q, params=params), opt


def _cartpole_reward_batch(next_states: np.ndarray):
    in_bounds = (np.abs(next_states[:, 2]) <= 12.0 * np.pi / 180.0) & (
        np.abs(next_states[:, 0]) <= 2.4
    )
    rewards = in_bounds.astype(np.float64)
    terminal = (~in_bounds).astype(np.float64)
    return rewards, terminal


def _dqn_loop(
    env,
    episodes: int,
    rng: np.random.Generator,
    q: NetQ,
    mcfg: MveConfig | None,
    model: dynamics.DynamicsModel | None,
    epsilon: float | None,
    update_every: int = 2,
) -> tuple[NetQ, list[float]]:
    opt = numkit.adam_init(q.arch.param_count())
    replay = _Replay(DQN_REPLAY_CAP)
    step_count = 0
    scores: list[float] = []
    for _ in range(episodes):
        s = env.reset(rng)
        ep_ret = 0.0
        for _ in range(env.episode_cap):
            eps = epsilon if epsilon is not None else max(0.05, 1.0 - step_count / DQN_ANNEAL_STEPS)
            if rng.random() < eps:
                a = int(rng.integers(env.n_actions))
            else:
                a = greedy_action(q, s)
            tr = env.step(s, a, rng)
            replay.push(tr)
            ep_ret += tr.reward
            step_count += 1
            if len(replay) >= DQN_WARMUP and step_count % update_every == 0:
                batch = replay.sample(DQN_BATCH, rng)
                q, opt = _dqn_update(q, opt, batch, mcfg, model)
            if step_count % DQN_SYNC_EVERY == 0:
                q = replace(q, target_params=q.params.copy())
            if tr.done:
                break
            s = tr.s_next
        scores.append(ep_ret)
    return q, scores


def train_dqn(
    env,
    episodes: int,
    rng: np.random.Generator,
    gamma: float = 0.99,
    eval_every: int = 20,
    solve_score: float = 475.0,
) -> NetQ:
    """DQN with periodic greedy evaluation; keeps the best snapshot.

    Training stops early once the evaluation mean reaches solve_score,
    which both saves time and avoids returning a late-collapse policy.
    """
    params = numkit.net_init(DQN_ARCH, int(rng.integers(2**31)))
    q = NetQ(arch=DQN_ARCH, params=params, target_params=params.copy(), gamma=gamma)
    best_q, best_eval = q, -np.inf
    done_eps = 0
    while done_eps < episodes:
        chunk = min(eval_every, episodes - done_eps)
        q, _ = _dqn_loop(env, chunk, rng, q, mcfg=None, model=None, epsilon=None)
        done_eps += chunk
        eval_rng = np.random.default_rng([int(rng.integers(2**31)), done_eps])
        score = float(np.mean(evaluate_policy(env, greedy_policy(q), 5, eval_rng)))
        if score > best_eval:
            best_eval, best_q = score, q
        if score >= solve_score:
            break
    return best_q


# --- diagnosis ---


def collect_episodes(env, policy, n_episodes: int, rng: np.random.Generator) -> list[Transition]:
    out: list[Transition] = []
    for _ in range(n_episodes):
        trace = run_episode(env, policy, env.episode_cap, rng)
        out.extend(trace.transitions)
    return out


def diagnose(
    server_model: dynamics.DynamicsModel,
    deploy_env,
    dcfg: DiagnosisConfig,
    rng: np.random.Generator,
    policy=None,
) -> dynamics.DynamicsModel:
    """Few-shot adaptation of the broadcast model to the deployment environment.

    Collects dcfg.n_episodes with the (poisoned) policy plus epsilon
    exploration, then fine-tunes the model on the pooled transitions.
    Pass policy=None to collect with uniform random actions.
    """
    expected = dynamics.DISCRETE if deploy_env.kind == "grid" else dynamics.CONTINUOUS
    if server_model.kind != expected:
        raise ValueError(f"checkpoint kind {server_model.kind} does not fit a {deploy_env.kind} env")

    def behavior(s, r):
        if policy is None or r.random() < dcfg.epsilon:
            return int(r.integers(deploy_env.n_actions))
        return policy(s, r)

    batch = collect_episodes(deploy_env, behavior, dcfg.n_episodes, rng)
    if dcfg.alpha == 0.0:
        return server_model
    # the continuous loss sums over the batch, so alpha is a per-sample rate;
    # episode lengths (and hence batch sizes) vary widely across deployments
    alpha = dcfg.alpha / len(batch) if server_model.kind == dynamics.CONTINUOUS else dcfg.alpha
    return dynamics.adapt(server_model, batch, alpha, dcfg.adapt_steps)


# --- imagination ---


def _predict(model, s, a, rng):
    if callable(model):
        return model(s, a, rng)
    if isinstance(model, dynamics.EnsembleModel):
        return dynamics.predict_next_stochastic(model, s, a, rng)
    if model.kind == dynamics.DISCRETE:
        return dynamics.predict_next(model, s, a, rng)
    return dynamics.predict_next(model, s, a)


def rollout_imagine(model, s0, policy_or_actions, depth: int, rng) -> list[ImaginedStep]:
    """Recursively predict future states; bookkeeping freezes once terminal.

    `model` may be a DynamicsModel, an EnsembleModel, or any callable
    (s, a, rng) -> s_next, which lets tests substitute a perfect oracle.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if callable(policy_or_actions):
        action_at = lambda s, i: policy_or_actions(s)
    else:
        seq = list(policy_or_actions)
        action_at = lambda s, i: seq[i]
    steps: list[ImaginedStep] = []
    s = s0
    alive = 1
    rules = _imagine_rules(s0)
    for i in range(depth):
        a = action_at(s, i)
        if alive == 0:
            steps.append(ImaginedStep(s=s, a=a, s_next=s, reward=0.0, alive=0))
            continue
        s_next = _predict(model, s, a, rng)
        reward, terminal = rules(s, a, s_next)
        alive = 0 if terminal else 1
        steps.append(ImaginedStep(s=s, a=a, s_next=s_next, reward=float(reward), alive=alive))
        s = s_next
    return steps


def mve_target(
    transition: Transition,
    model,
    q: QFunction,
    mcfg: MveConfig,
    policy=None,
    rng=None,
) -> float:
    """Model-based value-expansion target for one real transition.

    r plus h imagined discounted rewards (each gated by the cumulative
    non-termination indicator up to that step) plus the discounted target-Q
    bootstrap, gated by survival through the full rollout. Imagined actions
    come from the current greedy policy unless one is supplied.
    """
    act = policy if policy is not None else (lambda s: greedy_action(q, s))
    gamma = mcfg.gamma
    target = float(transition.reward)
    alive = 0.0 if transition.done else 1.0
    s = transition.s_next
    rules = _imagine_rules(s)
    for i in range(1, mcfg.h + 1):
        if alive == 0.0:
            break
        a = act(s)
        s_next = _predict(model, s, a, rng)
        reward, terminal = rules(s, a, s_next)
        target += gamma**i * alive * float(reward)
        if terminal:
            alive = 0.0
        s = s_next
    if alive > 0.0:
        a_h = act(s)
        target += gamma ** (mcfg.h + 1) * alive * q_target_value(q, s, a_h)
    return target


# --- model-free recovery ---


def recover_tabular(
    q: TabularQ,
    model,
    env,
    mcfg: MveConfig,
    budget: int,
    rng: np.random.Generator,
    lr: float = TABULAR_LR,
    epsilon: float = RECOVERY_EPSILON,
) -> tuple[TabularQ, list[float]]:
    """Continue tabular value learning with MVE targets; returns (Q, episode returns)."""
    values = q.values.copy()
    live = TabularQ(values=values, gamma=q.gamma)  # aliases the mutable table
    scores: list[float] = []
    for _ in range(budget):
        s = env.reset(rng)
        ep_ret = 0.0
        for _ in range(env.episode_cap):
            if rng.random() < epsilon:
                a = int(rng.integers(4))
            else:
                a = int(np.argmax(values[s.cell]))
            tr = env.step(s, a, rng)
            ep_ret += tr.reward
            target = mve_target(tr, model, live, mcfg, rng=rng)
            values[s.cell, a] += lr * (target - values[s.cell, a])
            if tr.done:
                break
            s = tr.s_next
        scores.append(ep_ret)
    return TabularQ(values=values.copy(), gamma=q.gamma), scores


def recover_model_free(
    q: QFunction,
    model,
    env,
    mcfg: MveConfig,
    budget: int,
    rng: np.random.Generator,
) -> tuple[QFunction, list[float]]:
    """Dispatch on learner kind; budget counts deployment episodes."""
    if budget == 0:
        return q, []
    if isinstance(q, TabularQ):
        return recover_tabular(q, model, env, mcfg, budget, rng)
    return _dqn_loop(env, budget, rng, q, mcfg=mcfg, model=model, epsilon=RECOVERY_EPSILON)


# --- model-based recovery: CEM planning ---


def cem_optimize(
    score_fn: Callable[[np.ndarray, int], np.ndarray],
    ccfg: CemConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Iteratively refit a per-step Normal to the elite fraction; returns mu.

    score_fn maps (population, H) real-valued action sequences (plus the
    iteration index) to a score vector.
    """
    mu = np.full(ccfg.H, float(ccfg.init_mean))
    sigma = np.full(ccfg.H, float(ccfg.init_std))
    for it in range(ccfg.iterations):
        samples = mu + sigma * rng.standard_normal((ccfg.population, ccfg.H))
        scores = np.asarray(score_fn(samples, it), dtype=np.float64)
        order = np.argsort(-scores, kind="stable")
        elite = samples[order[: ccfg.n_elite]]
        assert scores[order[: ccfg.n_elite]].mean() >= scores.mean() - 1e-12
        mu = elite.mean(axis=0)
        sigma = elite.std(axis=0)
    return mu


def _discretize(samples: np.ndarray) -> np.ndarray:
    # binary actions from raw CEM samples
    return (samples > 0.5).astype(np.intp)


def _batch_step_fn(model):
    """Batched (states, actions) -> next states for CEM scoring.

    Accepts a continuous DynamicsModel, an EnsembleModel (scored with the
    ensemble-mean prediction), or any callable with the same signature,
    which lets tests substitute perfect dynamics.
    """
    if callable(model) and not isinstance(model, (dynamics.DynamicsModel, dynamics.EnsembleModel)):
        return model
    if isinstance(model, dynamics.EnsembleModel):
        if model.kind != dynamics.CONTINUOUS:
            raise ValueError("batched CEM scoring needs continuous dynamics")
        members = model.members

        def step(states, actions):
            deltas = np.mean(
                [dynamics.continuous_delta_batch(m, states, actions) for m in members], axis=0
            )
            return states + deltas

        return step
    if model.kind != dynamics.CONTINUOUS:
        raise ValueError("batched CEM scoring needs continuous dynamics")
    return lambda states, actions: states + dynamics.continuous_delta_batch(model, states, actions)


def score_action_sequences(model, s0, action_seqs: np.ndarray) -> np.ndarray:
    """Imagined cumulative reward of each candidate action sequence."""
    step = _batch_step_fn(model)
    pop, horizon = action_seqs.shape
    states = np.tile(_state_vec(s0), (pop, 1))
    alive = np.ones(pop)
    total = np.zeros(pop)
    for t in range(horizon):
        nxt = step(states, action_seqs[:, t])
        rewards, terminal = _cartpole_reward_batch(nxt)
        total += alive * rewards
        alive = alive * (1.0 - terminal)
        states = nxt
    return total


def cem_plan(model, s, ccfg: CemConfig, rng: np.random.Generator) -> np.ndarray:
    """Best action sequence of length H under the adapted model."""

    def score(samples: np.ndarray, it: int) -> np.ndarray:
        return score_action_sequences(model, s, _discretize(samples))

    mu = cem_optimize(score, ccfg, rng)
    return _discretize(mu)


def mpc_act(model, s, ccfg: CemConfig, rng: np.random.Generator) -> int:
    """Plan, apply the first action, replan next step (receding horizon)."""
    return int(cem_plan(model, s, ccfg, rng)[0])


def mpc_policy(model, ccfg: CemConfig):
    return lambda s, rng: mpc_act(model, s, ccfg, rng)


# --- evaluation ---


def evaluate_policy(env, policy, episodes: int, rng: np.random.Generator) -> list[float]:
    return [run_episode(env, policy, env.episode_cap, rng).ret for _ in range(episodes)]
