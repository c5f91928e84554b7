"""HiP-MDP environment family: 3D grid world, cartpole, and the poisoning injector.

Both environments expose pure step functions parameterized by their hidden
hyper-parameters (grid cell elevations, pole length). Poisoning swaps the
hyper-parameters of targeted clients once at the start of training.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

# --- grid world constants ---
GRID_SIZE = 5
GRID_CELLS = GRID_SIZE * GRID_SIZE
GRID_START = (0, 0)
GRID_GOAL = (4, 4)
GRID_STEP_REWARD = -0.01
GRID_GOAL_REWARD = 1.0
GRID_EPISODE_CAP = 100
GRID_C0 = 2.0  # logistic offset: flat terrain succeeds with sigma(c0)
GRID_C1 = 2.0  # logistic slope on the elevation difference
GRID_ACTIONS = ("up", "down", "left", "right")
_GRID_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1))

# --- cartpole constants (classic benchmark values) ---
CP_GRAVITY = 9.8
CP_CART_MASS = 1.0
CP_POLE_MASS = 0.1
CP_FORCE_MAG = 10.0
CP_TAU = 0.02
CP_THETA_LIMIT = 12.0 * np.pi / 180.0
CP_X_LIMIT = 2.4
CP_EPISODE_CAP = 500
CP_ACTIONS = ("push_left", "push_right")


@dataclass(frozen=True)
class GridHyperParams:
    """Cell elevations, row-major 5x5, each in [0, 4]."""

    elevations: tuple[float, ...]

    def __post_init__(self):
        elev = tuple(float(e) for e in self.elevations)
        object.__setattr__(self, "elevations", elev)
        if len(elev) != GRID_CELLS:
            raise ValueError(f"expected {GRID_CELLS} elevations, got {len(elev)}")
        if not all(np.isfinite(elev)):
            raise ValueError("elevations must be finite")
        if any(e < 0.0 or e > 4.0 for e in elev):
            raise ValueError("elevations must lie in [0, 4]")

    def elevation(self, row: int, col: int) -> float:
        return self.elevations[row * GRID_SIZE + col]


@dataclass(frozen=True)
class CartpoleHyperParams:
    """Pole length in meters (classic half-length semantics), in (0, 2]."""

    pole_length: float

    def __post_init__(self):
        length = float(self.pole_length)
        object.__setattr__(self, "pole_length", length)
        if not np.isfinite(length) or length <= 0.0 or length > 2.0:
            raise ValueError("pole_length must lie in (0, 2]")


HyperParams = Union[GridHyperParams, CartpoleHyperParams]


def flat_grid() -> GridHyperParams:
    """The natural grid: all-zero elevation."""
    return GridHyperParams(elevations=(0.0,) * GRID_CELLS)


def ridge_grid(cells=((3, 3), (3, 4), (4, 3)), height: float = 4.0) -> GridHyperParams:
    """Flat grid with a ridge raised on the given cells.

    The default ridge walls off both entrances of the goal corner, which
    starves goal-reward signal during training in the poisoned world.
    """
    elev = [0.0] * GRID_CELLS
    for r, c in cells:
        elev[r * GRID_SIZE + c] = height
    return GridHyperParams(elevations=tuple(elev))


@dataclass(frozen=True)
class GridPrior:
    """Per-cell uniform elevation ranges."""

    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self):
        low = tuple(float(x) for x in self.low)
        high = tuple(float(x) for x in self.high)
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        if len(low) != GRID_CELLS or len(high) != GRID_CELLS:
            raise ValueError(f"prior needs {GRID_CELLS} low/high entries")
        if any(lo > hi for lo, hi in zip(low, high)):
            raise ValueError("prior requires low <= high")


@dataclass(frozen=True)
class CartpolePrior:
    """Uniform pole-length range."""

    low: float
    high: float

    def __post_init__(self):
        if float(self.low) > float(self.high):
            raise ValueError("prior requires low <= high")


HyperPrior = Union[GridPrior, CartpolePrior]


@dataclass(frozen=True)
class GridState:
    row: int
    col: int

    def __post_init__(self):
        if not (0 <= self.row < GRID_SIZE and 0 <= self.col < GRID_SIZE):
            raise ValueError(f"grid state {(self.row, self.col)} out of bounds")

    @property
    def cell(self) -> int:
        return self.row * GRID_SIZE + self.col


@dataclass(frozen=True)
class CartpoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float

    def __post_init__(self):
        vals = (self.x, self.x_dot, self.theta, self.theta_dot)
        if not all(np.isfinite(vals)):
            raise ValueError("cartpole state must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])


State = Union[GridState, CartpoleState]


@dataclass(frozen=True)
class Transition:
    s: State
    a: int
    s_next: State
    reward: float
    done: bool


@dataclass(frozen=True)
class EpisodeTrace:
    transitions: tuple[Transition, ...]
    ret: float


@dataclass(frozen=True)
class PoisonSpec:
    """Which clients get their hyper-parameters swapped, and to what."""

    targets: frozenset[int]
    poisoned_value: HyperParams
    schedule: str = "once_at_start"

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(int(t) for t in self.targets))
        if any(t < 0 for t in self.targets):
            raise ValueError("client indices must be non-negative")
        if self.schedule != "once_at_start":
            raise ValueError(f"unsupported schedule {self.schedule!r}")


def _sigmoid(x: float) -> float:
    # stable logistic
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    z = np.exp(x)
    return z / (1.0 + z)


def grid_move_success_prob(hp: GridHyperParams, s: GridState, a: int) -> float:
    """Closed-form success probability of moving from s in direction a.

    Off-grid moves never succeed (the agent stays), so they return 0.0.
    """
    dr, dc = _GRID_DELTAS[a]
    tr, tc = s.row + dr, s.col + dc
    if not (0 <= tr < GRID_SIZE and 0 <= tc < GRID_SIZE):
        return 0.0
    dh = hp.elevation(tr, tc) - hp.elevation(s.row, s.col)
    return _sigmoid(GRID_C0 - GRID_C1 * dh)


def grid_reward(s: GridState, a: int, s_next: GridState) -> tuple[float, bool]:
    """Known reward/termination rule: +1 and done on entering the goal, -0.01 otherwise."""
    if (s_next.row, s_next.col) == GRID_GOAL:
        return GRID_GOAL_REWARD, True
    return GRID_STEP_REWARD, False


def grid_step(hp: GridHyperParams, s: GridState, a: int, rng: np.random.Generator) -> Transition:
    """One stochastic grid move; climbing is harder the steeper the target cell."""
    if a not in range(4):
        raise ValueError(f"invalid grid action {a}")
    dr, dc = _GRID_DELTAS[a]
    tr, tc = s.row + dr, s.col + dc
    if not (0 <= tr < GRID_SIZE and 0 <= tc < GRID_SIZE):
        s_next = s  # boundary: stay, no rng draw
    else:
        p = grid_move_success_prob(hp, s, a)
        s_next = GridState(tr, tc) if rng.random() < p else s
    reward, done = grid_reward(s, a, s_next)
    return Transition(s=s, a=a, s_next=s_next, reward=reward, done=done)


def cartpole_in_bounds(state: CartpoleState) -> bool:
    return abs(state.theta) <= CP_THETA_LIMIT and abs(state.x) <= CP_X_LIMIT


def cartpole_reward(s: CartpoleState, a: int, s_next: CartpoleState) -> tuple[float, bool]:
    """Known reward/termination rule: +1 per surviving step, 0 on the failing step."""
    if cartpole_in_bounds(s_next):
        return 1.0, False
    return 0.0, True


def cartpole_step(hp: CartpoleHyperParams, s: CartpoleState, a: int) -> Transition:
    """Classic cartpole Euler step with +-10 N pushes; deterministic."""
    if a not in (0, 1):
        raise ValueError(f"invalid cartpole action {a}")
    force = CP_FORCE_MAG if a == 1 else -CP_FORCE_MAG
    length = hp.pole_length
    total_mass = CP_CART_MASS + CP_POLE_MASS
    polemass_length = CP_POLE_MASS * length

    cos_t = np.cos(s.theta)
    sin_t = np.sin(s.theta)
    temp = (force + polemass_length * s.theta_dot**2 * sin_t) / total_mass
    theta_acc = (CP_GRAVITY * sin_t - cos_t * temp) / (
        length * (4.0 / 3.0 - CP_POLE_MASS * cos_t**2 / total_mass)
    )
    x_acc = temp - polemass_length * theta_acc * cos_t / total_mass

    s_next = CartpoleState(
        x=s.x + CP_TAU * s.x_dot,
        x_dot=s.x_dot + CP_TAU * x_acc,
        theta=s.theta + CP_TAU * s.theta_dot,
        theta_dot=s.theta_dot + CP_TAU * theta_acc,
    )
    reward, done = cartpole_reward(s, a, s_next)
    return Transition(s=s, a=a, s_next=s_next, reward=reward, done=done)


class GridEnv:
    """5x5 elevation grid; episodes start at (0,0) and end at the goal or the cap."""

    kind = "grid"
    n_actions = 4
    episode_cap = GRID_EPISODE_CAP

    def __init__(self, hp: GridHyperParams):
        self.hp = hp

    def reset(self, rng: np.random.Generator) -> GridState:
        return GridState(*GRID_START)

    def step(self, s: GridState, a: int, rng: np.random.Generator) -> Transition:
        return grid_step(self.hp, s, a, rng)


class CartpoleEnv:
    """Cartpole with configurable pole length; starts near the upright fixed point."""

    kind = "cartpole"
    n_actions = 2
    episode_cap = CP_EPISODE_CAP

    def __init__(self, hp: CartpoleHyperParams):
        self.hp = hp

    def reset(self, rng: np.random.Generator) -> CartpoleState:
        x, x_dot, theta, theta_dot = rng.uniform(-0.05, 0.05, size=4)
        return CartpoleState(x=x, x_dot=x_dot, theta=theta, theta_dot=theta_dot)

    def step(self, s: CartpoleState, a: int, rng: np.random.Generator) -> Transition:
        return cartpole_step(self.hp, s, a)


Environment = Union[GridEnv, CartpoleEnv]
Policy = Callable[[State, np.random.Generator], int]


def run_episode(
    env: Environment, policy: Policy, max_steps: int, rng: np.random.Generator
) -> EpisodeTrace:
    """Roll one episode; the driver flags done on the final capped step."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    transitions = []
    s = env.reset(rng)
    for step in range(max_steps):
        a = policy(s, rng)
        tr = env.step(s, a, rng)
        if step == max_steps - 1 and not tr.done:
            tr = dataclasses.replace(tr, done=True)
        transitions.append(tr)
        if tr.done:
            break
        s = tr.s_next
    ret = float(sum(t.reward for t in transitions))
    return EpisodeTrace(transitions=tuple(transitions), ret=ret)


def random_policy(state: State, rng: np.random.Generator) -> int:
    """Uniform random over the action set implied by the state kind."""
    n = 4 if isinstance(state, GridState) else 2
    return int(rng.integers(n))


def apply_poison(spec: PoisonSpec, client_index: int, natural: HyperParams) -> HyperParams:
    """Swap in the poisoned hyper-parameters for targeted clients."""
    if client_index in spec.targets:
        return spec.poisoned_value
    return natural


def sample_hyperparams(prior: HyperPrior, rng: np.random.Generator) -> HyperParams:
    """Uniform draw from the prior."""
    if isinstance(prior, GridPrior):
        elev = rng.uniform(np.array(prior.low), np.array(prior.high))
        return GridHyperParams(elevations=tuple(elev))
    if isinstance(prior, CartpolePrior):
        return CartpoleHyperParams(pole_length=float(rng.uniform(prior.low, prior.high)))
    raise TypeError(f"unknown prior {type(prior)!r}")
