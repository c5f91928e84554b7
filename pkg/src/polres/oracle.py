"""Exact value iteration on the true grid MDP: the recovery yardstick."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import (
    GRID_GOAL,
    GRID_SIZE,
    GridHyperParams,
    GridState,
    grid_move_success_prob,
    grid_reward,
)


@dataclass(frozen=True)
class OracleResult:
    optimal_return: float  # expected return from the start cell
    optimal_policy: tuple[int, ...]  # greedy action per cell
    values: tuple[float, ...]


def value_iteration_oracle(
    hp: GridHyperParams, gamma: float = 1.0, tol: float = 1e-10
) -> OracleResult:
    """Bellman sweeps until the sup-norm change drops below tol.

    The goal is absorbing with value zero; entering it pays the terminal
    reward exactly once. Move failures leave the agent in place at the
    step cost, exactly as the simulator behaves.
    """
    goal_cell = GRID_GOAL[0] * GRID_SIZE + GRID_GOAL[1]
    n = GRID_SIZE * GRID_SIZE

    # per (cell, action): successful-move target cell and its probability
    targets = np.zeros((n, 4), dtype=np.intp)
    probs = np.zeros((n, 4))
    rewards_move = np.zeros((n, 4))
    for cell in range(n):
        s = GridState(cell // GRID_SIZE, cell % GRID_SIZE)
        for a in range(4):
            p = grid_move_success_prob(hp, s, a)
            if p == 0.0:  # off-grid: stay for sure
                targets[cell, a] = cell
                probs[cell, a] = 0.0
                rewards_move[cell, a] = 0.0
            else:
                dr, dc = ((-1, 0), (1, 0), (0, -1), (0, 1))[a]
                t = GridState(s.row + dr, s.col + dc)
                targets[cell, a] = t.cell
                probs[cell, a] = p
                rewards_move[cell, a], _ = grid_reward(s, a, t)
    stay_reward = -0.01

    values = np.zeros(n)
    while True:
        cont = np.where(np.arange(n) == goal_cell, 0.0, values)
        move_val = rewards_move + gamma * cont[targets]
        stay_val = stay_reward + gamma * values
        q = probs * move_val + (1.0 - probs) * stay_val[:, None]
        q[goal_cell, :] = 0.0  # absorbing
        new_values = q.max(axis=1)
        new_values[goal_cell] = 0.0
        if np.max(np.abs(new_values - values)) < tol:
            values = new_values
            break
        values = new_values

    policy = tuple(int(a) for a in np.argmax(q, axis=1))
    start_cell = 0
    return OracleResult(
        optimal_return=float(values[start_cell]),
        optimal_policy=policy,
        values=tuple(float(v) for v in values),
    )
