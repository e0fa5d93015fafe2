"""Finite multi-objective MDPs: MO-FourRooms and randomly generated MOMDPs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROW_TOL = 1e-9

# 13x13 with the outer wall; the 11x11 interior is the classic four-rooms map.
FOUR_ROOMS_MAP = (
    "wwwwwwwwwwwww",
    "w     w     w",
    "w     w     w",
    "w           w",
    "w     w     w",
    "w     w     w",
    "ww wwww     w",
    "w     www www",
    "w     w     w",
    "w     w     w",
    "w           w",
    "w     w     w",
    "wwwwwwwwwwwww",
)
FOUR_ROOMS_START = (1, 1)
# centres of the top-right, bottom-left and bottom-right rooms
FOUR_ROOMS_GOALS = ((3, 9), (9, 3), (9, 9))
# up, right, down, left
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


@dataclass
class TabularMOMDP:
    """Discrete MOMDP whose reward is paid on arriving in a state.

    ``transitions[s, a, s']`` are probabilities and ``arrival_rewards[s']``
    is the K-vector received when a transition lands in ``s'``.  Terminal
    states end the episode on arrival.
    """

    transitions: np.ndarray
    arrival_rewards: np.ndarray
    p0: np.ndarray
    gamma: float
    terminal: np.ndarray
    env_id: str = "momdp"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.arrival_rewards = np.asarray(self.arrival_rewards, dtype=float)
        self.p0 = np.asarray(self.p0, dtype=float)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_objectives(self) -> int:
        return self.arrival_rewards.shape[1]

    @property
    def rewards(self) -> np.ndarray:
        """Expected reward per (s, a), shape (S, A, K)."""
        return self.transitions @ self.arrival_rewards

    def validate(self) -> None:
        S, A, S2 = self.transitions.shape
        if S != S2:
            raise ValueError("transition tensor must be (S, A, S)")
        if np.any(self.transitions < 0):
            raise ValueError("negative transition probability")
        if np.max(np.abs(self.transitions.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ValueError("transition rows must sum to 1")
        if self.p0.shape != (S,) or abs(self.p0.sum() - 1.0) > ROW_TOL or np.any(self.p0 < 0):
            raise ValueError("p0 must be a distribution over states")
        if self.arrival_rewards.shape[0] != S or not np.all(np.isfinite(self.arrival_rewards)):
            raise ValueError("arrival rewards must be finite with one row per state")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    # -- simulation -----------------------------------------------------

    def sample_next(self, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cdf = np.cumsum(self.transitions[states, actions], axis=1)
        u = rng.random(len(states))[:, None]
        return np.minimum((u >= cdf).sum(axis=1), self.n_states - 1)

    def sample_initial(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.n_states, size=n, p=self.p0)


def build_four_rooms(stochasticity: float = 0.1, gamma: float = 0.99) -> TabularMOMDP:
    """11x11 four-rooms grid, start top-left, one one-hot goal per other room.

    With probability ``stochasticity`` the executed move is uniformly random.
    """
    cells = [(r, c) for r, row in enumerate(FOUR_ROOMS_MAP) for c, ch in enumerate(row) if ch == " "]
    index = {cell: i for i, cell in enumerate(cells)}
    S, A, K = len(cells), len(MOVES), len(FOUR_ROOMS_GOALS)
    det = np.zeros((S, A), dtype=int)
    for (r, c), i in index.items():
        for a, (dr, dc) in enumerate(MOVES):
            det[i, a] = index.get((r + dr, c + dc), i)
    T = np.zeros((S, A, S))
    for a in range(A):
        T[np.arange(S), a, det[:, a]] += 1.0 - stochasticity
        for b in range(A):
            T[np.arange(S), a, det[:, b]] += stochasticity / A
    terminal = np.zeros(S, dtype=bool)
    arrival = np.zeros((S, K))
    for k, g in enumerate(FOUR_ROOMS_GOALS):
        gi = index[g]
        terminal[gi] = True
        arrival[gi, k] = 1.0
        T[gi] = 0.0
        T[gi, :, gi] = 1.0
    p0 = np.zeros(S)
    p0[index[FOUR_ROOMS_START]] = 1.0
    return TabularMOMDP(
        T, arrival, p0, gamma, terminal,
        env_id="four-rooms",
        info={"cells": cells, "stochasticity": stochasticity},
    )


def generate_random_momdp(
    n_states: int = 50,
    n_actions: int = 4,
    n_goals: int = 3,
    sparsity: int = 4,
    rng: np.random.Generator | None = None,
    gamma: float = 0.95,
) -> TabularMOMDP:
    """Random sparse MOMDP with ``n_goals`` absorbing one-hot goal states.

    Every (s, a) reaches ``sparsity`` distinct successors with Dirichlet(1)
    weights; state 0 is the start and goals are drawn from the rest.
    """
    rng = np.random.default_rng() if rng is None else rng
    if not 0 < n_goals < n_states:
        raise ValueError("need 0 < n_goals < n_states")
    if not 1 <= sparsity <= n_states:
        raise ValueError(f"sparsity must be in [1, n_states]; {sparsity} leaves states without successors")
    if n_actions < 1:
        raise ValueError("need at least one action")
    T = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=sparsity, replace=False)
            T[s, a, succ] = rng.dirichlet(np.ones(sparsity))
    goals = 1 + rng.choice(n_states - 1, size=n_goals, replace=False)
    terminal = np.zeros(n_states, dtype=bool)
    arrival = np.zeros((n_states, n_goals))
    for k, g in enumerate(goals):
        terminal[g] = True
        arrival[g, k] = 1.0
        T[g] = 0.0
        T[g, :, g] = 1.0
    p0 = np.zeros(n_states)
    p0[0] = 1.0
    return TabularMOMDP(
        T, arrival, p0, gamma, terminal,
        env_id="momdp",
        info={"goals": goals.tolist(), "sparsity": sparsity},
    )


def scalarized_value_iteration(env: TabularMOMDP, weights=None, tol: float = 1e-10, max_iter: int = 100_000):
    """Greedy-optimal Q for the linear scalarization ``weights . r``."""
    weights = np.ones(env.n_objectives) if weights is None else np.asarray(weights, dtype=float)
    R = env.rewards @ weights
    live = (~env.terminal).astype(float)
    V = np.zeros(env.n_states)
    for _ in range(max_iter):
        Q = R + env.gamma * env.transitions @ (live * V)
        V_new = Q.max(axis=1)
        V_new[env.terminal] = 0.0
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    Q = R + env.gamma * env.transitions @ (live * V)
    return Q, V


def greedy_policy(Q: np.ndarray) -> np.ndarray:
    """One-hot policy table from Q with lowest-index tie breaking."""
    pi = np.zeros_like(Q)
    pi[np.arange(Q.shape[0]), np.argmax(Q, axis=1)] = 1.0
    return pi
