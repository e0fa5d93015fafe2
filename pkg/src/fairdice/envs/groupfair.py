"""MO-GroupFair: a small model of compounding group inequality.

100 individuals hold three (possibly repeated) memberships over 5 groups.
Each step the agent sees 7 random options, each a split of one unit of
reward across the groups, and picks one.  Groups that are ahead of the
mean get options that favour them more in later steps.

Rollouts are vectorised: a ``GroupFairState`` holds a batch of independent
episodes and every method works on the whole batch at once.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.special import expit

N_INDIVIDUALS = 100
N_GROUPS = 5
N_OPTIONS = 7
MEMBERSHIPS_PER_INDIVIDUAL = 3
HORIZON = 500
ADVANTAGE_SCALE = 10.0
OBS_DIM = N_OPTIONS * N_GROUPS
SIMPLEX_TOL = 1e-9


class ReferencePolicy(str, Enum):
    RANDOM = "random"
    BIASED = "biased"
    UTIL_OPTIM = "util-optim"
    FAIR = "fair"


def groupfair_fixed_membership(seed: int = 42) -> np.ndarray:
    """(100, 3) group indices; seed 42 gives group sizes [69, 46, 63, 74, 48].

    Uses the legacy ``RandomState`` stream, which is the one that produces
    the published configuration.
    """
    return np.random.RandomState(seed).randint(0, N_GROUPS, size=(N_INDIVIDUALS, MEMBERSHIPS_PER_INDIVIDUAL))


def membership_counts(membership: np.ndarray) -> np.ndarray:
    """(individuals, groups) matrix counting how often each person is in each group."""
    n = membership.shape[0]
    counts = np.zeros((n, N_GROUPS))
    np.add.at(counts, (np.repeat(np.arange(n), membership.shape[1]), membership.ravel()), 1.0)
    return counts


def group_sizes(membership: np.ndarray) -> np.ndarray:
    return np.bincount(membership.ravel(), minlength=N_GROUPS)


def advantage(totals: np.ndarray) -> np.ndarray:
    """tanh((g_i - mean g) / 10) per group; works on (..., groups)."""
    return np.tanh((totals - totals.mean(axis=-1, keepdims=True)) / ADVANTAGE_SCALE)


def concentration(totals: np.ndarray) -> np.ndarray:
    """1 + tanh(x) written as 2 * sigmoid(2x), which stays strictly positive
    where the tanh form would round to exactly zero."""
    x = (totals - totals.mean(axis=-1, keepdims=True)) / ADVANTAGE_SCALE
    return 2.0 * expit(2.0 * x)


def draw_options(totals: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """7 Dirichlet(1 + advantage) option rows per episode: (n, 7, 5)."""
    conc = concentration(totals)
    g = rng.standard_gamma(np.broadcast_to(conc[:, None, :], (len(totals), N_OPTIONS, N_GROUPS)))
    return g / g.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class GroupFairState:
    """A batch of ``n`` episodes: running totals (n, 5), options (n, 7, 5)."""

    membership: np.ndarray
    totals: np.ndarray
    options: np.ndarray
    t: int = 0

    @property
    def n(self) -> int:
        return self.totals.shape[0]

    def observation(self) -> np.ndarray:
        return self.options.reshape(self.n, OBS_DIM).copy()

    def validate(self) -> None:
        if np.max(np.abs(self.options.sum(axis=-1) - 1.0)) > SIMPLEX_TOL:
            raise ValueError("option rows must lie on the simplex")
        if np.any(self.totals < 0):
            raise ValueError("group totals must be nonnegative")
        if not 0 <= self.t <= HORIZON:
            raise ValueError(f"timestep {self.t} outside [0, {HORIZON}]")


def groupfair_reset(n: int, rng: np.random.Generator, membership: np.ndarray | None = None) -> GroupFairState:
    membership = groupfair_fixed_membership() if membership is None else membership
    totals = np.zeros((n, N_GROUPS))
    return GroupFairState(membership, totals, draw_options(totals, rng), 0)


def groupfair_step(state: GroupFairState, action, rng: np.random.Generator, counts: np.ndarray | None = None):
    """Apply one option choice per episode.

    Returns ``(next_state, rewards)`` with rewards of shape (n, 100): each
    individual gets the chosen option's share for every one of their
    memberships, so repeated memberships count repeatedly.
    """
    action = np.broadcast_to(np.asarray(action), (state.n,))
    if not np.issubdtype(action.dtype, np.integer) or np.any((action < 0) | (action >= N_OPTIONS)):
        raise ValueError(f"actions must be option indices in [0, {N_OPTIONS})")
    if state.t >= HORIZON:
        raise ValueError("episode already finished")
    counts = membership_counts(state.membership) if counts is None else counts
    chosen = state.options[np.arange(state.n), action]
    rewards = chosen @ counts.T
    totals = state.totals + chosen
    nxt = GroupFairState(state.membership, totals, draw_options(totals, rng), state.t + 1)
    return nxt, rewards


def reference_policy(kind: ReferencePolicy | str, options: np.ndarray, rng: np.random.Generator | None = None):
    """Actions of a reference policy for options of shape (n, 7, 5) (or (7, 5)).

    Deterministic kinds break ties towards the lowest index (``argmax``).
    """
    kind = ReferencePolicy(kind)
    single = options.ndim == 2
    opts = options[None] if single else options
    if kind is ReferencePolicy.RANDOM:
        if rng is None:
            raise ValueError("the random reference policy needs an rng")
        act = rng.integers(0, N_OPTIONS, size=len(opts))
    elif kind is ReferencePolicy.BIASED:
        act = np.argmax(opts[:, :, 0], axis=1)
    elif kind is ReferencePolicy.UTIL_OPTIM:
        act = np.argmax(opts[:, :, 3], axis=1)
    else:
        with np.errstate(divide="ignore"):
            act = np.argmax(np.log(opts).sum(axis=2), axis=1)
    return int(act[0]) if single else act


def rollout_groupfair(
    policy,
    n_rollouts: int,
    rng: np.random.Generator,
    horizon: int = HORIZON,
    membership: np.ndarray | None = None,
    record: bool = False,
):
    """Run ``n_rollouts`` episodes in lockstep.

    ``policy(obs, rng) -> actions`` maps an (n, 35) observation batch to
    option indices.  Returns undiscounted per-individual returns (n, 100)
    and, when ``record`` is set, a dict of per-step arrays shaped
    (horizon, n, ...).
    """
    if not 1 <= horizon <= HORIZON:
        raise ValueError(f"horizon must be in [1, {HORIZON}]")
    state = groupfair_reset(n_rollouts, rng, membership)
    counts = membership_counts(state.membership)
    returns = np.zeros((n_rollouts, N_INDIVIDUALS))
    trace = {"obs": [], "actions": [], "rewards": []} if record else None
    for _ in range(horizon):
        obs = state.observation()
        act = np.asarray(policy(obs, rng), dtype=np.int64)
        state, r = groupfair_step(state, act, rng, counts)
        returns += r
        if record:
            trace["obs"].append(obs.astype(np.float32))
            trace["actions"].append(act)
            trace["rewards"].append(r.astype(np.float32))
    if record:
        trace["obs"].append(state.observation().astype(np.float32))
        trace = {k: np.stack(v) for k, v in trace.items()}
    return returns, trace


def reference_actor(kind: ReferencePolicy | str):
    """Wrap a reference policy as a ``policy(obs, rng)`` callable."""
    kind = ReferencePolicy(kind)

    def act(obs, rng):
        return reference_policy(kind, obs.reshape(-1, N_OPTIONS, N_GROUPS), rng)

    return act


def collect_groupfair(kind: ReferencePolicy | str, n_rollouts: int, rng: np.random.Generator,
                      horizon: int = HORIZON, seed=None):
    """Offline dataset from a reference policy, ordered by trajectory.

    Observations are stored as float32 to keep large collections in memory.
    """
    from fairdice.data import TransitionDataset

    _, tr = rollout_groupfair(reference_actor(kind), n_rollouts, rng, horizon, record=True)
    H, n = tr["actions"].shape
    obs = tr["obs"]
    # (H, n, ...) -> trajectory-major (n * H, ...)
    states = obs[:-1].transpose(1, 0, 2).reshape(n * H, OBS_DIM)
    nxt = obs[1:].transpose(1, 0, 2).reshape(n * H, OBS_DIM)
    init = np.repeat(obs[0], H, axis=0)
    dones = np.zeros((n, H), dtype=bool)
    dones[:, -1] = horizon == HORIZON
    return TransitionDataset(
        states=states,
        actions=tr["actions"].T.reshape(-1),
        rewards=tr["rewards"].transpose(1, 0, 2).reshape(n * H, N_INDIVIDUALS),
        next_states=nxt,
        dones=dones.reshape(-1),
        initial_states=init,
        traj_ids=np.repeat(np.arange(n), H),
        meta={"env": "group-fair", "behavior": ReferencePolicy(kind).value, "horizon": horizon,
              "rollouts": n_rollouts, "seed": seed},
    )


def with_totals(state: GroupFairState, totals) -> GroupFairState:
    """Copy of ``state`` with new running totals (options unchanged)."""
    return replace(state, totals=np.asarray(totals, dtype=float))
