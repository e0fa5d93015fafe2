"""Offline transition datasets: container, collection and JSONL persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fairdice.envs.tabular import TabularMOMDP, greedy_policy, scalarized_value_iteration


@dataclass
class TransitionDataset:
    """Flat arrays of transitions; states are ints (tabular) or float rows."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    initial_states: np.ndarray
    traj_ids: np.ndarray
    preferences: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.dones = np.asarray(self.dones, dtype=bool)
        self.traj_ids = np.asarray(self.traj_ids, dtype=np.int64)
        n = len(self.actions)
        for name in ("states", "rewards", "next_states", "dones", "initial_states", "traj_ids"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"dataset field {name} has length {len(getattr(self, name))}, expected {n}")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def n_objectives(self) -> int:
        return self.rewards.shape[1]

    @property
    def discrete(self) -> bool:
        return np.ndim(self.states) == 1 and np.issubdtype(np.asarray(self.states).dtype, np.integer)

    def subset(self, idx) -> "TransitionDataset":
        pref = None if self.preferences is None else self.preferences[idx]
        return replace(
            self,
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            next_states=self.next_states[idx],
            dones=self.dones[idx],
            initial_states=self.initial_states[idx],
            traj_ids=self.traj_ids[idx],
            preferences=pref,
            meta=dict(self.meta),
        )

    def trajectory_returns(self) -> np.ndarray:
        """Undiscounted per-trajectory return vectors, ordered by trajectory id."""
        ids, inv = np.unique(self.traj_ids, return_inverse=True)
        out = np.zeros((len(ids), self.n_objectives))
        np.add.at(out, inv, self.rewards)
        return out

    # -- persistence ------------------------------------------------------

    def to_jsonl(self, path) -> Path:
        """One transition per line plus a ``<path>.meta.json`` sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for i in range(len(self)):
                rec = {
                    "s": _jsonable(self.states[i]),
                    "a": int(self.actions[i]),
                    "r": self.rewards[i].tolist(),
                    "s_next": _jsonable(self.next_states[i]),
                    "done": bool(self.dones[i]),
                    "s_initial": _jsonable(self.initial_states[i]),
                    "traj": int(self.traj_ids[i]),
                }
                if self.preferences is not None:
                    rec["preference"] = self.preferences[i].tolist()
                fh.write(json.dumps(rec) + "\n")
        meta = dict(self.meta)
        meta.setdefault("reward_min", self.rewards.min(axis=0).tolist())
        meta.setdefault("reward_max", self.rewards.max(axis=0).tolist())
        meta["n_transitions"] = len(self)
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def from_jsonl(cls, path) -> "TransitionDataset":
        path = Path(path)
        rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        if not rows:
            raise ValueError(f"{path} holds no transitions")
        mp = meta_path(path)
        meta = json.loads(mp.read_text()) if mp.exists() else {}
        discrete = isinstance(rows[0]["s"], int)
        dtype = np.int64 if discrete else float
        prefs = np.array([r["preference"] for r in rows], dtype=float) if "preference" in rows[0] else None
        return cls(
            states=np.array([r["s"] for r in rows], dtype=dtype),
            actions=np.array([r["a"] for r in rows]),
            rewards=np.array([r["r"] for r in rows], dtype=float),
            next_states=np.array([r["s_next"] for r in rows], dtype=dtype),
            dones=np.array([r["done"] for r in rows]),
            initial_states=np.array([r["s_initial"] for r in rows], dtype=dtype),
            traj_ids=np.array([r.get("traj", 0) for r in rows]),
            preferences=prefs,
            meta=meta,
        )


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def _jsonable(x):
    if np.ndim(x) == 0:
        return int(x) if np.issubdtype(np.asarray(x).dtype, np.integer) else float(x)
    return np.asarray(x).tolist()


def concat(datasets: list[TransitionDataset]) -> TransitionDataset:
    offset = 0
    ids = []
    for d in datasets:
        ids.append(d.traj_ids + offset)
        offset += int(d.traj_ids.max()) + 1 if len(d) else 0
    return TransitionDataset(
        states=np.concatenate([d.states for d in datasets]),
        actions=np.concatenate([d.actions for d in datasets]),
        rewards=np.concatenate([d.rewards for d in datasets]),
        next_states=np.concatenate([d.next_states for d in datasets]),
        dones=np.concatenate([d.dones for d in datasets]),
        initial_states=np.concatenate([d.initial_states for d in datasets]),
        traj_ids=np.concatenate(ids),
        meta=dict(datasets[0].meta),
    )


# ---------------------------------------------------------------------------
# Tabular collection
# ---------------------------------------------------------------------------


def behavior_table(env: TabularMOMDP, behavior: str, optimality: float = 0.5) -> np.ndarray:
    """Action-probability table for a tabular behaviour policy.

    ``uniform``: uniform over actions.  ``optimality``: the greedy action of
    uniform-weight value iteration with probability ``optimality``, else
    uniform.
    """
    A = env.n_actions
    uniform = np.full((env.n_states, A), 1.0 / A)
    if behavior == "uniform":
        return uniform
    if behavior == "optimality":
        Q, _ = scalarized_value_iteration(env)
        return optimality * greedy_policy(Q) + (1.0 - optimality) * uniform
    raise ValueError(f"unknown tabular behaviour {behavior!r}")


def rollout_tabular(
    env: TabularMOMDP,
    policy: np.ndarray,
    n_trajectories: int,
    horizon: int,
    rng: np.random.Generator,
    traj_offset: int = 0,
) -> TransitionDataset:
    """Run ``n_trajectories`` episodes side by side until terminal or ``horizon``."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    cdf = np.cumsum(policy, axis=1)
    s = env.sample_initial(n_trajectories, rng)
    s0 = s.copy()
    ids = np.arange(n_trajectories) + traj_offset
    alive = np.ones(n_trajectories, dtype=bool)
    cols = {k: [] for k in ("s", "a", "r", "s2", "d", "s0", "id")}
    for _ in range(horizon):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        st = s[idx]
        u = rng.random(len(idx))[:, None]
        a = np.minimum((u >= cdf[st]).sum(axis=1), env.n_actions - 1)
        s2 = env.sample_next(st, a, rng)
        done = env.terminal[s2]
        cols["s"].append(st)
        cols["a"].append(a)
        cols["r"].append(env.arrival_rewards[s2])
        cols["s2"].append(s2)
        cols["d"].append(done)
        cols["s0"].append(s0[idx])
        cols["id"].append(ids[idx])
        s[idx] = s2
        alive[idx[done]] = False
    cat = {k: np.concatenate(v) if v else np.zeros(0) for k, v in cols.items()}
    order = np.lexsort((np.arange(len(cat["id"])), cat["id"]))
    return TransitionDataset(
        states=cat["s"][order].astype(np.int64),
        actions=cat["a"][order],
        rewards=cat["r"][order].reshape(-1, env.n_objectives),
        next_states=cat["s2"][order].astype(np.int64),
        dones=cat["d"][order],
        initial_states=cat["s0"][order].astype(np.int64),
        traj_ids=cat["id"][order],
        meta={"env": env.env_id},
    )


def collect_tabular(
    env: TabularMOMDP,
    behavior: str = "uniform",
    n_trajectories: int = 100,
    horizon: int = 200,
    rng: np.random.Generator | None = None,
    optimality: float = 0.5,
    goal_mix: tuple[float, ...] | None = None,
    seed: int | None = None,
) -> TransitionDataset:
    """Seeded offline dataset from a tabular behaviour policy.

    ``goal_mix`` (e.g. (0.8, 0.1, 0.1)) builds a biased dataset by
    stratified resampling of goal-reaching trajectories so that the
    fraction ending in goal k equals ``goal_mix[k]``.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    policy = behavior_table(env, behavior, optimality)
    if goal_mix is None:
        data = rollout_tabular(env, policy, n_trajectories, horizon, rng)
    else:
        data = _resample_goal_mix(env, policy, n_trajectories, horizon, rng, goal_mix)
    data.meta.update({"env": env.env_id, "behavior": behavior, "horizon": horizon, "seed": seed})
    if behavior == "optimality":
        data.meta["optimality"] = optimality
    if goal_mix is not None:
        data.meta["goal_mix"] = list(goal_mix)
    return data


def _resample_goal_mix(env, policy, n_trajectories, horizon, rng, goal_mix):
    mix = np.asarray(goal_mix, dtype=float)
    if len(mix) != env.n_objectives or abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError("goal_mix needs one nonnegative share per goal summing to 1")
    counts = np.floor(mix * n_trajectories).astype(int)
    counts[np.argmax(mix)] += n_trajectories - counts.sum()
    pool = rollout_tabular(env, policy, 4 * n_trajectories, horizon, rng)
    rets = pool.trajectory_returns()
    ids = np.unique(pool.traj_ids)
    reached = rets.max(axis=1) > 0
    goal_of = np.where(reached, rets.argmax(axis=1), -1)
    chosen = []
    for k, c in enumerate(counts):
        cand = ids[goal_of == k]
        if c and len(cand) == 0:
            raise RuntimeError(f"no behaviour trajectory reached goal {k}; increase horizon")
        if c:
            chosen.extend(rng.choice(cand, size=c, replace=len(cand) < c).tolist())
    parts = []
    by_id = {int(i): np.flatnonzero(pool.traj_ids == i) for i in np.unique(chosen)}
    for tid in chosen:
        part = pool.subset(by_id[int(tid)])
        part.traj_ids = np.zeros(len(part), dtype=np.int64)
        parts.append(part)
    return concat(parts)
