"""Welfare metrics, reward/state normalisation and the Kruskal-Wallis test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import gammaincc

Z95 = 1.959963984540054


class NswResult(NamedTuple):
    value: float
    degenerate: bool


def nsw(J, with_flag: bool = False):
    """Nash social welfare sum(log J_i).

    A nonpositive component gives -inf and sets the flag instead of
    raising, since biased policies can legitimately score zero on some
    objective.  A 2-D input is treated as a batch and the mean over rows is
    returned.
    """
    J = np.asarray(J, dtype=float)
    if J.ndim == 2:
        vals = [nsw(row, True) for row in J]
        out = NswResult(float(np.mean([v.value for v in vals])), any(v.degenerate for v in vals))
        return out if with_flag else out.value
    if np.any(J <= 0):
        out = NswResult(-math.inf, True)
    else:
        out = NswResult(float(np.sum(np.log(J))), False)
    return out if with_flag else out.value


def jain_index(J) -> float:
    """(sum J)^2 / (K sum J^2), in [1/K, 1]."""
    J = np.asarray(J, dtype=float)
    sq = float(np.sum(J * J))
    if sq == 0.0:
        raise ValueError("Jain's index is undefined for an all-zero vector")
    return float(np.sum(J)) ** 2 / (len(J) * sq)


def utilitarian(J) -> float:
    return float(np.sum(J))


def mean_ci(samples) -> tuple[float, float]:
    """Mean and half-width of the normal-approximation 95% interval."""
    x = np.asarray(samples, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return math.nan, math.nan
    if len(x) == 1 or np.all(x == x[0]):
        # exact zero width; std of equal floats can pick up rounding in the mean
        return float(x[0]), 0.0
    return float(x.mean()), float(Z95 * x.std(ddof=1) / math.sqrt(len(x)))


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    """Per-objective reward bounds and per-dimension state moments.

    Constant reward objectives or state dimensions are flagged: rewards map
    to 0 and states are only centred.
    """

    reward_min: np.ndarray
    reward_max: np.ndarray
    state_mean: np.ndarray | None = None
    state_std: np.ndarray | None = None
    constant_rewards: np.ndarray = field(default=None)
    constant_states: np.ndarray | None = None

    def __post_init__(self):
        self.reward_min = np.asarray(self.reward_min, dtype=float)
        self.reward_max = np.asarray(self.reward_max, dtype=float)
        if self.constant_rewards is None:
            self.constant_rewards = ~(self.reward_max > self.reward_min)
        if self.state_std is not None:
            self.state_mean = np.asarray(self.state_mean, dtype=float)
            self.state_std = np.asarray(self.state_std, dtype=float)
            if self.constant_states is None:
                self.constant_states = ~(self.state_std > 0)

    @classmethod
    def from_dataset(cls, data, states: bool | None = None) -> "NormStats":
        states = (not data.discrete) if states is None else states
        mean = std = None
        if states:
            x = np.asarray(data.states, dtype=float)
            mean, std = x.mean(axis=0), x.std(axis=0)
        return cls(data.rewards.min(axis=0), data.rewards.max(axis=0), mean, std)

    def normalize_rewards(self, r) -> np.ndarray:
        span = np.where(self.constant_rewards, 1.0, self.reward_max - self.reward_min)
        out = (np.asarray(r, dtype=float) - self.reward_min) / span
        return np.where(self.constant_rewards, 0.0, out)

    def denormalize_rewards(self, r) -> np.ndarray:
        return np.asarray(r, dtype=float) * (self.reward_max - self.reward_min) + self.reward_min

    def normalize_states(self, x) -> np.ndarray:
        if self.state_mean is None:
            return np.asarray(x)
        std = np.where(self.constant_states, 1.0, self.state_std)
        return (np.asarray(x, dtype=float) - self.state_mean) / std

    def to_dict(self) -> dict:
        d = {"reward_min": self.reward_min.tolist(), "reward_max": self.reward_max.tolist()}
        if self.state_mean is not None:
            d["state_mean"] = self.state_mean.tolist()
            d["state_std"] = self.state_std.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["reward_min"], d["reward_max"], d.get("state_mean"), d.get("state_std"))


def minmax_normalize_rewards(data, stats: NormStats):
    """Copy of ``data`` with rewards mapped into [0, 1]; stats go into the metadata."""
    meta = dict(data.meta)
    meta["norm_stats"] = {**meta.get("norm_stats", {}), **stats.to_dict()}
    return replace(data, rewards=stats.normalize_rewards(data.rewards), meta=meta)


def meanstd_normalize_states(data, stats: NormStats):
    """Copy of ``data`` with states, next states and initial states standardised."""
    if stats.state_mean is None:
        raise ValueError("these stats carry no state moments")
    meta = dict(data.meta)
    meta["norm_stats"] = {**meta.get("norm_stats", {}), **stats.to_dict()}
    return replace(
        data,
        states=stats.normalize_states(data.states),
        next_states=stats.normalize_states(data.next_states),
        initial_states=stats.normalize_states(data.initial_states),
        meta=meta,
    )


def normalized_nsw(returns, stats: NormStats) -> float:
    """Average over rollouts of sum_i log of min-max normalised returns."""
    return nsw(stats.normalize_rewards(np.atleast_2d(returns)))


# ---------------------------------------------------------------------------
# Kruskal-Wallis
# ---------------------------------------------------------------------------


def rankdata(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing the mean rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.r_[True, xs[1:] != xs[:-1]]
    bounds = np.r_[np.flatnonzero(starts), len(xs)]
    ranks = np.empty(len(xs))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        ranks[order[lo:hi]] = 0.5 * (lo + 1 + hi)
    return ranks


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail of the chi-square distribution."""
    if x <= 0:
        return 1.0
    return float(gammaincc(0.5 * dof, 0.5 * x))


def kruskal_wallis(groups) -> tuple[float, float]:
    """H statistic with tie correction and its chi-square p-value."""
    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError("Kruskal-Wallis needs at least two groups")
    if any(len(g) == 0 for g in groups):
        raise ValueError("every group must be nonempty")
    pooled = np.concatenate(groups)
    if not np.all(np.isfinite(pooled)):
        raise ValueError("observations must be finite")
    N = len(pooled)
    ranks = rankdata(pooled)
    # (N - 1) * between-group / total rank variation: the tie-corrected H
    centred = ranks - 0.5 * (N + 1)
    total = float(np.sum(centred * centred))
    if total == 0.0:
        return 0.0, 1.0
    between = 0.0
    start = 0
    for g in groups:
        m = centred[start:start + len(g)].mean()
        between += len(g) * m * m
        start += len(g)
    H = (N - 1) * between / total
    return float(H), chi2_sf(H, len(groups) - 1)
