"""Full-batch FairDICE on discrete datasets and closed-form policy extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fairdice import kernels
from fairdice.data import TransitionDataset
from fairdice.envs.tabular import TabularMOMDP
from fairdice.losses import HyperParams, PreferenceVector, UtilityKind, w_star

EXACT_PAIR_LIMIT = 10_000


class SolverError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass
class TabularProblem:
    """Dataset collapsed to unique (s, a, s', done, r) rows with empirical weights."""

    n_states: int
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    live: np.ndarray
    rewards: np.ndarray
    weight: np.ndarray
    init_dist: np.ndarray

    @classmethod
    def from_dataset(cls, data: TransitionDataset, n_states: int | None = None) -> "TabularProblem":
        if not data.discrete:
            raise ValueError("tabular solving needs integer states")
        if n_states is None:
            n_states = int(max(data.states.max(), data.next_states.max(), data.initial_states.max())) + 1
        keys = np.column_stack([
            data.states, data.actions, data.next_states, data.dones.astype(float), data.rewards,
        ])
        uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        init = np.bincount(data.initial_states, minlength=n_states).astype(float) / len(data)
        return cls(
            n_states=n_states,
            s=uniq[:, 0].astype(np.int64),
            a=uniq[:, 1].astype(np.int64),
            s_next=uniq[:, 2].astype(np.int64),
            live=1.0 - uniq[:, 3],
            rewards=np.ascontiguousarray(uniq[:, 4:]),
            weight=counts / counts.sum(),
            init_dist=init,
        )

    def td_errors(self, nu: np.ndarray, mu: np.ndarray, gamma: float) -> np.ndarray:
        return self.rewards @ mu + gamma * self.live * nu[self.s_next] - nu[self.s]


@dataclass
class SolveResult:
    nu: np.ndarray
    mu_params: PreferenceVector
    trace: np.ndarray
    iterations: int
    converged: bool
    grad_norm: float
    info: dict = field(default_factory=dict)

    @property
    def mu(self) -> np.ndarray:
        return self.mu_params.mu


def _kernel_args(problem: TabularProblem, hp: HyperParams):
    kind = kernels.PIECEWISE_LOG if hp.utility_kind is UtilityKind.PIECEWISE_LOG else kernels.ALPHA_FAIR
    return (
        problem.s, problem.s_next, problem.live, problem.rewards, problem.weight, problem.init_dist,
        float(hp.gamma), float(hp.beta), float(hp.alpha), kind, float(hp.sign), bool(hp.learns_mu),
    )


def full_batch_loss(problem: TabularProblem, nu, xi, hp: HyperParams):
    """(loss, grad_nu, grad_xi) of the dataset-averaged critic objective."""
    return kernels.loss_and_grad(np.asarray(nu, float), np.asarray(xi, float), *_kernel_args(problem, hp))


def solve_critic_full_batch(
    data: TransitionDataset | TabularProblem,
    hp: HyperParams,
    iters: int = 50_000,
    lr: float = 3e-4,
    tol: float = 1e-5,
    n_states: int | None = None,
    nu0=None,
    xi0=None,
    raise_on_nonfinite: bool = True,
    cosine: bool = False,
) -> SolveResult:
    """Minimize the critic/preference loss over (nu, xi) with full-batch Adam."""
    problem = data if isinstance(data, TabularProblem) else TabularProblem.from_dataset(data, n_states)
    K = problem.rewards.shape[1]
    nu0 = np.zeros(problem.n_states) if nu0 is None else np.asarray(nu0, dtype=float)
    xi0 = np.zeros(K) if xi0 is None else np.asarray(xi0, dtype=float)
    nu, xi, trace, n_run, status = kernels.adam_solve(
        nu0, xi0, *_kernel_args(problem, hp), float(lr), int(iters), float(tol), int(cosine)
    )
    if status == 2 and raise_on_nonfinite:
        raise SolverError("non-finite loss", n_run - 1)
    _, g_nu, g_xi = full_batch_loss(problem, nu, xi, hp)
    gnorm = float(max(np.max(np.abs(g_nu)), np.max(np.abs(g_xi)) if K else 0.0))
    return SolveResult(nu, PreferenceVector(xi), trace, n_run, status == 0, gnorm,
                       info={"status": int(status), "backend": kernels.BACKEND})


def transition_weights(problem: TabularProblem, result: SolveResult, hp: HyperParams) -> np.ndarray:
    mu = result.mu if hp.learns_mu else np.ones(problem.rewards.shape[1])
    return w_star(problem.td_errors(result.nu, mu, hp.gamma), hp.beta)


def extract_policy(
    data: TransitionDataset | TabularProblem,
    result: SolveResult | None,
    hp: HyperParams,
    n_states: int,
    n_actions: int,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Weighted-MLE policy: pi(a|s) is the w*-mass of (s, a) over the w*-mass of s.

    States without data (or with zero total weight) get uniform rows.
    Passing ``result=None`` with no ``weights`` gives plain behaviour cloning.
    """
    problem = data if isinstance(data, TabularProblem) else TabularProblem.from_dataset(data, n_states)
    if weights is None:
        weights = np.ones(len(problem.s)) if result is None else transition_weights(problem, result, hp)
    mass = np.zeros((n_states, n_actions))
    np.add.at(mass, (problem.s, problem.a), problem.weight * weights)
    total = mass.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(total > 0, mass / np.where(total > 0, total, 1.0), 1.0 / n_actions)
    return pi


def empirical_policy(data: TransitionDataset, n_states: int, n_actions: int) -> np.ndarray:
    return extract_policy(data, None, None, n_states, n_actions)


def evaluate_tabular_policy(env: TabularMOMDP, policy: np.ndarray, gamma: float | None = None) -> np.ndarray:
    """Exact discounted return vector J via the linear occupancy equations."""
    gamma = env.gamma if gamma is None else gamma
    if not 0 <= gamma < 1:
        raise ValueError("exact evaluation needs gamma < 1")
    if env.n_states * env.n_actions > EXACT_PAIR_LIMIT:
        raise ValueError("state-action space too large for the exact solve; use evaluate_tabular_mc")
    live = (~env.terminal).astype(float)[:, None]
    P = np.einsum("sa,sat->st", policy, env.transitions) * live
    r = np.einsum("sa,sak->sk", policy, env.rewards) * live
    d = np.linalg.solve((np.eye(env.n_states) - gamma * P).T, env.p0)
    return d @ r


def evaluate_tabular_mc(env: TabularMOMDP, policy: np.ndarray, n_episodes: int, horizon: int,
                        rng: np.random.Generator, gamma: float | None = None):
    """Monte-Carlo discounted returns; returns (mean, standard error)."""
    from fairdice.data import rollout_tabular

    gamma = env.gamma if gamma is None else gamma
    data = rollout_tabular(env, policy, n_episodes, horizon, rng)
    starts = np.r_[True, data.traj_ids[1:] != data.traj_ids[:-1]]
    idx = np.arange(len(data))
    step = idx - np.maximum.accumulate(np.where(starts, idx, 0))
    disc = data.rewards * (gamma ** step)[:, None]
    per_ep = np.zeros((n_episodes, env.n_objectives))
    np.add.at(per_ep, data.traj_ids, disc)
    return per_ep.mean(axis=0), per_ep.std(axis=0, ddof=1) / np.sqrt(n_episodes)


def total_variation(pi: np.ndarray, ref: np.ndarray, states=None) -> float:
    """Mean over ``states`` (default all) of 0.5 * ||pi(.|s) - ref(.|s)||_1."""
    tv = 0.5 * np.abs(pi - ref).sum(axis=1)
    return float(tv.mean() if states is None else tv[states].mean())


def save_artifact(path, env_id: str, hp: HyperParams, seed, result: SolveResult, policy: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "env": env_id,
        "seed": seed,
        "hyperparams": hp.to_dict(),
        "nu": result.nu.tolist(),
        "xi": result.mu_params.xi.tolist(),
        "mu": result.mu.tolist(),
        "policy": policy.tolist(),
        "iterations": result.iterations,
        "converged": result.converged,
    }, indent=1))
    return path


def load_artifact(path) -> dict:
    rec = json.loads(Path(path).read_text())
    rec["policy"] = np.asarray(rec["policy"])
    rec["nu"] = np.asarray(rec["nu"])
    rec["mu"] = np.asarray(rec["mu"])
    return rec
