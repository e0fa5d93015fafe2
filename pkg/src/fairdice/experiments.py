"""Experiment building blocks shared by the CLI and the acceptance suite.

A sweep is a grid over (alpha, beta, lambda, loss mode) crossed with seeds.
Every row is a pure function of its SweepSpec and seed, which is what makes
sweeps resumable: finished rows are read back and skipped.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fairdice.data import TransitionDataset, collect_tabular
from fairdice.envs.groupfair import HORIZON as GF_HORIZON
from fairdice.envs.groupfair import N_OPTIONS, collect_groupfair
from fairdice.envs.tabular import build_four_rooms, generate_random_momdp
from fairdice.losses import HyperParams
from fairdice.metrics import jain_index, kruskal_wallis, mean_ci, nsw
from fairdice.tabular import (
    TabularProblem,
    evaluate_tabular_policy,
    extract_policy,
    solve_critic_full_batch,
)
from fairdice.trainer import LossMode, TrainConfig, evaluate_policy_mc, train

TABULAR_ENVS = ("four-rooms", "momdp")
ENVS = TABULAR_ENVS + ("group-fair",)
BETA_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)
ALPHA_GRID = (0.0, 0.5, 1.0, 1.25)

CSV_FIELDS = (
    "env", "dataset", "alpha", "beta", "lambda_gp", "loss_mode", "seed",
    "nsw", "nsw_ci", "utilitarian", "utilitarian_ci", "jain", "jain_ci",
    "returns", "converged", "wall_time",
)
KEY_FIELDS = ("alpha", "beta", "lambda_gp", "loss_mode", "seed")


def worker_count(requested: int | None = None) -> int:
    """Pool size: ``requested`` or the CPU count, capped by FAIRDICE_THREADS."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("FAIRDICE_THREADS")
    if cap:
        try:
            cap_n = int(cap)
        except ValueError:
            raise ValueError(f"FAIRDICE_THREADS must be a positive integer, got {cap!r}") from None
        if cap_n < 1:
            raise ValueError(f"FAIRDICE_THREADS must be a positive integer, got {cap!r}")
        n = min(n, cap_n)
    return max(1, n)


# ---------------------------------------------------------------------------
# data recipes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataRecipe:
    """How to build an offline dataset; ``seed`` is supplied at build time."""

    env: str = "four-rooms"
    behavior: str = "uniform"
    trajectories: int = 300
    horizon: int = 200
    optimality: float = 0.5
    stochasticity: float = 0.1
    goal_mix: tuple[float, ...] | None = None
    rollouts: int = 100

    def __post_init__(self):
        if self.env not in ENVS:
            raise ValueError(f"unknown env {self.env!r}; choose from {', '.join(ENVS)}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def default_recipe(env: str) -> DataRecipe:
    if env == "momdp":
        return DataRecipe("momdp", "optimality", trajectories=100, horizon=100, optimality=0.5)
    if env == "group-fair":
        return DataRecipe("group-fair", "random", horizon=GF_HORIZON, rollouts=100)
    return DataRecipe("four-rooms", "uniform", trajectories=300, horizon=200)


def build_env(recipe: DataRecipe, seed: int):
    """The environment for ``seed`` (random MOMDPs are drawn per seed)."""
    if recipe.env == "four-rooms":
        return build_four_rooms(recipe.stochasticity)
    if recipe.env == "momdp":
        return generate_random_momdp(rng=np.random.default_rng([seed, 0]))
    return "group-fair"


def build_dataset(recipe: DataRecipe, seed: int) -> TransitionDataset:
    env = build_env(recipe, seed)
    rng = np.random.default_rng([seed, 1])
    if recipe.env == "group-fair":
        return collect_groupfair(recipe.behavior, recipe.rollouts, rng, min(recipe.horizon, GF_HORIZON), seed=seed)
    return collect_tabular(env, recipe.behavior, recipe.trajectories, recipe.horizon, rng,
                           optimality=recipe.optimality, goal_mix=recipe.goal_mix, seed=seed)


# ---------------------------------------------------------------------------
# single cells
# ---------------------------------------------------------------------------


def welfare_row(J: np.ndarray) -> dict:
    """NSW / utilitarian / Jain of one return vector (no CI: single sample)."""
    J = np.asarray(J, dtype=float)
    return {
        "nsw": nsw(J),
        "nsw_ci": 0.0,
        "utilitarian": float(J.sum()),
        "utilitarian_ci": 0.0,
        "jain": jain_index(J) if np.any(J) else math.nan,
        "jain_ci": 0.0,
        "returns": J.tolist(),
    }


def tabular_cell(env, problem: TabularProblem, hp: HyperParams, iters: int = 50_000, lr: float = 3e-4):
    """Solve, extract and evaluate exactly; returns (row metrics, policy, solve result)."""
    res = solve_critic_full_batch(problem, hp, iters=iters, lr=lr)
    pi = extract_policy(problem, res, hp, env.n_states, env.n_actions)
    J = evaluate_tabular_policy(env, pi)
    row = welfare_row(J)
    row["converged"] = res.converged
    return row, pi, res


def neural_cell(data: TransitionDataset, cfg: TrainConfig, seed: int, eval_rollouts: int,
                eval_seed: int | None = None):
    """Train on GroupFair data and evaluate; returns (row metrics, artifact).

    The evaluation stream depends only on ``eval_seed`` (default: the
    training seed), so cells that differ only in hyperparameters are scored
    on the same simulated futures.
    """
    art = train(data, N_OPTIONS, cfg, seed=seed)
    rng = np.random.default_rng([seed if eval_seed is None else eval_seed, 7])
    rep = evaluate_policy_mc("group-fair", art, eval_rollouts, GF_HORIZON, rng)
    art.metrics = rep.summary()
    row = {
        "nsw": rep.nsw, "nsw_ci": rep.nsw_ci,
        "utilitarian": rep.utilitarian, "utilitarian_ci": rep.utilitarian_ci,
        "jain": rep.jain, "jain_ci": rep.jain_ci,
        "returns": np.round(rep.returns.mean(axis=0), 6).tolist(),
        "converged": True,
    }
    return row, art


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    env: str
    recipe: DataRecipe
    alphas: tuple[float, ...] = ALPHA_GRID
    betas: tuple[float, ...] = BETA_GRID
    lambdas: tuple[float, ...] = (0.0,)
    loss_modes: tuple[str, ...] = (LossMode.FAIRDICE.value,)
    seeds: tuple[int, ...] = tuple(range(5))
    rollouts: int = 100
    dataset: str | None = None
    tabular_iters: int = 50_000
    train_iters: int = 10_000
    hidden: tuple[int, ...] = (64, 64)
    batch_size: int = 256
    gamma: float | None = None

    def __post_init__(self):
        for name in ("alphas", "betas", "lambdas", "loss_modes", "seeds"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"sweep grid {name} is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("sweep seeds must be distinct")
        if self.env not in ENVS:
            raise ValueError(f"unknown env {self.env!r}")
        for m in self.loss_modes:
            LossMode(m)

    def cells(self):
        for seed in self.seeds:
            for mode in self.loss_modes:
                for lam in self.lambdas:
                    for a in self.alphas:
                        for b in self.betas:
                            yield {"alpha": a, "beta": b, "lambda_gp": lam, "loss_mode": mode, "seed": seed}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recipe"] = asdict(self.recipe)
        return d


def cell_key(row: dict) -> tuple:
    return (float(row["alpha"]), float(row["beta"]), float(row["lambda_gp"]), str(row["loss_mode"]), int(row["seed"]))


_DATA_CACHE: dict = {}


def _dataset_for(spec: SweepSpec, seed: int) -> TransitionDataset:
    key = (spec.dataset, spec.recipe, None if spec.dataset else seed)
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = (TransitionDataset.from_jsonl(spec.dataset) if spec.dataset
                            else build_dataset(spec.recipe, seed))
    return _DATA_CACHE[key]


def run_seed(spec: SweepSpec, seed: int, todo: list[dict]) -> list[dict]:
    """Run every pending cell of one seed (shares the env and dataset)."""
    data = _dataset_for(spec, seed)
    env = build_env(spec.recipe, seed)
    label = spec.dataset or f"{spec.recipe.env}:{spec.recipe.behavior}:seed{seed}"
    rows = []
    problem = None
    if spec.env in TABULAR_ENVS:
        problem = TabularProblem.from_dataset(data, env.n_states)
    for cell in todo:
        t0 = time.perf_counter()
        if problem is not None:
            hp = HyperParams(alpha=cell["alpha"], beta=cell["beta"], lambda_gp=cell["lambda_gp"],
                             gamma=spec.gamma or env.gamma)
            metrics, _, _ = tabular_cell(env, problem, hp, iters=spec.tabular_iters)
        else:
            hp = HyperParams(alpha=cell["alpha"], beta=cell["beta"], lambda_gp=cell["lambda_gp"],
                             gamma=spec.gamma or 0.99)
            cfg = TrainConfig(hp, iterations=spec.train_iters, batch_size=spec.batch_size,
                              loss_mode=cell["loss_mode"], hidden=spec.hidden, seeds=(seed,))
            metrics, _ = neural_cell(data, cfg, seed, spec.rollouts)
        rows.append({"env": spec.env, "dataset": label, **cell, **metrics,
                     "wall_time": round(time.perf_counter() - t0, 3)})
    return rows


def _run_seed_job(args):
    return run_seed(*args)


def read_rows(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("alpha", "beta", "lambda_gp", "nsw", "nsw_ci", "utilitarian", "utilitarian_ci",
                  "jain", "jain_ci", "wall_time"):
            r[k] = float(r[k])
        r["seed"] = int(r["seed"])
        r["returns"] = json.loads(r["returns"])
        r["converged"] = r["converged"] in ("True", "true", "1")
    return rows


def _csv_value(v):
    if isinstance(v, list):
        return json.dumps(v)
    if isinstance(v, float):
        return repr(v)
    return v


def run_sweep(spec: SweepSpec, csv_path, workers: int | None = None, progress=None) -> list[dict]:
    """Run every cell not already present in ``csv_path`` and append it.

    Seeds are dispatched to a process pool; rows are written by this
    process only, one seed block at a time, so a killed sweep leaves whole
    rows behind and a rerun fills in exactly what is missing.
    """
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    done = {cell_key(r) for r in read_rows(csv_path)}
    pending: dict[int, list] = {}
    for cell in spec.cells():
        if cell_key(cell) not in done:
            pending.setdefault(cell["seed"], []).append(cell)
    new_file = not csv_path.exists() or csv_path.stat().st_size == 0
    out: list[dict] = []
    with csv_path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if new_file:
            writer.writeheader()
            fh.flush()

        def emit(rows):
            for r in rows:
                writer.writerow({k: _csv_value(r[k]) for k in CSV_FIELDS})
            fh.flush()
            out.extend(rows)
            if progress:
                progress(rows)

        jobs = [(spec, seed, cells) for seed, cells in pending.items()]
        n = min(worker_count(workers), max(1, len(jobs)))
        if n == 1:
            for job in jobs:
                emit(_run_seed_job(job))
        else:
            with ProcessPoolExecutor(max_workers=n) as pool:
                for rows in pool.map(_run_seed_job, jobs):
                    emit(rows)
    return out


# ---------------------------------------------------------------------------
# aggregation and forensics
# ---------------------------------------------------------------------------


def aggregate(rows: list[dict], metric: str, by=("loss_mode", "lambda_gp", "alpha", "beta")) -> dict:
    """{group key: (mean, 95% CI half-width, n)} over seeds."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in by), []).append(r[metric])
    return {k: (*mean_ci(v), len(v)) for k, v in sorted(groups.items())}


@dataclass
class ForensicsResult:
    table: dict = field(default_factory=dict)

    def beta_sensitive(self, mode: str, level: float = 0.05) -> bool:
        return self.table[mode]["p"] < level


def kruskal_over_beta(rows: list[dict], metric: str = "nsw") -> ForensicsResult:
    """Kruskal-Wallis across beta groups, separately for each loss mode."""
    res = ForensicsResult()
    for mode in sorted({r["loss_mode"] for r in rows}):
        by_beta: dict = {}
        for r in rows:
            if r["loss_mode"] == mode:
                by_beta.setdefault(r["beta"], []).append(r[metric])
        groups = [by_beta[b] for b in sorted(by_beta)]
        H, p = kruskal_wallis(groups) if len(groups) >= 2 else (0.0, 1.0)
        res.table[mode] = {"H": H, "p": p, "groups": len(groups), "n": sum(len(g) for g in groups)}
    return res
