"""``fairdice`` command line: gen-data, train, eval, sweep, forensics, report.

Exit codes: 0 success, 2 bad arguments, 3 runtime or numeric failure.

Options can come from a config file (``--config``) holding plain
``key = value`` lines under ``[data]``, ``[train]``, ``[sweep]`` and
``[eval]`` sections; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from fairdice import __version__
from fairdice.data import TransitionDataset, meta_path
from fairdice.envs.groupfair import HORIZON as GF_HORIZON
from fairdice.envs.groupfair import N_OPTIONS, ReferencePolicy, reference_actor
from fairdice.experiments import (
    ALPHA_GRID,
    BETA_GRID,
    ENVS,
    TABULAR_ENVS,
    DataRecipe,
    SweepSpec,
    aggregate,
    build_dataset,
    build_env,
    default_recipe,
    kruskal_over_beta,
    read_rows,
    run_sweep,
)
from fairdice.losses import HyperParams, RegularizerSign, UtilityKind
from fairdice.metrics import NormStats
from fairdice.svg import box_plot, line_plot
from fairdice.tabular import (
    SolverError,
    TabularProblem,
    extract_policy,
    load_artifact,
    save_artifact,
    solve_critic_full_batch,
)
from fairdice.trainer import LossMode, TrainArtifact, TrainConfig, TrainingError, evaluate_policy_mc, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
SECTIONS = {"gen-data": "data", "train": "train", "eval": "eval", "sweep": "sweep",
            "forensics": "sweep", "report": "sweep"}
MANIFEST = "manifest.json"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------


def parse_floats(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in str(text).replace(" ", "").split(",") if t)
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError("empty grid")
    return vals


def parse_ints(text: str) -> tuple[int, ...]:
    """'0,1,2' or '0-9' (inclusive) or a mix."""
    out = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise UsageError(f"expected integers or ranges like 0-9, got {text!r}") from None
    if not out:
        raise UsageError("empty seed list")
    return tuple(out)


def load_config(path) -> dict:
    """{section: {key: raw string}} from a ``key = value`` file with sections."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = lambda s: s.replace("-", "_").lower()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def merge_config(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Fill unset (None) flags from the config section, then from ``defaults``."""
    section = {}
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        section = {**cfg.get("run", {}), **cfg.get(SECTIONS[args.command], {})}
    known = vars(args)
    for key in section:
        if key not in known and key not in defaults:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
    for key, default in defaults.items():
        if known.get(key) is None:
            setattr(args, key, section.get(key, default))
    for key, val in section.items():
        if known.get(key) is None:
            setattr(args, key, val)
    return args


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------


def record_run(run_dir: Path, command: str, argv: list[str], artifacts: list[Path], extra: dict | None = None):
    run_dir.mkdir(parents=True, exist_ok=True)
    mpath = run_dir / MANIFEST
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {"version": __version__, "runs": []}
    manifest["runs"].append({
        "command": command,
        "argv": argv,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "artifacts": sorted(str(Path(a).resolve().relative_to(run_dir.resolve()))
                            if Path(a).resolve().is_relative_to(run_dir.resolve()) else str(a)
                            for a in artifacts),
        **(extra or {}),
    })
    mpath.write_text(json.dumps(manifest, indent=2) + "\n")


def _out_dir(args) -> Path:
    return Path(args.out or "runs/default")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

DATA_DEFAULTS = {"env": "four-rooms", "behavior": None, "stochasticity": "0.1", "optimality": "0.5",
                 "trajectories": None, "horizon": None, "rollouts": None, "goal_mix": None, "seed": "0",
                 "out": None}


def _recipe_from_args(args) -> DataRecipe:
    if args.env not in ENVS:
        raise UsageError(f"unknown env {args.env!r}; choose from {', '.join(ENVS)}")
    base = default_recipe(args.env)
    behavior = args.behavior or base.behavior
    if args.env == "group-fair":
        try:
            ReferencePolicy(behavior)
        except ValueError:
            raise UsageError(f"group-fair behaviour must be one of {[k.value for k in ReferencePolicy]}") from None
    elif behavior not in ("uniform", "optimality"):
        raise UsageError("tabular behaviour must be 'uniform' or 'optimality'")
    try:
        return DataRecipe(
            env=args.env,
            behavior=behavior,
            trajectories=int(args.trajectories or base.trajectories),
            horizon=int(args.horizon or base.horizon),
            optimality=float(args.optimality),
            stochasticity=float(args.stochasticity),
            goal_mix=parse_floats(args.goal_mix) if args.goal_mix else None,
            rollouts=int(args.rollouts or base.rollouts),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_gen_data(args) -> int:
    args = merge_config(args, DATA_DEFAULTS)
    recipe = _recipe_from_args(args)
    seed = int(args.seed)
    data = build_dataset(recipe, seed)
    data.meta.update({"recipe": asdict(recipe), "seed": seed})
    data.meta["norm_stats"] = NormStats.from_dataset(data).to_dict()
    run = _out_dir(args)
    path = run / "data" / f"{recipe.env}-{recipe.behavior}-seed{seed}.jsonl"
    data.to_jsonl(path)
    record_run(run, "gen-data", args.argv, [path, meta_path(path)])
    print(f"wrote {len(data)} transitions to {path}")
    return EXIT_OK


TRAIN_DEFAULTS = {"dataset": None, "alpha": "1.0", "beta": "1.0", "lambda_gp": "0.0", "gamma": None,
                  "utility": "alpha-fair", "regularizer_sign": "correct", "loss_mode": "fairdice",
                  "iterations": None, "batch_size": "256", "lr": "3e-4", "hidden": "64,64", "seed": None,
                  "out": None}


def _hp_from_args(args, gamma: float) -> HyperParams:
    try:
        return HyperParams(
            alpha=float(args.alpha), beta=float(args.beta), lambda_gp=float(args.lambda_gp),
            gamma=float(args.gamma) if args.gamma is not None else gamma,
            utility_kind=UtilityKind(args.utility), regularizer_sign=RegularizerSign(args.regularizer_sign),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_dataset(path) -> TransitionDataset:
    if not path:
        raise UsageError("--dataset is required")
    if not Path(path).exists():
        raise UsageError(f"dataset {path} does not exist")
    return TransitionDataset.from_jsonl(path)


def _recipe_from_meta(meta: dict) -> DataRecipe:
    rec = dict(meta.get("recipe") or {"env": meta.get("env", "four-rooms")})
    if rec.get("goal_mix") is not None:
        rec["goal_mix"] = tuple(rec["goal_mix"])
    return DataRecipe(**rec)


def cmd_train(args) -> int:
    args = merge_config(args, TRAIN_DEFAULTS)
    data = _load_dataset(args.dataset)
    recipe = _recipe_from_meta(data.meta)
    seed = int(args.seed if args.seed is not None else data.meta.get("seed", 0))
    run = _out_dir(args)
    stem = f"{recipe.env}-a{args.alpha}-b{args.beta}-{args.loss_mode}-seed{seed}"
    if recipe.env in TABULAR_ENVS:
        env = build_env(recipe, int(data.meta.get("seed", 0)))
        hp = _hp_from_args(args, env.gamma)
        problem = TabularProblem.from_dataset(data, env.n_states)
        res = solve_critic_full_batch(problem, hp, iters=int(args.iterations or 50_000), lr=float(args.lr))
        pi = extract_policy(problem, res, hp, env.n_states, env.n_actions)
        path = save_artifact(run / "artifacts" / f"{stem}.json", env.env_id, hp, seed, res, pi)
    else:
        hp = _hp_from_args(args, 0.99)
        try:
            cfg = TrainConfig(hp, iterations=int(args.iterations or 10_000), batch_size=int(args.batch_size),
                              loss_mode=LossMode(args.loss_mode), lr=float(args.lr),
                              hidden=parse_ints(args.hidden), seeds=(seed,))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        art = train(data, N_OPTIONS, cfg, seed=seed, env_id=recipe.env)
        path = art.save(run / "artifacts" / f"{stem}.fdta")
    record_run(run, "train", args.argv, [path])
    print(f"wrote {path}")
    return EXIT_OK


EVAL_DEFAULTS = {"artifact": None, "rollouts": "100", "horizon": None, "seed": "0", "reference": None,
                 "dataset": None, "out": None}


def cmd_eval(args) -> int:
    args = merge_config(args, EVAL_DEFAULTS)
    rng = np.random.default_rng([int(args.seed), 7])
    n = int(args.rollouts)
    if args.reference:
        try:
            actor = reference_actor(args.reference)
        except ValueError:
            raise UsageError(f"unknown reference policy {args.reference!r}") from None
        rep = evaluate_policy_mc("group-fair", actor, n, int(args.horizon or GF_HORIZON), rng)
        label = f"reference-{args.reference}"
    else:
        if not args.artifact or not Path(args.artifact).exists():
            raise UsageError("--artifact must name an existing artifact (or pass --reference)")
        path = Path(args.artifact)
        if path.suffix == ".json":
            rec = load_artifact(path)
            if not args.dataset:
                raise UsageError("tabular evaluation needs --dataset to rebuild the environment")
            meta = TransitionDataset.from_jsonl(args.dataset).meta
            env = build_env(_recipe_from_meta(meta), int(meta.get("seed", 0)))
            rep = evaluate_policy_mc(env, rec["policy"], n, int(args.horizon or 500), rng)
        else:
            art = TrainArtifact.load(path)
            rep = evaluate_policy_mc("group-fair", art, n, int(args.horizon or GF_HORIZON), rng)
        label = path.stem
    run = _out_dir(args)
    out = run / "eval" / f"{label}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rep.summary(), indent=2) + "\n")
    record_run(run, "eval", args.argv, [out])
    print(json.dumps({k: v for k, v in rep.summary().items() if k != "mean_returns"}, indent=2))
    return EXIT_OK


SWEEP_DEFAULTS = {"env": "four-rooms", "dataset": None, "alphas": ",".join(map(str, ALPHA_GRID)),
                  "betas": ",".join(map(str, BETA_GRID)), "lambdas": "0", "loss_modes": "fairdice",
                  "seeds": "0-4", "rollouts": "100", "workers": None, "tabular_iters": "50000",
                  "train_iters": "10000", "hidden": "64,64", "batch_size": "256", "gamma": None,
                  "behavior": None, "trajectories": None, "horizon": None, "optimality": "0.5",
                  "stochasticity": "0.1", "goal_mix": None, "out": None}


def _spec_from_args(args, **override) -> SweepSpec:
    recipe = _recipe_from_args(args)
    if args.dataset:
        if not Path(args.dataset).exists():
            raise UsageError(f"dataset {args.dataset} does not exist")
        meta = TransitionDataset.from_jsonl(args.dataset).meta if args.env in TABULAR_ENVS else {}
        if meta.get("recipe"):
            recipe = _recipe_from_meta(meta)
    try:
        fields = dict(
            env=args.env, recipe=recipe, alphas=parse_floats(args.alphas), betas=parse_floats(args.betas),
            lambdas=parse_floats(args.lambdas), loss_modes=tuple(m for m in str(args.loss_modes).split(",") if m),
            seeds=parse_ints(args.seeds), rollouts=int(args.rollouts), dataset=args.dataset,
            tabular_iters=int(args.tabular_iters), train_iters=int(args.train_iters),
            hidden=parse_ints(args.hidden), batch_size=int(args.batch_size),
            gamma=float(args.gamma) if args.gamma else None,
        )
        fields.update(override)
        return SweepSpec(**fields)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _progress(rows):
    r = rows[-1]
    print(f"seed {r['seed']}: {len(rows)} cells done", flush=True)


def cmd_sweep(args) -> int:
    args = merge_config(args, SWEEP_DEFAULTS)
    spec = _spec_from_args(args)
    run = _out_dir(args)
    run.mkdir(parents=True, exist_ok=True)
    (run / "sweep_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    csv_path = run / "sweep.csv"
    run_sweep(spec, csv_path, int(args.workers) if args.workers else None, progress=_progress)
    written = write_report(csv_path, run / "report")
    record_run(run, "sweep", args.argv, [csv_path, run / "sweep_spec.json", *written])
    return EXIT_OK


def cmd_forensics(args) -> int:
    args = merge_config(args, {**SWEEP_DEFAULTS, "env": "group-fair", "alphas": "1.0", "seeds": "0-9",
                               "loss_modes": "fairdice,fairdice-buggy,plain-bc", "lambdas": "0.0001"})
    spec = _spec_from_args(args)
    if len(spec.seeds) < 5:
        raise UsageError(f"forensics needs at least 5 seeds, got {len(spec.seeds)}")
    run = _out_dir(args)
    csv_path = run / "forensics.csv"
    rows = run_sweep(spec, csv_path, int(args.workers) if args.workers else None, progress=_progress)
    rows = read_rows(csv_path)
    res = kruskal_over_beta(rows)
    table = run / "forensics_kw.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss_mode", "H", "p", "groups", "n", "beta_sensitive"])
        for mode, v in res.table.items():
            w.writerow([mode, repr(v["H"]), repr(v["p"]), v["groups"], v["n"], v["p"] < 0.05])
    plots = []
    for mode in res.table:
        groups = {}
        for r in rows:
            if r["loss_mode"] == mode:
                groups.setdefault(f"{r['beta']:g}", []).append(r["nsw"])
        groups = dict(sorted(groups.items(), key=lambda kv: float(kv[0])))
        p = run / f"forensics_{mode}.svg"
        p.write_text(box_plot(groups, f"NSW by beta ({mode})", "beta", "NSW"))
        plots.append(p)
    for mode, v in res.table.items():
        verdict = "beta-sensitive" if v["p"] < 0.05 else "beta-insensitive"
        print(f"{mode:16s} H={v['H']:.3f} p={v['p']:.4g} -> {verdict}")
    record_run(run, "forensics", args.argv, [csv_path, table, *plots])
    return EXIT_OK


def write_report(csv_path: Path, out_dir: Path) -> list[Path]:
    """Summary CSV plus one SVG per (metric, loss mode, lambda): curves per alpha over beta."""
    rows = read_rows(csv_path)
    if not rows:
        raise UsageError(f"{csv_path} holds no rows")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    summary = out_dir / "summary.csv"
    metrics = ("nsw", "utilitarian", "jain")
    aggs = {m: aggregate(rows, m) for m in metrics}
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss_mode", "lambda_gp", "alpha", "beta", "n_seeds"]
                   + [f"{m}_{s}" for m in metrics for s in ("mean", "ci95")])
        for key in aggs["nsw"]:
            vals = []
            for m in metrics:
                mean, ci, n = aggs[m][key]
                vals += [f"{mean:.6g}", f"{ci:.6g}"]
            w.writerow([*key, n, *vals])
    written.append(summary)
    for m in metrics:
        panels: dict = {}
        for (mode, lam, alpha, beta), (mean, ci, _) in aggs[m].items():
            panels.setdefault((mode, lam), {}).setdefault(f"alpha={alpha:g}", []).append((beta, mean, ci))
        for (mode, lam), series in panels.items():
            finite = [x for s in series.values() for x in s if math.isfinite(x[1])]
            if not finite:
                continue
            p = out_dir / f"{m}_{mode}_lambda{lam:g}.svg"
            p.write_text(line_plot(series, f"{m} vs beta ({mode}, lambda={lam:g})", "beta", m,
                                   logx=all(x[0] > 0 for x in finite)))
            written.append(p)
    return written


def cmd_report(args) -> int:
    args = merge_config(args, {"csv": None, "out": None})
    if not args.csv or not Path(args.csv).exists():
        raise UsageError("--csv must name an existing sweep CSV")
    out = Path(args.out) if args.out else Path(args.csv).parent / "report"
    written = write_report(Path(args.csv), out)
    record_run(out.parent, "report", args.argv, written)
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairdice", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value file with sections")
        sp.add_argument("--out", help="run directory (default runs/default)")

    def data_flags(sp):
        sp.add_argument("--env", choices=ENVS)
        sp.add_argument("--behavior")
        sp.add_argument("--stochasticity")
        sp.add_argument("--optimality")
        sp.add_argument("--trajectories")
        sp.add_argument("--horizon")
        sp.add_argument("--rollouts")
        sp.add_argument("--goal-mix", dest="goal_mix", help="e.g. 0.8,0.1,0.1")

    sp = sub.add_parser("gen-data", help="collect an offline dataset")
    common(sp)
    data_flags(sp)
    sp.add_argument("--seed")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train on a dataset")
    common(sp)
    sp.add_argument("--dataset")
    for flag in ("alpha", "beta", "gamma", "lr", "seed", "iterations", "hidden"):
        sp.add_argument(f"--{flag}")
    sp.add_argument("--lambda", dest="lambda_gp")
    sp.add_argument("--batch-size", dest="batch_size")
    sp.add_argument("--utility", choices=[k.value for k in UtilityKind])
    sp.add_argument("--regularizer-sign", dest="regularizer_sign", choices=[k.value for k in RegularizerSign])
    sp.add_argument("--loss-mode", dest="loss_mode", choices=[k.value for k in LossMode])
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate an artifact or a reference policy")
    common(sp)
    sp.add_argument("--artifact")
    sp.add_argument("--dataset", help="dataset the tabular artifact was trained on")
    sp.add_argument("--reference", help="group-fair reference policy instead of an artifact")
    sp.add_argument("--rollouts")
    sp.add_argument("--horizon")
    sp.add_argument("--seed")
    sp.set_defaults(func=cmd_eval)

    for name, func, helptext in (("sweep", cmd_sweep, "grid sweep over alpha, beta, lambda and seeds"),
                                 ("forensics", cmd_forensics, "beta-sensitivity test per loss mode")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        data_flags(sp)
        sp.add_argument("--dataset")
        sp.add_argument("--alphas")
        sp.add_argument("--betas")
        sp.add_argument("--lambdas")
        sp.add_argument("--loss-modes", dest="loss_modes")
        sp.add_argument("--seeds", help="e.g. 0-9 or 0,3,5")
        sp.add_argument("--workers")
        sp.add_argument("--tabular-iters", dest="tabular_iters")
        sp.add_argument("--train-iters", dest="train_iters")
        sp.add_argument("--hidden")
        sp.add_argument("--batch-size", dest="batch_size")
        sp.add_argument("--gamma")
        sp.set_defaults(func=func)

    sp = sub.add_parser("report", help="CSV summary and SVG plots from a sweep CSV")
    common(sp)
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fairdice {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, TrainingError, FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"fairdice {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"fairdice {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
