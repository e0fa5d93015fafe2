"""Compare the compiled and numpy tabular kernels.

Each backend runs in its own subprocess because the choice is made once at
import time (``FAIRDICE_PURE_PYTHON`` forces the numpy fallback).

    python3 benchmarks/bench_kernels.py --iters 20000 --repeat 3
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def run_backend(args) -> dict:
    """Time loss_and_grad and adam_solve in this process's backend."""
    import numpy as np

    from fairdice import kernels
    from fairdice.experiments import build_dataset, build_env, default_recipe
    from fairdice.losses import HyperParams
    from fairdice.tabular import TabularProblem, _kernel_args

    out = {"backend": kernels.BACKEND, "problems": {}}
    for name in ("four-rooms", "momdp"):
        recipe = default_recipe(name)
        env, data = build_env(recipe, 0), build_dataset(recipe, 0)
        problem = TabularProblem.from_dataset(data, env.n_states)
        hp = HyperParams(alpha=1.0, beta=0.1, gamma=env.gamma)
        kargs = _kernel_args(problem, hp)
        nu, xi = np.zeros(problem.n_states), np.zeros(problem.rewards.shape[1])

        evals = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            for _ in range(args.evals):
                kernels.loss_and_grad(nu, xi, *kargs)
            evals.append((time.perf_counter() - t0) / args.evals)
        solves = []
        final = None
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            _, _, trace, n_run, _ = kernels.adam_solve(nu, xi, *kargs, 3e-4, args.iters, 0.0, 0)
            solves.append(time.perf_counter() - t0)
            final = float(trace[n_run - 1])
        out["problems"][name] = {
            "rows": int(len(problem.s)),
            "states": int(problem.n_states),
            "eval_us": 1e6 * min(evals),
            "solve_s": min(solves),
            "iters": args.iters,
            "final_loss": final,
        }
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iters", type=int, default=20_000, help="Adam iterations per solve")
    p.add_argument("--evals", type=int, default=2_000, help="loss_and_grad calls per timing")
    p.add_argument("--repeat", type=int, default=3, help="best-of repeats")
    p.add_argument("--json", help="also write the results here")
    p.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args(argv)

    if args.child:
        print(json.dumps(run_backend(args)))
        return 0

    results = {}
    for label, pure in (("compiled", False), ("python", True)):
        env = dict(os.environ)
        env.pop("FAIRDICE_PURE_PYTHON", None)
        if pure:
            env["FAIRDICE_PURE_PYTHON"] = "1"
        cmd = [sys.executable, __file__, "--child", "--iters", str(args.iters), "--evals", str(args.evals),
               "--repeat", str(args.repeat)]
        res = json.loads(subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout)
        if res["backend"] != label:
            print(f"note: requested {label} backend but got {res['backend']} (extension not built?)")
        results[label] = res

    print(f"{'problem':12s} {'backend':9s} {'rows':>6s} {'eval us':>10s} {'solve s':>9s} {'final loss':>14s}")
    for name in results["python"]["problems"]:
        for label, res in results.items():
            r = res["problems"][name]
            print(f"{name:12s} {res['backend']:9s} {r['rows']:6d} {r['eval_us']:10.1f} {r['solve_s']:9.3f} "
                  f"{r['final_loss']:14.8f}")
        c, py = results["compiled"]["problems"][name], results["python"]["problems"][name]
        print(f"{name:12s} speedup: eval x{py['eval_us'] / c['eval_us']:.1f}, solve x{py['solve_s'] / c['solve_s']:.1f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
