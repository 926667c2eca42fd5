"""Command line front end.

The NPDHG_THREADS cap must land in the environment before numpy first
loads its BLAS, so this module sets the thread variables at import time
and only then pulls in the heavy modules.
"""

import argparse
import os
import sys


def _cap_threads():
    raw = os.environ.get("NPDHG_THREADS", "").strip()
    if not raw or raw == "0":
        return  # 0 = auto; leave the BLAS defaults alone
    try:
        n = max(1, int(raw))
    except ValueError:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


_cap_threads()

import numpy as np  # noqa: E402

from . import driver, npdhg, oracles  # noqa: E402
from . import problems as prob  # noqa: E402


def build_parser():
    parser = argparse.ArgumentParser(
        prog="npdg",
        description="Natural primal-dual hybrid gradient experiments: "
                    "train, evaluate, and cross-check against the benchmark oracles.")
    sub = parser.add_subparsers(dest="command")

    def with_config(sp):
        sp.add_argument("--config", metavar="PATH",
                        help="run configuration file (key = value lines)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override run.seed from the config")
        sp.add_argument("--out", default=None,
                        help="override run.out (output directory)")
        return sp

    with_config(sub.add_parser(
        "run", help="train with the optimizer named in the config"))
    with_config(sub.add_parser(
        "baseline", help="train the Adam baseline for the configured problem"))
    with_config(sub.add_parser(
        "oracle", help="export the benchmark solution for the configured problem"))

    demo = sub.add_parser("demo-pdhg-grid",
                          help="grid saddle-point demo: observed vs predicted rate")
    demo.add_argument("--nx", type=int, default=32, help="interior grid size")

    sub.add_parser("check", help="run the oracle self-check suite")

    ev = with_config(sub.add_parser(
        "eval", help="score a saved checkpoint on a fresh evaluation stream"))
    ev.add_argument("--checkpoint", metavar="PATH", required=True)
    ev.add_argument("--n-eval", type=int, default=100000,
                    help="evaluation sample count")
    return parser


def _load_config(args, parser):
    if not args.config:
        sys.stderr.write(f"usage: npdg {args.command} --config PATH "
                         "[--seed N] [--out DIR]\n"
                         "error: --config is required\n")
        raise SystemExit(1)
    rc = driver.load_config(args.config)
    if args.seed is not None:
        rc.seed = args.seed
    if args.out is not None:
        rc.out = args.out
    return rc


def _print_last_row(rows):
    if not rows:
        print("no metric rows recorded")
        return
    r = rows[-1]
    print(f"final: iter={r.iter} loss={r.loss:.6g} rel_l2={r.rel_l2:.6g} "
          f"rel_h1={r.rel_h1:.6g}")


def _cmd_run(args, parser, force_baseline=False):
    rc = _load_config(args, parser)
    if force_baseline:
        rc.optimizer = "pd_adam" if rc.kind == "ot" else "adam_pinn"
    result = driver.run_experiment(rc)
    _print_last_row(result.rows)
    if result.out_dir:
        print(f"metrics: {result.metrics_path}")
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_oracle(args, parser):
    rc = _load_config(args, parser)
    out_dir = rc.out or "."
    os.makedirs(out_dir, exist_ok=True)
    if rc.kind == "allen_cahn":
        nodes, fd_values = driver.allen_cahn_fd_reference(rc)
        for k, values in enumerate(fd_values, start=1):
            path = os.path.join(out_dir, f"oracle_step{k:02d}.csv")
            driver.grid_to_csv(path, nodes, values, d=rc.d)
        print(f"wrote {len(fd_values)} benchmark profiles to {out_dir}")
        return 0
    if rc.kind == "ot":
        source, target = driver.ot_measures(rc)
        ref = driver.ot_reference(source, target)
        if rc.d == 1:
            xs = np.linspace(-4.0, 4.0, 801)
            path = os.path.join(out_dir, "oracle_map.csv")
            driver.grid_to_csv(path, xs, ref(xs[:, None])[:, 0], d=1)
            print(f"wrote transport map samples to {path}")
        else:
            A, b = oracles.ot_map_gaussian(source["cov"], target["cov"])
            print("affine transport map T(x) = A x + b")
            print("A =")
            for row in A:
                print("  " + " ".join(f"{v: .10f}" for v in row))
            print("b = " + " ".join(f"{v: .10f}" for v in b))
        return 0
    if rc.d > 2:
        raise driver.ConfigError("grid export of the exact solution supports d <= 2")
    spec = driver._build_spec(rc)
    exact = prob.exact_solution(spec)
    path = os.path.join(out_dir, "oracle_solution.csv")
    if rc.d == 1:
        if isinstance(spec.domain, prob.Box):
            nodes = np.linspace(spec.domain.a[0], spec.domain.b[0], 401)
        else:
            nodes = np.linspace(-spec.domain.R, spec.domain.R, 401)
        driver.grid_to_csv(path, nodes, exact.u.value(nodes[:, None]), d=1)
    else:
        if isinstance(spec.domain, prob.Box):
            gx = np.linspace(spec.domain.a[0], spec.domain.b[0], 101)
            gy = np.linspace(spec.domain.a[1], spec.domain.b[1], 101)
        else:
            gx = gy = np.linspace(-spec.domain.R, spec.domain.R, 101)
        XX, YY = np.meshgrid(gx, gy, indexing="ij")
        pts = np.column_stack([XX.ravel(), YY.ravel()])
        vals = exact.u.value(pts).reshape(101, 101)
        driver.grid_to_csv(path, gx, vals, d=2)
    print(f"wrote exact solution samples to {path}")
    return 0


def _cmd_demo(args):
    observed, spectral = oracles.grid_pdhg_demo(args.nx)
    gap = abs(observed - spectral) / spectral
    print(f"observed contraction rate:  {observed:.8f}")
    print(f"spectral prediction:        {spectral:.8f}")
    print(f"relative gap:               {100.0 * gap:.3f}%")
    return 0


def _cmd_eval(args, parser):
    rc = _load_config(args, parser)
    problem = driver.build_problem(rc)
    rel_l2, rel_h1 = driver.eval_checkpoint(args.checkpoint, problem,
                                           n_eval_samples=args.n_eval,
                                           seed=rc.seed)
    print(f"rel_l2={rel_l2:.10g} rel_h1={rel_h1:.10g}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "run":
            return _cmd_run(args, parser)
        if args.command == "baseline":
            return _cmd_run(args, parser, force_baseline=True)
        if args.command == "oracle":
            return _cmd_oracle(args, parser)
        if args.command == "demo-pdhg-grid":
            return _cmd_demo(args)
        if args.command == "check":
            return 0 if driver.self_check() else 2
        if args.command == "eval":
            return _cmd_eval(args, parser)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    except driver.ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"io error: {exc}\n")
        return 1
    except (npdhg.DivergenceError, prob.PoisonedLossError, OverflowError,
            FloatingPointError, RuntimeError, ValueError) as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
