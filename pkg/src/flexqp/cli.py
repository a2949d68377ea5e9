"""Command-line front end tying the package together.

Five subcommands cover the scripted workflows: ``generate`` writes a
problem dataset with a manifest, ``solve`` runs one QP from a problem
file, ``bench`` runs every manifest entry through the benchmark
harness, ``sqp`` solves a nonlinear task file, and ``certify`` turns a
stored loss grid plus a KL divergence into a certified bound.

Exit codes are a stable contract for shell scripting: 0 when the run
completed (Solved QP, converged SQP, finished benchmark or bound), 2
when the solver proved the original constraints inconsistent and
returned the closest elastic answer, 3 when an iteration or time
budget ran out (MaxIter, Timeout, stalled SQP), and 1 on usage or IO
errors (Unbounded lands here too: it signals a malformed problem, not
an exhausted budget).  Results go to stdout as JSON; floats render
through repr and round-trip as IEEE-754 doubles.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import bench, probgen, qp_core, solver, sqp
from .policy import PolicyError, adaptive, fixed, learned

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_BUDGET = 3

_STATUS_EXIT = {
    qp_core.Status.SOLVED: EXIT_OK,
    qp_core.Status.SOLVED_INFEASIBLE_ORIGINAL: EXIT_INFEASIBLE,
    qp_core.Status.MAX_ITER: EXIT_BUDGET,
    qp_core.Status.TIMEOUT: EXIT_BUDGET,
    qp_core.Status.UNBOUNDED: EXIT_USAGE,
}

_SQP_EXIT = {
    sqp.SqpStatus.CONVERGED: EXIT_OK,
    sqp.SqpStatus.MAX_ITER: EXIT_BUDGET,
    sqp.SqpStatus.STALLED: EXIT_BUDGET,
}

_TRACE_FIELDS = (
    "zeta_dual", "zeta_I", "zeta_E", "prim_x", "prim_s", "prim_I",
    "prim_E", "dual_x", "dual_s", "dual_I", "dual_E",
)


class CliError(RuntimeError):
    """Raised for unusable flag combinations or malformed inputs."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which collides with the
    # infeasible-original exit code; route usage errors to 1 instead.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _policy_from_args(args):
    if args.policy == "fixed":
        return fixed()
    if args.policy == "adaptive":
        return adaptive()
    if not args.weights:
        raise CliError("--policy learned requires --weights")
    return learned(args.weights)


def _inf_norm(a) -> float:
    return float(np.max(np.abs(a), initial=0.0))


def _write_qp_trace(path, trace):
    # One JSON line per captured iteration, holding the inf norm of
    # every residual block; this is the cross-implementation parity
    # format, so field names match the ResidualBundle attributes.
    with open(path, "w") as fh:
        for k, bundle in enumerate(trace):
            rec = {"k": k}
            for name in _TRACE_FIELDS:
                rec[name] = _inf_norm(getattr(bundle, name))
            fh.write(json.dumps(rec) + "\n")


def cmd_generate(args) -> int:
    """Write a dataset with write_dataset and print the manifest path."""
    manifest = probgen.write_dataset(args.out, args.class_tag, args.count,
                                     start_seed=args.seed)
    print(manifest)
    return EXIT_OK


def cmd_solve(args) -> int:
    """Solve one QP file; print the solution document as JSON."""
    prob = qp_core.load(args.problem)
    settings = solver.SolveSettings(
        eps_abs=args.eps, max_iter=args.max_iter,
        timeout_ms=args.timeout_ms, policy=_policy_from_args(args),
        method=args.method, record_trace=args.trace is not None)
    holder = {}

    def grab(state, params):
        holder["state"] = state

    sol, trace = solver.solve(prob, settings=settings, on_iteration=grab)
    if args.trace is not None:
        _write_qp_trace(args.trace, trace)
    state = holder.get("state")
    relaxed_inf = (solver.relaxed_residuals(prob, state).max_all()
                   if state is not None else float("inf"))
    _, qp_inf = qp_core.qp_residual(prob, sol.x, sol.y_I, sol.y_E)
    feas = solver.classify_feasibility(sol, eps=args.eps)
    doc = {
        "status": sol.status.value,
        "iterations": sol.iterations,
        "objective": sol.objective,
        "solve_time_s": sol.solve_time,
        "factorizations": sol.factorizations,
        "cg_iterations": sol.cg_iterations,
        "qp_residual_inf": qp_inf,
        "relaxed_residual_inf": relaxed_inf,
        "feasible": feas.feasible,
        "violated_ineq": [int(i) for i in feas.violated_ineq],
        "violated_eq": [int(i) for i in feas.violated_eq],
        "x": sol.x.tolist(),
        "y_I": sol.y_I.tolist(),
        "y_E": sol.y_E.tolist(),
        "z_I": sol.z_I.tolist(),
        "z_E": sol.z_E.tolist(),
    }
    print(json.dumps(doc))
    return _STATUS_EXIT[sol.status]


def cmd_bench(args) -> int:
    """Run a manifest through the harness; write CSV plus summary."""
    tag = args.tag or f"{args.policy}-{args.method}"
    config = bench.SolverConfig(tag=tag, policy=args.policy,
                                weights_path=args.weights,
                                method=args.method, max_iter=args.max_iter)
    records = bench.run_benchmark(args.manifest, config=config,
                                  eps=args.eps, timeout_ms=args.timeout_ms,
                                  jobs=args.jobs)
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    out_csv = args.out_csv or os.path.join(base_dir, f"bench-{tag}.csv")
    out_summary = args.out_summary or os.path.join(
        base_dir, f"bench-{tag}.summary.json")
    bench.write_csv(records, out_csv)
    bench.write_summary(records, out_summary)
    doc = {"csv": out_csv, "summary_path": out_summary,
           "summary": bench.summarize(records)}
    print(json.dumps(doc))
    return EXIT_OK


def cmd_sqp(args) -> int:
    """Solve a task file; print trajectory, history, final residual."""
    task = sqp.load_task(args.task)
    if isinstance(task, sqp.OcpSpec):
        nlp = sqp.build_ocp_nlp(task)
        T = task.T
    else:
        nlp = sqp.build_safety_filter_nlp(task)
        T = int(np.asarray(task.u_ref).shape[0])
    n_x, n_u = task.dims
    settings = sqp.SqpSettings(
        max_sqp_iter=args.max_iter, eps_sqp=args.eps,
        qp_timeout_ms=args.timeout_ms, qp_method=args.method,
        qp_policy=(None if args.policy == "fixed"
                   else _policy_from_args(args)))
    iterates = []

    def record(k, x):
        X, U = sqp.unstack(x, n_x, n_u, T)
        iterates.append({"k": k, "states": X.tolist(),
                         "controls": U.tolist()})

    res = sqp.sqp_solve(nlp, settings,
                        on_accept=record if args.trace else None)
    if args.trace:
        with open(args.trace, "w") as fh:
            for rec in iterates:
                fh.write(json.dumps(rec) + "\n")
    doc = json.loads(sqp.result_to_json(res, n_x, n_u, T))
    doc["kkt"] = sqp.nlp_kkt_residual(nlp, res.x, res.y_I, res.y_E)
    print(json.dumps(doc))
    return _SQP_EXIT[res.status]


def cmd_certify(args) -> int:
    """Bound the expected loss from a stored grid and a KL divergence."""
    with open(args.losses) as fh:
        doc = json.load(fh)
    raw = doc["losses"] if isinstance(doc, dict) else doc
    losses = np.asarray(raw, dtype=np.float64).ravel()
    bound = bench.final_bound(losses, args.kl, args.n, args.m,
                              delta=args.delta,
                              delta_prime=args.delta_prime)
    out = {
        "sample_loss": float(np.clip(losses, 0.0, 1.0).mean()),
        "kl": args.kl, "N": args.n, "M": args.m,
        "delta": args.delta, "delta_prime": args.delta_prime,
        "bound": bound,
    }
    print(json.dumps(out))
    return EXIT_OK


def _solver_flags(p, eps=1e-3, max_iter=4000, timeout_ms=None):
    p.add_argument("--eps", type=float, default=eps,
                   help="convergence tolerance (inf norm)")
    p.add_argument("--max-iter", type=int, default=max_iter,
                   help="iteration budget")
    p.add_argument("--timeout-ms", type=float, default=timeout_ms,
                   help="wall-clock budget in milliseconds")
    p.add_argument("--policy", choices=("fixed", "adaptive", "learned"),
                   default="fixed", help="parameter policy")
    p.add_argument("--weights", help="weight file for --policy learned")
    p.add_argument("--method", choices=("direct", "indirect"),
                   default="direct", help="linear-system backend")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flexqp",
                     description="Elastic QP solver command line.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate",
                       help="write a problem dataset plus manifest")
    p.add_argument("class_tag", choices=sorted(probgen.CLASSES),
                   help="problem class")
    p.add_argument("count", type=int, help="number of instances")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("solve", help="solve one QP from a problem file")
    p.add_argument("problem", help="problem JSON path")
    _solver_flags(p)
    p.add_argument("--trace", metavar="PATH",
                   help="write per-iteration residual norms as JSON lines")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", help="run a manifest through the harness")
    p.add_argument("manifest", help="manifest JSON path")
    _solver_flags(p, max_iter=None, timeout_ms=1000.0)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--tag", help="solver tag for output files")
    p.add_argument("--out-csv", help="per-problem CSV path")
    p.add_argument("--out-summary", help="summary JSON path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sqp", help="solve a nonlinear task file")
    p.add_argument("task", help="task JSON path (kind: ocp/safety_filter)")
    _solver_flags(p, eps=1e-2, max_iter=50, timeout_ms=10000.0)
    p.add_argument("--trace", metavar="PATH",
                   help="write per-iteration trajectories as JSON lines")
    p.set_defaults(func=cmd_sqp)

    p = sub.add_parser("certify",
                       help="certified loss bound from a loss grid")
    p.add_argument("losses", help="JSON file with N x M losses")
    p.add_argument("--kl", type=float, required=True,
                   help="KL divergence of the trained policy")
    p.add_argument("--n", type=int, required=True,
                   help="number of problems (grid rows)")
    p.add_argument("--m", type=int, required=True,
                   help="policy samples per problem (grid columns)")
    p.add_argument("--delta", type=float, default=0.009,
                   help="confidence level of the distribution bound")
    p.add_argument("--delta-prime", type=float, default=0.001,
                   help="confidence level of the sample-mean bound")
    p.set_defaults(func=cmd_certify)
    return parser


def main(argv=None) -> int:
    """Parse arguments, dispatch the subcommand, return the exit code.

    Parameters
    ----------
    argv : list of str, optional
        Argument vector without the program name; defaults to
        ``sys.argv[1:]``.

    Returns
    -------
    int
        Process exit code per the contract in the module docstring.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits directly on usage errors and --help; fold that
        # into the return-code contract so main() never raises
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, CliError, PolicyError,
            bench.BenchError, probgen.GeneratorError,
            sqp.SqpError) as exc:
        print(f"flexqp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
