"""Benchmark harness and certification arithmetic.

Two halves share this module because they meet in the same reports:

* A batch runner that solves every problem in a dataset manifest from a
  cold start, records work counters (iterations, KKT factorizations, CG
  iterations) alongside the final residuals, and aggregates them into a
  CSV table and a JSON summary.  Batches are compared with the shifted
  geometric mean of solve times, normalized so the fastest configuration
  reads 1.0.
* PAC-Bayes bound arithmetic for certifying a stochastic policy's mean
  loss: the two bounded losses (solution-progress ratio and log-scaled
  residual ratio), the inverse Bernoulli KL divergence, and the bound
  compositions.  The KL divergence between the policy's posterior and
  prior is taken as a numeric input (it ships inside trained weight
  files); this module only evaluates the bound.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import policy as policy_mod
from . import probgen, qp_core, solver
from .qp_core import QpProblem, Status


class BenchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# benchmark records


@dataclass
class SolverConfig:
    """One benchmark configuration (a column in the comparison).

    policy is "fixed", "adaptive", or "learned" (the latter requires
    weights_path).  max_iter=None means unlimited iterations: the run
    stops on tolerance or timeout only.
    """

    tag: str = "fixed-direct"
    policy: str = "fixed"
    weights_path: str | None = None
    method: str = "direct"
    check_every: int = 1
    polish: bool = False
    max_iter: int | None = None


@dataclass
class BenchmarkRecord:
    name: str
    class_tag: str
    seed: int
    solver_tag: str
    status: str
    solved: bool
    wall_time: float
    iterations: int
    factorizations: int
    cg_iterations: int
    qp_residual_inf: float
    relaxed_residual_inf: float
    violations: int


@dataclass
class LossSample:
    """Per-problem scalar loss, clipped into [0, 1] on construction."""

    value: float

    def __post_init__(self):
        self.value = float(min(max(self.value, 0.0), 1.0))


CSV_COLUMNS = (
    "name", "class", "seed", "solver", "status", "solved", "iterations",
    "factorizations", "cg_iterations", "qp_residual_inf",
    "relaxed_residual_inf", "violations", "wall_time_s",
)
TIMING_COLUMNS = ("wall_time_s",)

_UNLIMITED_ITERS = 10 ** 9


def _build_policy(config: SolverConfig):
    if config.policy == "fixed":
        return policy_mod.fixed()
    if config.policy == "adaptive":
        return policy_mod.adaptive()
    if config.policy == "learned":
        if not config.weights_path:
            raise BenchError("learned policy needs a weights_path")
        return policy_mod.learned(config.weights_path)
    raise BenchError(f"unknown policy {config.policy!r}")


def solve_recorded(prob: QpProblem, config: SolverConfig, eps: float,
                   timeout_ms: float | None, *, class_tag: str = "",
                   seed: int = -1) -> BenchmarkRecord:
    """Cold-start solve of one problem, reduced to a BenchmarkRecord."""
    settings = solver.SolveSettings(
        eps_abs=eps,
        max_iter=config.max_iter if config.max_iter is not None
        else _UNLIMITED_ITERS,
        timeout_ms=timeout_ms,
        policy=_build_policy(config),
        method=config.method,
        check_every=config.check_every,
        polish=config.polish,
    )
    holder = {}

    def grab(state, params):
        holder["state"] = state

    sol, _ = solver.solve(prob, settings=settings, on_iteration=grab)
    state = holder.get("state")
    relaxed_inf = (solver.relaxed_residuals(prob, state).max_all()
                   if state is not None else float("inf"))
    _, qp_inf = qp_core.qp_residual(prob, sol.x, sol.y_I, sol.y_E)
    feas = solver.classify_feasibility(sol, eps)
    return BenchmarkRecord(
        name=prob.name, class_tag=class_tag, seed=seed,
        solver_tag=config.tag, status=sol.status.value,
        solved=(sol.status == Status.SOLVED), wall_time=sol.solve_time,
        iterations=sol.iterations, factorizations=sol.factorizations,
        cg_iterations=sol.cg_iterations, qp_residual_inf=qp_inf,
        relaxed_residual_inf=relaxed_inf,
        violations=int(feas.violated_ineq.size + feas.violated_eq.size),
    )


def _run_entry(args):
    entry, base_dir, config, eps, timeout_ms = args
    path = os.path.join(base_dir, entry["problem"])
    if not os.path.exists(path):
        return BenchmarkRecord(
            name=entry["problem"], class_tag=entry.get("class", ""),
            seed=int(entry.get("seed", -1)), solver_tag=config.tag,
            status="Skipped", solved=False, wall_time=0.0, iterations=0,
            factorizations=0, cg_iterations=0,
            qp_residual_inf=float("inf"),
            relaxed_residual_inf=float("inf"), violations=0)
    prob = qp_core.load(path)
    return solve_recorded(prob, config, eps, timeout_ms,
                          class_tag=entry.get("class", ""),
                          seed=int(entry.get("seed", -1)))


def run_benchmark(manifest_path, config: SolverConfig | None = None,
                  eps: float = 1e-3, timeout_ms: float | None = 1000.0,
                  jobs: int = 1) -> list:
    """Solve every problem of a dataset manifest from a cold start.

    Parameters
    ----------
    manifest_path : path-like
        Manifest written by probgen.write_dataset; problem paths inside
        are resolved relative to its directory.  Entries whose problem
        file is missing produce a record with status "Skipped".
    config : SolverConfig
        Solver configuration under test (default fixed-parameter direct).
    eps : float
        Absolute tolerance for the solved classification.
    timeout_ms : float or None
        Per-problem wall-clock budget; None disables it.
    jobs : int
        Worker processes; 1 runs in-process.

    Returns
    -------
    list of BenchmarkRecord
        One record per manifest entry, in manifest order.  Counters are
        deterministic given the configuration; wall times are not.
    """
    config = config or SolverConfig()
    entries = probgen.load_manifest(manifest_path)
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    work = [(e, base_dir, config, eps, timeout_ms) for e in entries]
    if jobs <= 1:
        return [_run_entry(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_entry, work))


def records_to_rows(records) -> list:
    """Rows in CSV_COLUMNS order; floats printed with %.17g."""
    rows = []
    for r in records:
        rows.append([
            r.name, r.class_tag, r.seed, r.solver_tag, r.status,
            int(r.solved), r.iterations, r.factorizations, r.cg_iterations,
            "%.17g" % r.qp_residual_inf, "%.17g" % r.relaxed_residual_inf,
            r.violations, "%.6f" % r.wall_time,
        ])
    return rows


def write_csv(records, path):
    """One row per record in CSV_COLUMNS order (timing columns last, so
    a determinism comparison can drop them by suffix)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        w.writerows(records_to_rows(records))


def summarize(records) -> dict:
    """Aggregate records into per-class and overall statistics.

    Returns a dict with "overall" and "classes" sections; each carries
    the instance count, solved fraction, shifted geometric mean of wall
    times, and mean work counters.
    """
    def agg(rs):
        n = len(rs)
        return {
            "count": n,
            "solved_frac": sum(r.solved for r in rs) / n,
            "sgm_time_s": shifted_geom_mean([r.wall_time for r in rs]),
            "mean_iterations": float(np.mean([r.iterations for r in rs])),
            "mean_factorizations": float(np.mean([r.factorizations for r in rs])),
            "mean_cg_iterations": float(np.mean([r.cg_iterations for r in rs])),
        }

    if not records:
        raise BenchError("no records to summarize")
    classes = {}
    for r in records:
        classes.setdefault(r.class_tag, []).append(r)
    return {
        "solver": records[0].solver_tag,
        "overall": agg(records),
        "classes": {tag: agg(rs) for tag, rs in sorted(classes.items())},
    }


def write_summary(records, path):
    with open(path, "w") as f:
        json.dump(summarize(records), f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# timing aggregation


def shifted_geom_mean(times, shift: float = 1.0) -> float:
    """exp(mean(log(t_i + shift))) - shift over nonnegative times."""
    arr = np.asarray(list(times), dtype=np.float64)
    if arr.size == 0:
        raise BenchError("shifted_geom_mean of an empty sequence")
    if np.any(arr < 0.0):
        raise BenchError("times must be nonnegative")
    return float(np.exp(np.mean(np.log(arr + shift))) - shift)


def normalize(sgms: dict) -> dict:
    """Divide each configuration's mean by the fastest one's."""
    if not sgms:
        raise BenchError("normalize of an empty mapping")
    best = min(sgms.values())
    if best <= 0.0:
        raise BenchError("nonpositive mean cannot normalize")
    return {k: v / best for k, v in sgms.items()}


# ---------------------------------------------------------------------------
# bounded losses


def progress_loss(x0, xK, x_star) -> float:
    """min(||xK - x*|| / ||x0 - x*||, 1); zero when the start is optimal."""
    x0 = np.asarray(x0, dtype=np.float64)
    xK = np.asarray(xK, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    den = float(np.linalg.norm(x0 - x_star))
    if den == 0.0:
        return 0.0
    return float(min(np.linalg.norm(xK - x_star) / den, 1.0))


RESIDUAL_FLOOR = 1e-12


def gen_bound_loss(prob: QpProblem, xi_K, xi_star) -> float:
    """Log-scaled residual-ratio loss clip(1 - log||R(xi_K)||/log||R(xi*)||, 0, 1).

    xi_K and xi_star are (x, y_I, y_E) triples; R stacks the original
    QP's dual stationarity, clipped inequality violation, and equality
    violation, measured in the 2-norm.  The reference residual is floored
    at RESIDUAL_FLOOR so an exact reference does not produce a log
    singularity.  Zero when the iterate matches or beats the reference,
    one when the iterate's residual reaches 1 on the reference's log
    scale, linear in between.
    """
    rK, _ = qp_core.qp_residual(prob, *xi_K)
    rS, _ = qp_core.qp_residual(prob, *xi_star)
    num = float(np.linalg.norm(rK))
    den = max(float(np.linalg.norm(rS)), RESIDUAL_FLOOR)
    if num <= 0.0:
        return 0.0
    log_den = math.log(den)
    if log_den >= 0.0:
        # reference residual at or above 1: the log scale is degenerate,
        # grade pass/fail against the reference directly
        return 0.0 if num <= den else 1.0
    loss = 1.0 - math.log(num) / log_den
    return float(min(max(loss, 0.0), 1.0))


# ---------------------------------------------------------------------------
# PAC-Bayes bound arithmetic


def _kl_bernoulli(p: float, q: float) -> float:
    """KL(B(p) || B(q)) with the 0 log 0 = 0 convention; q in (0, 1)."""
    t = 0.0
    if p > 0.0:
        t += p * math.log(p / q)
    if p < 1.0:
        t += (1.0 - p) * math.log((1.0 - p) / (1.0 - q))
    return t


def inv_kl_bernoulli(p: float, c: float) -> float:
    """Largest q in [p, 1] with KL(B(p) || B(q)) <= c, by bisection.

    KL(B(p) || B(q)) increases in q on [p, 1), so bisection converges;
    100 halvings put the answer well inside 1e-10.  Closed forms used by
    the tests: inv_kl(p, 0) = p and inv_kl(0, c) = 1 - exp(-c).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if not (c >= 0.0 and math.isfinite(c)):
        raise ValueError("c must be finite and nonnegative")
    if p >= 1.0:
        return 1.0
    if c == 0.0:
        # KL(B(p) || B(q)) > 0 strictly for q > p, but its floating
        # evaluation near q = p cancels to roundoff noise; the exact
        # answer needs no search.
        return p
    lo, hi = p, 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if mid >= 1.0 or _kl_bernoulli(p, mid) > c:
            hi = mid
        else:
            lo = mid
    return lo


def pac_bound(sample_loss: float, kl_div: float, N: int,
              delta: float = 0.009) -> float:
    """Certified mean loss from a sample mean over N problems.

    inv_kl(sample_loss, (kl_div + log(2 sqrt(N) / delta)) / N); holds
    with probability 1 - delta for losses bounded in [0, 1].  Values of
    delta at or above 1 make the confidence statement vacuous but leave
    the arithmetic defined (delta = 2 sqrt(N) zeroes the complexity
    term, which is useful for identity checks).
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    if not (delta > 0.0 and math.isfinite(delta)):
        raise ValueError("delta must be positive and finite")
    if kl_div < 0.0:
        raise ValueError("kl_div must be nonnegative")
    c = (kl_div + math.log(2.0 * math.sqrt(N) / delta)) / N
    return inv_kl_bernoulli(float(sample_loss), c)


def final_bound(losses, kl_div: float, N: int, M: int,
                delta: float = 0.009, delta_prime: float = 0.001) -> float:
    """Two-stage certified bound from an N x M loss grid.

    losses holds one loss per (problem i, policy sample j) pair; the
    empirical mean is first corrected for the M-sample estimate of the
    posterior expectation (level delta_prime), and the corrected value
    is then bounded over the data distribution (level delta).  The
    result holds with probability 1 - delta - delta_prime.
    """
    arr = np.clip(np.asarray(losses, dtype=np.float64).ravel(), 0.0, 1.0)
    if M < 1 or N < 1:
        raise ValueError("N and M must be at least 1")
    if arr.size != N * M:
        raise ValueError(f"expected {N}x{M} losses, got {arr.size}")
    if not (delta_prime > 0.0 and math.isfinite(delta_prime)):
        raise ValueError("delta_prime must be positive and finite")
    ell_hat = float(arr.mean())
    ell_bar = inv_kl_bernoulli(ell_hat, math.log(2.0 / delta_prime) / M)
    return pac_bound(ell_bar, kl_div, N, delta)
