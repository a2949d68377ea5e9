"""flexqp: always-feasible convex QP solving via an exact l1 elastic
relaxation and ADMM, plus an elastic SQP layer for nonlinear programs."""

from .qp_core import (
    QpProblem, QpSolution, Status,
    objective, elastic_objective, qp_residual, oracle_solve,
    to_json, from_json, load, save, problem_hash,
)
from .solver import (
    SolverParams, SolverState, SolveSettings, ResidualBundle, Feasibility,
    default_params, clamp_params, cold_start, soft_threshold,
    relaxed_residuals, admm_step, solve, classify_feasibility,
    state_to_json, state_from_json, save_state, load_state,
    PARAM_MIN, PARAM_MAX,
)
from . import linsys, policy, probgen, sqp, bench, cli  # noqa: F401

__version__ = "0.1.0"
