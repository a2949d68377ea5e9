import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st
from scipy import sparse

from flexqp import qp_core, solver
from flexqp.qp_core import QpProblem, Status
from flexqp.solver import SolveSettings, SolverParams

from conftest import contradictory_qp, random_feasible_qp, tiny_qp


# ---------------------------------------------------------------------------
# primitives

def test_soft_threshold_hand_values():
    assert solver.soft_threshold(2.0, 1.0) == pytest.approx(1.0)
    assert solver.soft_threshold(-2.0, 1.0) == pytest.approx(-1.0)
    assert solver.soft_threshold(0.5, 1.0) == 0.0
    assert solver.soft_threshold(-0.5, 1.0) == 0.0
    v = np.array([3.0, -3.0, 0.25])
    assert np.allclose(solver.soft_threshold(v, 0.0), v)


@hsettings(max_examples=50)
@given(st.floats(-100, 100), st.floats(0, 50))
def test_soft_threshold_is_prox_of_l1(v, kappa):
    # S_kappa(v) minimizes kappa|z| + 0.5 (z - v)^2 over z
    z = float(solver.soft_threshold(v, kappa))
    obj = lambda t: kappa * abs(t) + 0.5 * (t - v) ** 2
    for t in (z + 1e-4, z - 1e-4, 0.0, v):
        assert obj(z) <= obj(t) + 1e-9


def test_cold_start_shapes_and_values():
    prob = random_feasible_qp(0)
    st0 = solver.cold_start(prob)
    assert np.array_equal(st0.s, np.maximum(prob.h, 0.0))
    assert not st0.x.any() and not st0.y_I.any() and not st0.z_E.any()
    assert st0.k == 0


def test_default_params_shapes():
    prob = random_feasible_qp(1)
    p = solver.default_params(prob)
    assert p.mu_I.shape == (prob.m,) and p.mu_E.shape == (prob.p,)
    assert np.all(p.mu_I == 1e3) and p.alpha == 1.6 and p.sigma_x == 1e-6


def test_params_validation():
    with pytest.raises(ValueError, match="alpha"):
        SolverParams(mu_I=[1.0], mu_E=[], sigma_s=[1.0], rho_I=[1.0],
                     rho_E=[], sigma_x=1.0, alpha=2.0)
    with pytest.raises(ValueError, match="positive"):
        SolverParams(mu_I=[-1.0], mu_E=[], sigma_s=[1.0], rho_I=[1.0],
                     rho_E=[], sigma_x=1.0, alpha=1.0)


def test_clamp_params_bounds():
    p = SolverParams(mu_I=[1e9], mu_E=[1e-9], sigma_s=[1.0], rho_I=[1.0],
                     rho_E=[2.0], sigma_x=1e-12, alpha=1.6)
    c = solver.clamp_params(p)
    assert c.mu_I[0] == solver.PARAM_MAX
    assert c.mu_E[0] == solver.PARAM_MIN
    assert c.sigma_x == solver.PARAM_MIN
    assert c.alpha == 1.6


def test_relaxed_residuals_match_dense_recompute():
    prob = random_feasible_qp(2)
    params = solver.default_params(prob)
    state = solver.cold_start(prob)
    for _ in range(4):
        state = solver.admm_step(prob, params, state)
    bundle = solver.relaxed_residuals(prob, state)
    P = prob.full_P().toarray()
    G = prob.G.toarray()
    A = prob.A.toarray()
    assert np.allclose(bundle.zeta_dual,
                       P @ state.x + prob.q + G.T @ state.y_I
                       + A.T @ state.y_E, atol=1e-12)
    assert np.allclose(bundle.zeta_I,
                       G @ state.x + state.s - prob.h - state.z_I, atol=1e-12)
    assert np.allclose(bundle.zeta_E,
                       A @ state.x - prob.b - state.z_E, atol=1e-12)
    assert np.allclose(bundle.prim_x, state.x_tilde - state.x, atol=1e-15)
    assert np.allclose(bundle.dual_x, state.prev_x - state.x, atol=1e-15)
    norms = bundle.norms()
    assert set(norms) == {"zeta_dual", "zeta_I", "zeta_E", "prim_x", "prim_s",
                          "prim_I", "prim_E", "dual_x", "dual_s", "dual_I",
                          "dual_E"}
    assert bundle.max_all() == pytest.approx(max(norms.values()))


# ---------------------------------------------------------------------------
# admm_step

def test_step_keeps_duals_inside_penalty_box():
    prob = random_feasible_qp(3)
    params = solver.default_params(prob, mu=2.0)
    state = solver.cold_start(prob)
    for _ in range(60):
        state = solver.admm_step(prob, params, state)
        assert np.all(np.abs(state.y_I) <= params.mu_I + 1e-9)
        assert np.all(np.abs(state.y_E) <= params.mu_E + 1e-9)
    assert state.k == 60


def test_step_methods_agree():
    prob = random_feasible_qp(4)
    params = solver.default_params(prob)
    sd = solver.cold_start(prob)
    si = solver.cold_start(prob)
    from flexqp.linsys import CgConfig
    for _ in range(30):
        sd = solver.admm_step(prob, params, sd, method="direct")
        si = solver.admm_step(prob, params, si, method="indirect",
                              cg=CgConfig(tol=1e-13))
        assert np.max(np.abs(sd.x - si.x)) <= 1e-7


def test_step_unknown_method():
    prob = random_feasible_qp(5)
    with pytest.raises(ValueError, match="method"):
        solver.admm_step(prob, solver.default_params(prob),
                         solver.cold_start(prob), method="magic")


# ---------------------------------------------------------------------------
# solve: feasible problems

def test_solve_reaches_tolerance_and_classifies_feasible():
    prob = random_feasible_qp(6)
    sol, trace = solver.solve(prob, settings=SolveSettings(eps_abs=1e-4))
    assert sol.status is Status.SOLVED
    assert trace is None
    feas = solver.classify_feasibility(sol, eps=1e-4)
    assert feas.feasible
    _, norm = qp_core.qp_residual(prob, sol.x, sol.y_I, sol.y_E)
    assert norm <= 1e-3


def test_solve_matches_oracle_at_large_mu():
    # exactness: mu far above the optimal multipliers
    prob = random_feasible_qp(7)
    star = qp_core.oracle_solve(prob)
    sol, _ = solver.solve(prob, settings=SolveSettings(eps_abs=1e-6))
    assert np.max(np.abs(sol.x - star.x)) <= 1e-3
    assert sol.objective == pytest.approx(star.objective, abs=1e-5)


def test_solve_unconstrained_reaches_hand_optimum():
    prob, x_star = tiny_qp()
    sol, _ = solver.solve(prob, settings=SolveSettings(eps_abs=1e-8))
    assert sol.status is Status.SOLVED
    assert np.allclose(sol.x, x_star, atol=1e-6)


def test_polish_tightens_a_converged_solution():
    prob = random_feasible_qp(8)
    star = qp_core.oracle_solve(prob)
    loose = SolveSettings(eps_abs=1e-3, polish=False)
    tight = SolveSettings(eps_abs=1e-3, polish=True)
    sol_l, _ = solver.solve(prob, settings=loose)
    sol_p, _ = solver.solve(prob, settings=tight)
    _, norm_l = qp_core.qp_residual(prob, sol_l.x, sol_l.y_I, sol_l.y_E)
    _, norm_p = qp_core.qp_residual(prob, sol_p.x, sol_p.y_I, sol_p.y_E)
    assert norm_p <= norm_l + 1e-12
    assert np.max(np.abs(sol_p.x - star.x)) <= 1e-6


def test_solve_counts_work():
    prob = random_feasible_qp(9)
    sol_d, _ = solver.solve(prob, settings=SolveSettings(eps_abs=1e-4))
    assert sol_d.factorizations >= 1 and sol_d.cg_iterations == 0
    sol_i, _ = solver.solve(prob, settings=SolveSettings(eps_abs=1e-4,
                                                         method="indirect"))
    assert sol_i.cg_iterations > 0 and sol_i.factorizations == 0


# ---------------------------------------------------------------------------
# solve: infeasible and degenerate problems

def test_infeasible_certificates_and_pinned_duals():
    prob = contradictory_qp()
    params = solver.default_params(prob, mu=10.0)
    sol, _ = solver.solve(prob, params=params,
                          settings=SolveSettings(eps_abs=1e-6))
    assert sol.status is Status.SOLVED_INFEASIBLE_ORIGINAL
    feas = solver.classify_feasibility(sol, eps=1e-3)
    assert not feas.feasible
    assert list(feas.violated_ineq) == [0, 1]
    # elastic optimum sits at the center with both duals pinned at mu
    assert abs(sol.x[0]) <= 1e-4
    assert np.allclose(np.abs(sol.y_I), 10.0, atol=1e-4)


def test_unbounded_detection():
    # linear objective, no constraints: elastic objective has no minimum;
    # the iterate runs away at |q| / sigma_x per step until the guard trips
    prob = QpProblem(n=1, m=0, p=0, P=sparse.csc_array((1, 1)),
                     q=np.array([-1e3]), G=sparse.csc_array((0, 1)),
                     h=np.zeros(0), A=sparse.csc_array((0, 1)), b=np.zeros(0))
    sol, _ = solver.solve(prob, settings=SolveSettings(max_iter=100000))
    assert sol.status is Status.UNBOUNDED


def test_timeout_and_max_iter_statuses():
    prob = random_feasible_qp(10)
    sol, _ = solver.solve(prob, settings=SolveSettings(timeout_ms=0.0))
    assert sol.status is Status.TIMEOUT
    sol, _ = solver.solve(prob, settings=SolveSettings(max_iter=2,
                                                       eps_abs=1e-12))
    assert sol.status is Status.MAX_ITER
    assert sol.iterations == 2


# ---------------------------------------------------------------------------
# solve: plumbing

def test_trace_records_every_iteration():
    prob = random_feasible_qp(11)
    sol, trace = solver.solve(
        prob, settings=SolveSettings(eps_abs=1e-4, record_trace=True))
    assert trace is not None
    assert len(trace) == sol.iterations + 1  # iterations 0..K
    for b in trace:
        assert np.all(np.isfinite(b.zeta_dual))


def test_on_iteration_called_each_step():
    prob = random_feasible_qp(12)
    seen = []
    solver.solve(prob, settings=SolveSettings(max_iter=7, eps_abs=1e-14),
                 on_iteration=lambda state, params: seen.append(state.k))
    assert seen == list(range(1, 8))


def test_check_every_skips_convergence_checks():
    prob = random_feasible_qp(13)
    s1, _ = solver.solve(prob, settings=SolveSettings(eps_abs=1e-4))
    s25, _ = solver.solve(prob, settings=SolveSettings(eps_abs=1e-4,
                                                       check_every=25))
    assert s25.iterations % 25 == 0
    assert s25.iterations >= s1.iterations


def test_warm_start_resumes():
    prob = random_feasible_qp(14)
    holder = {}
    sol1, _ = solver.solve(
        prob, settings=SolveSettings(eps_abs=1e-6),
        on_iteration=lambda state, params: holder.update(state=state))
    sol2, _ = solver.solve(prob, settings=SolveSettings(eps_abs=1e-6),
                           warm_start=holder["state"])
    # resuming from the converged state passes the first check immediately
    assert sol2.iterations == 0
    assert np.max(np.abs(sol2.x - sol1.x)) <= 1e-4


def test_state_json_round_trip():
    prob = random_feasible_qp(15)
    params = solver.default_params(prob)
    state = solver.cold_start(prob)
    for _ in range(3):
        state = solver.admm_step(prob, params, state)
    back = solver.state_from_json(solver.state_to_json(state, prob), prob)
    for name in ("x", "s", "z_I", "z_E", "w_s", "y_I", "y_E", "x_tilde",
                 "s_tilde", "zI_tilde", "zE_tilde", "nu_I", "nu_E",
                 "prev_x", "prev_s", "prev_z_I", "prev_z_E"):
        assert np.array_equal(getattr(back, name), getattr(state, name)), name
    assert back.k == state.k


def test_save_load_state_file(tmp_path):
    prob = random_feasible_qp(16)
    state = solver.cold_start(prob)
    path = tmp_path / "state.json"
    solver.save_state(state, prob, path)
    back = solver.load_state(path, prob)
    assert np.array_equal(back.s, state.s)


def test_classify_feasibility_reads_certificates():
    sol = qp_core.QpSolution(
        x=np.zeros(1), y_I=np.zeros(3), y_E=np.zeros(2),
        z_I=np.array([0.0, 5e-4, 2e-3]), z_E=np.array([0.0, -2e-3]),
        status=Status.SOLVED, iterations=1, solve_time=0.0, objective=0.0)
    feas = solver.classify_feasibility(sol, eps=1e-3)
    assert not feas.feasible
    assert list(feas.violated_ineq) == [2]
    assert list(feas.violated_eq) == [1]
