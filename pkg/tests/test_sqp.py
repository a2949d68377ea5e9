import json

import numpy as np
import pytest
import scipy.sparse as sparse

from flexqp import qp_core, sqp
from flexqp.sqp import (NlpSpec, OcpSpec, SafetyFilterSpec, SqpError,
                        SqpSettings, SqpStatus, build_ocp_nlp,
                        build_safety_filter_nlp, build_subproblem, euler_step,
                        nlp_kkt_residual, sample_dubins_task,
                        sample_quadrotor_task, sample_safety_filter_task,
                        sqp_solve, unstack)

from conftest import random_feasible_qp


def _fd_jacobians(f, x, u, eps=1e-6):
    nx, nu = len(x), len(u)
    fx = f(x, u)
    A = np.zeros((len(fx), nx))
    B = np.zeros((len(fx), nu))
    for j in range(nx):
        d = np.zeros(nx)
        d[j] = eps
        A[:, j] = (f(x + d, u) - f(x - d, u)) / (2 * eps)
    for j in range(nu):
        d = np.zeros(nu)
        d[j] = eps
        B[:, j] = (f(x, u + d) - f(x, u - d)) / (2 * eps)
    return A, B


# ---------------------------------------------------------------------------
# dynamics models

def test_dubins_jacobians_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.uniform(-3, 3, size=3)
        u = rng.uniform(-2, 2, size=2)
        A, B = sqp.dubins_jacobians(x, u)
        A_fd, B_fd = _fd_jacobians(sqp.dubins_dynamics, x, u)
        assert np.max(np.abs(A - A_fd)) <= 5e-6
        assert np.max(np.abs(B - B_fd)) <= 5e-6


def test_quadrotor_jacobians_match_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.uniform(-0.5, 0.5, size=12)
        u = rng.uniform(-1, 1, size=4)
        u[0] += 10.0  # positive thrust
        A, B = sqp.quadrotor_jacobians(x, u)
        A_fd, B_fd = _fd_jacobians(sqp.quadrotor_dynamics, x, u)
        assert np.max(np.abs(A - A_fd)) <= 5e-5
        assert np.max(np.abs(B - B_fd)) <= 5e-6


def test_euler_step_hand():
    f = lambda x, u: np.array([x[1], u[0]])
    out = euler_step(f, np.array([1.0, 2.0]), np.array([3.0]), 0.1)
    assert np.allclose(out, [1.2, 2.3])


# ---------------------------------------------------------------------------
# subproblem construction

def _toy_nlp():
    """f = (x0-1)^2 + x0 x1, g = x0^2 + x1 - 2 <= 0, h = x0 - x1 = 0."""
    H = np.array([[2.0, 1.0], [1.0, 0.0]])

    return NlpSpec(
        n=2, m=1, p=1,
        f=lambda x: (x[0] - 1.0) ** 2 + x[0] * x[1],
        grad_f=lambda x: np.array([2 * (x[0] - 1) + x[1], x[0]]),
        g=lambda x: np.array([x[0] ** 2 + x[1] - 2.0]),
        jac_g=lambda x: sparse.csc_array(np.array([[2 * x[0], 1.0]])),
        h=lambda x: np.array([x[0] - x[1]]),
        jac_h=lambda x: sparse.csc_array(np.array([[1.0, -1.0]])),
        hess_lag=lambda x, yI, yE: H + yI[0] * np.array([[2.0, 0], [0, 0]]),
        x_init=np.zeros(2), hess_psd=False, name="toy")


def test_build_subproblem_linearization():
    nlp = _toy_nlp()
    x_k = np.array([0.5, -1.0])
    y_I = np.array([0.25])
    sub = build_subproblem(nlp, x_k, y_I, np.zeros(1))
    assert (sub.n, sub.m, sub.p) == (2, 1, 1)
    assert np.allclose(sub.q, nlp.grad_f(x_k))
    assert np.allclose(sub.G.toarray(), [[1.0, 1.0]])
    assert np.allclose(sub.h, [-(0.25 - 1.0 - 2.0)])
    assert np.allclose(sub.A.toarray(), [[1.0, -1.0]])
    assert np.allclose(sub.b, [-1.5])
    # the indefinite Hessian is shifted to be (just) PSD
    w = np.linalg.eigvalsh(sub.full_P().toarray())
    assert w.min() >= 0.0
    assert w.min() <= 1e-6


def test_build_subproblem_keeps_psd_hessian():
    nlp = _toy_nlp()
    H = np.diag([2.0, 4.0])
    nlp.hess_lag = lambda x, yI, yE: H
    nlp.hess_psd = True
    sub = build_subproblem(nlp, np.zeros(2), np.zeros(1), np.zeros(1))
    assert np.allclose(sub.full_P().toarray(), H)


def test_build_subproblem_rejects_nan():
    nlp = _toy_nlp()
    nlp.grad_f = lambda x: np.array([np.nan, 0.0])
    with pytest.raises(SqpError, match="grad_f"):
        build_subproblem(nlp, np.zeros(2), np.zeros(1), np.zeros(1))


def test_nlp_kkt_residual_hand():
    nlp = _toy_nlp()
    x = np.array([1.0, 1.0])
    y_I = np.array([0.5])
    y_E = np.array([-0.25])
    res = nlp_kkt_residual(nlp, x, y_I, y_E)
    stat = nlp.grad_f(x) + np.array([2.0, 1.0]) * 0.5 + np.array([1.0, -1.0]) * -0.25
    assert res["stationarity"] == pytest.approx(np.max(np.abs(stat)))
    assert res["ineq"] == pytest.approx(0.0)  # g(x) = 0, clipped
    assert res["eq"] == pytest.approx(0.0)
    assert res["max"] == pytest.approx(res["stationarity"])


# ---------------------------------------------------------------------------
# NLP builders: dimension accounting

def test_dubins_task_dimensions():
    nlp = build_ocp_nlp(sample_dubins_task(0))
    assert (nlp.n, nlp.m, nlp.p) == (253, 455, 153)


def test_quadrotor_task_dimensions():
    nlp = build_ocp_nlp(sample_quadrotor_task(0))
    assert (nlp.n, nlp.m, nlp.p) == (812, 400, 612)


def test_safety_filter_dimensions():
    spec = sample_safety_filter_task(0, include_control_bounds=False)
    nlp = build_safety_filter_nlp(spec)
    assert (nlp.n, nlp.m, nlp.p) == (253, 50, 153)
    with_bounds = sample_safety_filter_task(0)
    nlp_b = build_safety_filter_nlp(with_bounds)
    assert (nlp_b.n, nlp_b.m, nlp_b.p) == (253, 250, 153)


def test_obstacle_rows_per_timestep():
    spec = OcpSpec(dynamics="dubins", T=6, dt=0.1, Q=np.eye(3),
                   R=np.eye(2), Q_T=np.eye(3), x0=np.zeros(3),
                   x_target=np.array([2.0, 0.0, 0.0]),
                   obstacles=[(np.array([1.0, 0.5]), 0.2)])
    nlp = build_ocp_nlp(spec)
    assert nlp.m == 7  # one row per timestep including both endpoints
    assert nlp.p == 3 * 7


def test_ocp_x_init_starts_at_x0():
    spec = sample_dubins_task(1)
    nlp = build_ocp_nlp(spec)
    X, U = unstack(nlp.x_init, 3, 2, spec.T)
    assert np.allclose(X[0], spec.x0)
    assert X.shape == (51, 3) and U.shape == (50, 2)


def test_safety_filter_init_rolls_reference():
    spec = sample_safety_filter_task(1)
    nlp = build_safety_filter_nlp(spec)
    # dynamics rows vanish at the rolled-out initial guess
    assert np.max(np.abs(nlp.h(nlp.x_init))) <= 1e-12
    X, U = unstack(nlp.x_init, *spec.dims, spec.T)
    assert np.allclose(U, spec.u_ref)


def test_exact_hessian_matches_fd_lagrangian():
    spec = OcpSpec(dynamics="dubins", T=4, dt=0.1, Q=np.eye(3),
                   R=0.5 * np.eye(2), Q_T=2.0 * np.eye(3), x0=np.zeros(3),
                   x_target=np.array([1.0, 1.0, 0.0]),
                   obstacles=[(np.array([0.5, 0.5]), 0.2)])
    nlp = build_ocp_nlp(spec, hess_mode="exact")
    rng = np.random.default_rng(2)
    w = rng.normal(size=nlp.n) * 0.3
    y_I = rng.uniform(0, 2, size=nlp.m)
    y_E = rng.normal(size=nlp.p)

    def grad_lag(v):
        return (nlp.grad_f(v) + sparse.csc_array(nlp.jac_g(v)).T @ y_I
                + sparse.csc_array(nlp.jac_h(v)).T @ y_E)

    eps = 1e-6
    H_fd = np.zeros((nlp.n, nlp.n))
    for j in range(nlp.n):
        d = np.zeros(nlp.n)
        d[j] = eps
        H_fd[:, j] = (grad_lag(w + d) - grad_lag(w - d)) / (2 * eps)
    H = sparse.csc_array(nlp.hess_lag(w, y_I, y_E)).toarray()
    assert np.max(np.abs(H - 0.5 * (H_fd + H_fd.T))) <= 1e-4


def test_build_ocp_nlp_rejects_unknown_mode():
    with pytest.raises(SqpError, match="hess_mode"):
        build_ocp_nlp(sample_dubins_task(0), hess_mode="bfgs")


def test_spec_validation():
    with pytest.raises(SqpError, match="dynamics"):
        OcpSpec(dynamics="cartpole", T=5, dt=0.1, Q=np.eye(3), R=np.eye(2),
                Q_T=np.eye(3), x0=np.zeros(3), x_target=np.zeros(3))
    with pytest.raises(SqpError, match="radii"):
        OcpSpec(dynamics="dubins", T=5, dt=0.1, Q=np.eye(3), R=np.eye(2),
                Q_T=np.eye(3), x0=np.zeros(3), x_target=np.zeros(3),
                obstacles=[(np.zeros(2), -1.0)])
    with pytest.raises(SqpError, match="beta"):
        SafetyFilterSpec(u_ref=np.zeros((3, 2)), beta=1.5, x0=np.zeros(3),
                         obstacle=(np.zeros(2), 1.0))


# ---------------------------------------------------------------------------
# the SQP loop

def _qp_as_nlp(prob):
    """Wrap a convex QP as an NlpSpec; SQP must solve it in one step."""
    P_full = prob.full_P().toarray()
    return NlpSpec(
        n=prob.n, m=prob.m, p=prob.p,
        f=lambda x: 0.5 * x @ P_full @ x + prob.q @ x,
        grad_f=lambda x: P_full @ x + prob.q,
        g=lambda x: prob.G @ x - prob.h,
        jac_g=lambda x: prob.G,
        h=lambda x: prob.A @ x - prob.b,
        jac_h=lambda x: prob.A,
        hess_lag=lambda x, yI, yE: P_full,
        x_init=np.zeros(prob.n), hess_psd=True, name="qp-wrap")


def test_sqp_exact_on_convex_qp():
    prob = random_feasible_qp(11)
    result = sqp_solve(_qp_as_nlp(prob), SqpSettings(
        eps_sqp=1e-5, qp_eps=1e-7, qp_rho=0.1))
    oracle = qp_core.oracle_solve(prob)
    assert result.status == SqpStatus.CONVERGED
    assert np.max(np.abs(result.x - oracle.x)) <= 1e-4


def test_sqp_newton_on_rosenbrock():
    def hess(x, yI, yE):
        return np.array([
            [2.0 - 400.0 * x[1] + 1200.0 * x[0] ** 2, -400.0 * x[0]],
            [-400.0 * x[0], 200.0]])
    nlp = NlpSpec(
        n=2, m=0, p=0,
        f=lambda x: (1 - x[0]) ** 2 + 100.0 * (x[1] - x[0] ** 2) ** 2,
        grad_f=lambda x: np.array([
            -2 * (1 - x[0]) - 400.0 * x[0] * (x[1] - x[0] ** 2),
            200.0 * (x[1] - x[0] ** 2)]),
        g=lambda x: np.zeros(0), jac_g=lambda x: sparse.csc_array((0, 2)),
        h=lambda x: np.zeros(0), jac_h=lambda x: sparse.csc_array((0, 2)),
        hess_lag=hess, x_init=np.array([-1.2, 1.0]), hess_psd=False)
    result = sqp_solve(nlp, SqpSettings(eps_sqp=1e-6, qp_eps=1e-8,
                                        max_sqp_iter=100, qp_rho=0.1))
    assert result.status == SqpStatus.CONVERGED
    assert np.max(np.abs(result.x - 1.0)) <= 1e-4


def _small_dubins(obstacles, x0=(0.0, 0.0, 0.0), T=8):
    return OcpSpec(
        dynamics="dubins", T=T, dt=0.1, Q=np.diag([1.0, 1.0, 0.1]),
        R=0.1 * np.eye(2), Q_T=10.0 * np.diag([1.0, 1.0, 0.1]),
        x0=np.array(x0, dtype=float), x_target=np.array([1.5, 0.0, 0.0]),
        obstacles=obstacles, u_lo=np.array([-10.0, -5.0]),
        u_hi=np.array([10.0, 5.0]))


def test_sqp_merit_descent_on_accepted_steps():
    nlp = build_ocp_nlp(_small_dubins([(np.array([0.7, 0.05]), 0.25)]))
    iterates = {}
    result = sqp_solve(nlp, SqpSettings(max_sqp_iter=12),
                       on_accept=lambda k, x: iterates.__setitem__(k, x))
    assert iterates, "no step was ever accepted"
    for row in result.history:
        if row["k"] in iterates and row["merit"] is not None:
            phi_after = sqp._merit(nlp, iterates[row["k"]], row["mu_merit"])
            assert phi_after <= row["merit"] + 1e-9
            assert row["step_size"] > 0.0


def test_sqp_reduces_kkt_on_small_task():
    nlp = build_ocp_nlp(_small_dubins([]))
    result = sqp_solve(nlp, SqpSettings(eps_sqp=1e-4, max_sqp_iter=30))
    assert result.status == SqpStatus.CONVERGED
    final = nlp_kkt_residual(nlp, result.x, result.y_I, result.y_E)
    assert final["max"] <= 1e-4
    assert result.history[0]["kkt"]["max"] > final["max"]


def test_sqp_start_inside_obstacle_completes():
    # the pinned initial state violates the obstacle row at t = 0, so
    # every subproblem is infeasible; the run must still finish cleanly
    spec = _small_dubins([(np.array([0.05, 0.0]), 0.5)])
    nlp = build_ocp_nlp(spec)
    result = sqp_solve(nlp, SqpSettings(max_sqp_iter=10))
    assert result.history[0]["qp_status"] == "SolvedInfeasibleOriginal"
    assert result.status in (SqpStatus.CONVERGED, SqpStatus.MAX_ITER,
                             SqpStatus.STALLED)


def test_safety_filter_safe_reference_is_fixed_point():
    # heading away from the obstacle, the rolled reference is already
    # safe and the initial guess is a KKT point
    spec = SafetyFilterSpec(
        u_ref=np.zeros((8, 2)), beta=0.1,
        x0=np.array([2.0, 0.0, 0.0]), obstacle=(np.array([-1.0, 0.0]), 0.5),
        dynamics="dubins", dt=0.05, u_lo=np.array([-10.0, -5.0]),
        u_hi=np.array([10.0, 5.0]))
    nlp = build_safety_filter_nlp(spec)
    result = sqp_solve(nlp, SqpSettings(eps_sqp=1e-6))
    assert result.status == SqpStatus.CONVERGED
    assert len(result.history) == 1  # converged at the initial guess
    _, U = unstack(result.x, 3, 2, spec.T)
    assert np.max(np.abs(U - spec.u_ref)) <= 1e-6


def test_safety_filter_intervenes_when_unsafe():
    # reference drives at the obstacle (slightly off center: the exactly
    # head-on case is a symmetric stationary point where the linearized
    # barrier offers no sideways gradient); the filter must deviate
    T = 10
    spec = SafetyFilterSpec(
        u_ref=np.tile([2.0, 0.0], (T, 1)), beta=0.2,
        x0=np.array([0.0, 0.0, 0.0]), obstacle=(np.array([0.8, 0.1]), 0.3),
        dynamics="dubins", dt=0.05, u_lo=np.array([-10.0, -5.0]),
        u_hi=np.array([10.0, 5.0]))
    nlp = build_safety_filter_nlp(spec)
    assert np.max(nlp.g(nlp.x_init)) > 0  # reference violates the barrier
    result = sqp_solve(nlp, SqpSettings(eps_sqp=1e-4, max_sqp_iter=30))
    assert result.status == SqpStatus.CONVERGED
    assert np.max(nlp.g(result.x)) <= 1e-4
    _, U = unstack(result.x, 3, 2, T)
    assert np.max(np.abs(U - spec.u_ref)) > 1e-3


# ---------------------------------------------------------------------------
# samplers and serialization

def test_samplers_deterministic():
    assert sqp.ocp_spec_to_json(sample_dubins_task(3)) == \
        sqp.ocp_spec_to_json(sample_dubins_task(3))
    assert sqp.safety_spec_to_json(sample_safety_filter_task(3)) == \
        sqp.safety_spec_to_json(sample_safety_filter_task(3))


def test_sampled_start_is_clear_of_obstacles():
    for seed in range(10):
        spec = sample_dubins_task(seed)
        for c, r in spec.obstacles:
            assert np.linalg.norm(spec.x0[:2] - c) > r


def test_ocp_spec_json_round_trip():
    spec = sample_dubins_task(4)
    back = sqp.ocp_spec_from_json(sqp.ocp_spec_to_json(spec))
    assert back.dynamics == spec.dynamics and back.T == spec.T
    assert np.array_equal(back.x0, spec.x0)
    assert np.array_equal(back.Q_T, spec.Q_T)
    assert len(back.obstacles) == 5
    assert np.array_equal(back.obstacles[2][0], spec.obstacles[2][0])
    assert back.obstacles[2][1] == spec.obstacles[2][1]


def test_safety_spec_json_round_trip():
    spec = sample_safety_filter_task(4, include_control_bounds=False)
    back = sqp.safety_spec_from_json(sqp.safety_spec_to_json(spec))
    assert back.include_control_bounds is False
    assert np.array_equal(back.u_ref, spec.u_ref)
    assert back.beta == spec.beta
    assert np.array_equal(back.obstacle[0], spec.obstacle[0])


def test_load_task_dispatch(tmp_path):
    p1 = tmp_path / "ocp.json"
    p1.write_text(sqp.ocp_spec_to_json(sample_dubins_task(5)))
    assert isinstance(sqp.load_task(p1), OcpSpec)
    p2 = tmp_path / "sf.json"
    p2.write_text(sqp.safety_spec_to_json(sample_safety_filter_task(5)))
    assert isinstance(sqp.load_task(p2), SafetyFilterSpec)
    p3 = tmp_path / "bad.json"
    p3.write_text(json.dumps({"kind": "maze"}))
    with pytest.raises(SqpError, match="unknown task kind"):
        sqp.load_task(p3)


def test_result_to_json_layout():
    nlp = build_ocp_nlp(_small_dubins([]))
    result = sqp_solve(nlp, SqpSettings(eps_sqp=1e-3, max_sqp_iter=20))
    doc = json.loads(sqp.result_to_json(result, 3, 2, 8))
    assert doc["status"] == "Converged"
    assert np.asarray(doc["states"]).shape == (9, 3)
    assert np.asarray(doc["controls"]).shape == (8, 2)
    assert doc["history"][0]["k"] == 0


def test_unstack_shapes():
    w = np.arange(3 * 4 + 2 * 3, dtype=float)
    X, U = unstack(w, 3, 2, 3)
    assert X.shape == (4, 3) and U.shape == (3, 2)
    assert np.array_equal(X[0], [0, 1, 2])
    assert np.array_equal(U[0], [12, 13])
