"""SQP driver for smooth nonlinear programs on top of the elastic QP solver.

Each iteration linearizes the constraints and quadraticizes the Lagrangian
around the current iterate, solves the resulting QP subproblem (always
feasible thanks to the elastic relaxation, so inconsistent linearizations
never abort the loop), runs an l1-merit backtracking line search on

    phi(x) = f(x) + mu_merit * (||h(x)||_1 + ||g(x)_+||_1),

and replaces the multipliers with the subproblem's.  Termination is on the
NLP KKT residual max(||grad_L||_inf, ||g(x)_+||_inf, ||h(x)||_inf).

Included problem builders: Dubins vehicle and quadrotor trajectory
optimization (stacked transcription, quadratic tracking costs in error
coordinates, circular obstacles for the vehicle, control bounds), and a
control-barrier predictive safety filter that tracks a reference control
sequence subject to barrier-decay constraints between consecutive states.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from . import policy as policy_mod
from . import solver
from .probgen import Stream
from .qp_core import QpProblem, Status

GRAVITY = 9.81
QUAD_MASS = 1.0
QUAD_INERTIA = (1.0, 1.0, 1.0)

_DYN_DIMS = {"dubins": (3, 2), "quadrotor": (12, 4)}


class SqpError(RuntimeError):
    """Evaluator failure (non-finite values) or invalid SQP specification."""


class SqpStatus(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    STALLED = "Stalled"


@dataclass
class NlpSpec:
    """Evaluator bundle for one smooth NLP over a flat variable vector.

    Callables: f(x) scalar, grad_f(x) (n,), g(x) (m,), jac_g(x) sparse
    (m, n), h(x) (p,), jac_h(x) sparse (p, n), hess_lag(x, y_I, y_E)
    symmetric (n, n).  ``hess_psd`` marks the Hessian evaluator as PSD by
    construction (Gauss-Newton), skipping the eigenvalue guard.
    ``x_init`` seeds sqp_solve.
    """

    n: int
    m: int
    p: int
    f: callable
    grad_f: callable
    g: callable
    jac_g: callable
    h: callable
    jac_h: callable
    hess_lag: callable
    x_init: np.ndarray
    hess_psd: bool = False
    name: str = ""


def _require_finite(tag, arr):
    if not np.all(np.isfinite(arr if not sparse.issparse(arr) else arr.data)):
        raise SqpError(f"non-finite values from evaluator '{tag}'")


def build_subproblem(nlp: NlpSpec, x_k, y_I_k, y_E_k, hess_reg: float = 0.0) -> QpProblem:
    """Quadraticize the Lagrangian and linearize constraints at x_k.

    The subproblem in the step dx is

        min  0.5 dx' P dx + grad_f(x_k)' dx
        s.t. jac_g(x_k) dx <= -g(x_k),   jac_h(x_k) dx = -h(x_k),

    with P = hess_lag + hess_reg * I, shifted by the most negative
    eigenvalue estimate when the evaluator is not marked PSD.

    Raises
    ------
    SqpError
        If any evaluator returns non-finite values.
    """
    gf = np.asarray(nlp.grad_f(x_k), dtype=np.float64)
    _require_finite("grad_f", gf)
    H = sparse.csc_array(nlp.hess_lag(x_k, y_I_k, y_E_k))
    _require_finite("hess_lag", H)
    if hess_reg:
        H = H + hess_reg * sparse.eye_array(nlp.n)
    if not nlp.hess_psd:
        Hd = H.toarray()
        lam_min = float(np.linalg.eigvalsh(0.5 * (Hd + Hd.T))[0]) \
            if nlp.n <= 600 else float(sparse.linalg.eigsh(
                0.5 * (H + H.T), k=1, which="SA",
                return_eigenvectors=False)[0])
        if lam_min < 0.0:
            H = H + (1e-8 - lam_min) * sparse.eye_array(nlp.n)
    if nlp.m:
        gx = np.asarray(nlp.g(x_k), dtype=np.float64)
        Jg = sparse.csc_array(nlp.jac_g(x_k))
        _require_finite("g", gx)
        _require_finite("jac_g", Jg)
    else:
        gx, Jg = np.zeros(0), sparse.csc_array((0, nlp.n))
    if nlp.p:
        hx = np.asarray(nlp.h(x_k), dtype=np.float64)
        Jh = sparse.csc_array(nlp.jac_h(x_k))
        _require_finite("h", hx)
        _require_finite("jac_h", Jh)
    else:
        hx, Jh = np.zeros(0), sparse.csc_array((0, nlp.n))
    return QpProblem(
        n=nlp.n, m=nlp.m, p=nlp.p,
        P=sparse.triu(H.tocsc(), format="csc"), q=gf,
        G=Jg, h=-gx, A=Jh, b=-hx, name=f"{nlp.name}-sub")


def nlp_kkt_residual(nlp: NlpSpec, x, y_I, y_E):
    """(stationarity, g(x)_+, h(x)) inf-norms and their max."""
    gf = np.asarray(nlp.grad_f(x), dtype=np.float64)
    stat = gf.copy()
    viol_I = 0.0
    viol_E = 0.0
    if nlp.m:
        stat += sparse.csc_array(nlp.jac_g(x)).T @ y_I
        viol_I = float(np.max(np.maximum(nlp.g(x), 0.0), initial=0.0))
    if nlp.p:
        stat += sparse.csc_array(nlp.jac_h(x)).T @ y_E
        viol_E = float(np.max(np.abs(nlp.h(x)), initial=0.0))
    s = float(np.max(np.abs(stat), initial=0.0))
    return {"stationarity": s, "ineq": viol_I, "eq": viol_E,
            "max": max(s, viol_I, viol_E)}


def _merit(nlp, x, mu_merit):
    total = float(nlp.f(x))
    if nlp.m:
        total += mu_merit * float(np.sum(np.maximum(nlp.g(x), 0.0)))
    if nlp.p:
        total += mu_merit * float(np.sum(np.abs(nlp.h(x))))
    return total


@dataclass
class SqpSettings:
    """Knobs for sqp_solve.

    Subproblem QPs run with a fixed parameter policy at qp_rho (the
    step-size parameters rho and sigma_s): locally infeasible
    linearizations (obstacle rows at interior points) force the penalty
    duals to travel to mu at a speed proportional to rho, so the usual
    small default stalls there, while the residual-ratio adaptation keeps
    doubling mu and never settles.  Consecutive subproblems warm-start
    from the previous ADMM state so the duals stay at scale.

    The elastic price qp_penalty escalates tenfold (up to
    qp_penalty_max) whenever a subproblem keeps linearized violation
    with its duals pinned at the price and the merit model predicts no
    decrease: pinned duals mean the true multiplier exceeds the price,
    so the relaxation is not exact there.  Each escalation is validated
    by its outcome; if the next subproblem does not empty the violation
    the price is put back and escalation disabled, since a violation
    no price removes is linearly stubborn, not under-priced.
    """

    max_sqp_iter: int = 50
    eps_sqp: float = 1e-2
    qp_eps: float = 1e-3
    qp_rescue_eps: float = 1e-6
    qp_max_iter: int = 20000
    qp_timeout_ms: float = 10000.0
    qp_check_every: int = 25
    qp_policy: object | None = None
    qp_rho: float = 10.0
    qp_penalty: float = 1e3
    qp_penalty_max: float = 1e5
    qp_warm_start: bool = True
    qp_method: str = "direct"
    qp_polish: bool = True
    hess_reg: float = 0.0
    full_step: bool = False
    max_halvings: int = 30
    armijo: float = 1e-4
    verbose: bool = False


@dataclass
class SqpResult:
    x: np.ndarray
    y_I: np.ndarray
    y_E: np.ndarray
    status: SqpStatus
    history: list


def sqp_solve(nlp: NlpSpec, settings: SqpSettings | None = None,
              on_accept=None) -> SqpResult:
    """Run the SQP loop from nlp.x_init.

    Returns the final iterate, multipliers, a status (Converged when the
    KKT residual reaches eps_sqp, Stalled when a line search fails after
    the configured halvings, MaxIter otherwise), and a history with one
    dict per iteration: KKT residual pieces, QP status and iterations,
    step size, and merit value.  on_accept(k, x), when given, is called
    with the iterate after each accepted step.
    """
    settings = settings or SqpSettings()
    x = np.asarray(nlp.x_init, dtype=np.float64).copy()
    y_I = np.zeros(nlp.m)
    y_E = np.zeros(nlp.p)
    history = []
    status = SqpStatus.MAX_ITER
    qp_state = None
    qp_mu = settings.qp_penalty
    pin_streak = 0
    prev_lin_viol = np.inf
    esc_check = None
    esc_banned = False

    def _zero_warm_z():
        # The stale z would let the warm state pass the first
        # convergence check and get its duals pinned at the new price;
        # zeroed z forces a re-solve from honest residuals.
        nonlocal qp_state
        if qp_state is not None:
            qp_state = replace(qp_state, z_I=np.zeros_like(qp_state.z_I),
                               z_E=np.zeros_like(qp_state.z_E), k=0)

    def _escalate(cur_viol):
        nonlocal qp_mu, pin_streak, prev_lin_viol, esc_check
        esc_check = (qp_mu, cur_viol)
        qp_mu = min(10.0 * qp_mu, settings.qp_penalty_max)
        _zero_warm_z()
        pin_streak = 0
        prev_lin_viol = np.inf

    for k in range(settings.max_sqp_iter + 1):
        res = nlp_kkt_residual(nlp, x, y_I, y_E)
        row = {"k": k, "kkt": res, "qp_status": None, "qp_iterations": 0,
               "step_size": 0.0, "merit": None, "mu_merit": None}
        history.append(row)
        if res["max"] <= settings.eps_sqp:
            status = SqpStatus.CONVERGED
            break
        if k == settings.max_sqp_iter:
            status = SqpStatus.MAX_ITER
            break
        sub = build_subproblem(nlp, x, y_I, y_E, settings.hess_reg)
        qp_eps = settings.qp_eps
        stalled = False
        while True:
            qp_settings = solver.SolveSettings(
                eps_abs=qp_eps, max_iter=settings.qp_max_iter,
                timeout_ms=settings.qp_timeout_ms,
                policy=settings.qp_policy, method=settings.qp_method,
                check_every=settings.qp_check_every,
                polish=settings.qp_polish)
            # rho scales with the escalated price so the dual crawl rate
            # (rho times violation) keeps up with the larger travel, and
            # the soft threshold mu/rho keeps its scale.
            rho_eff = settings.qp_rho * (qp_mu / settings.qp_penalty)
            qp_params = solver.default_params(sub)
            qp_params.rho_I[:] = rho_eff
            qp_params.rho_E[:] = rho_eff
            qp_params.sigma_s[:] = rho_eff
            qp_params.mu_I[:] = qp_mu
            qp_params.mu_E[:] = qp_mu
            holder = {}

            def grab(st, pp):
                holder["state"] = st
            qp_sol, _ = solver.solve(sub, params=qp_params,
                                     settings=qp_settings,
                                     warm_start=qp_state, on_iteration=grab)
            if settings.qp_warm_start and "state" in holder:
                qp_state = replace(holder["state"], k=0)
            row["qp_status"] = qp_sol.status.value
            row["qp_iterations"] += qp_sol.iterations
            dx = qp_sol.x
            y_max = max(
                float(np.max(np.abs(qp_sol.y_I), initial=0.0)),
                float(np.max(np.abs(qp_sol.y_E), initial=0.0)))
            # Merit penalty: above the multipliers (exact-penalty
            # requirement) but never above the subproblem's elastic price
            # -- a step that trades violation for objective at the
            # subproblem's price must not be refused by a merit that
            # prices violation harder, or the line search rejects every
            # best-effort step on locally infeasible linearizations.
            mu_merit = min(2.0 * y_max + 1.0, qp_mu)
            phi0 = _merit(nlp, x, mu_merit)
            row["merit"] = phi0
            row["mu_merit"] = mu_merit
            if settings.full_step:
                t = 1.0
                x = x + dx
                break
            gf = np.asarray(nlp.grad_f(x), dtype=np.float64)
            viol0 = (phi0 - float(nlp.f(x)))  # mu_merit * l1 violation
            relaxed = mu_merit * (
                float(np.sum(np.maximum(qp_sol.z_I, 0.0)))
                + float(np.sum(np.abs(qp_sol.z_E))))
            descent = float(gf @ dx) + relaxed - viol0
            lin_viol = max(float(np.max(qp_sol.z_I, initial=0.0)),
                           float(np.max(np.abs(qp_sol.z_E), initial=0.0)))
            pinned = y_max >= (1.0 - 1e-6) * qp_mu
            if esc_check is not None:
                # Validate the escalation by its outcome.  Genuine
                # under-pricing empties the violation as soon as the
                # price clears the true multiplier; a violation that
                # keeps its scale is linearly stubborn instead, and a
                # raised price only inflates the merit and shrinks the
                # usable steps, so put the price back and stop trying.
                mu_prev, viol_prev = esc_check
                esc_check = None
                if lin_viol > max(0.1 * viol_prev, 0.1 * settings.eps_sqp):
                    esc_banned = True
                    qp_mu = mu_prev
                    _zero_warm_z()
                    if settings.verbose:
                        print(f"[sqp] k={k} escalation failed "
                              f"(lin_viol={lin_viol:.2e}), revert mu -> "
                              f"{qp_mu:.0e}")
                    continue
            if (lin_viol > 0.1 * settings.eps_sqp and pinned
                    and not esc_banned
                    and qp_mu < settings.qp_penalty_max
                    and descent > -1e-2 * (1.0 + abs(phi0))):
                _escalate(lin_viol)
                if settings.verbose:
                    print(f"[sqp] k={k} escalate mu -> {qp_mu:.0e} "
                          f"(lin_viol={lin_viol:.2e} D={descent:.3e})")
                continue
            t = 1.0
            accepted = False
            for _ in range(settings.max_halvings + 1):
                phi_t = _merit(nlp, x + t * dx, mu_merit)
                if phi_t <= phi0 + settings.armijo * t * min(descent, 0.0) \
                        and phi_t <= phi0:
                    accepted = True
                    break
                t *= 0.5
            if settings.verbose:
                print(f"[sqp] k={k} qp_eps={qp_eps:.0e} mu={qp_mu:.0e} "
                      f"qp={qp_sol.status.value} its={qp_sol.iterations} "
                      f"|dx|={float(np.max(np.abs(dx), initial=0.0)):.2e} "
                      f"D={descent:.3e} viol0={viol0:.3e} "
                      f"lin_viol={lin_viol:.2e} ymax={y_max:.1f} "
                      f"{'t=%.2e' % t if accepted else 'REJECTED'}")
            if accepted:
                x = x + t * dx
                break
            # A failed line search near convergence usually means the
            # step's per-row error noise, priced at mu_merit, swamps the
            # predicted decrease.  Re-solve the same subproblem once at a
            # much tighter tolerance before giving up.
            if qp_eps > settings.qp_rescue_eps:
                qp_eps = settings.qp_rescue_eps
                continue
            if (lin_viol > 0.1 * settings.eps_sqp and pinned
                    and not esc_banned
                    and qp_mu < settings.qp_penalty_max):
                _escalate(lin_viol)
                continue
            row["step_size"] = 0.0
            stalled = True
            break
        if stalled:
            status = SqpStatus.STALLED
            break
        row["step_size"] = t
        y_I, y_E = qp_sol.y_I.copy(), qp_sol.y_E.copy()
        if on_accept is not None:
            on_accept(k, x)
        # Pinned duals with stagnant violation over several accepted
        # steps mean the price sits below the true multiplier there;
        # escalating now costs nothing (next subproblem pays it).
        if not settings.full_step:
            if (pinned and lin_viol > 0.1 * settings.eps_sqp
                    and lin_viol > 0.5 * prev_lin_viol
                    and not esc_banned
                    and qp_mu < settings.qp_penalty_max):
                pin_streak += 1
                prev_lin_viol = lin_viol
                if pin_streak >= 3:
                    if settings.verbose:
                        print(f"[sqp] k={k} escalate mu -> "
                              f"{min(10.0 * qp_mu, settings.qp_penalty_max):.0e}"
                              f" (pin streak, lin_viol={lin_viol:.2e})")
                    _escalate(lin_viol)
            else:
                pin_streak = 0
                prev_lin_viol = lin_viol
    return SqpResult(x=x, y_I=y_I, y_E=y_E, status=status, history=history)


# ---------------------------------------------------------------------------
# dynamics models

def dubins_dynamics(x, u):
    """Unicycle: state (p_x, p_y, theta), control (v, omega)."""
    return np.array([u[0] * np.cos(x[2]), u[0] * np.sin(x[2]), u[1]])


def dubins_jacobians(x, u):
    """(df/dx, df/du) of the unicycle vector field."""
    c, s = np.cos(x[2]), np.sin(x[2])
    A = np.zeros((3, 3))
    A[0, 2] = -u[0] * s
    A[1, 2] = u[0] * c
    B = np.zeros((3, 2))
    B[0, 0] = c
    B[1, 0] = s
    B[2, 1] = 1.0
    return A, B


def quadrotor_dynamics(x, u):
    """Rigid-body quadrotor, state (pos, angles, lin vel, ang vel) in R^12.

    World-frame positions/velocities, Z-Y-X Euler angles (roll phi, pitch
    theta, yaw psi), body-frame angular rates (p, q, r); controls are
    collective thrust F along the body z-axis and three body torques.
    Unit mass and unit diagonal inertia, gravity 9.81.
    """
    phi, th, psi = x[3], x[4], x[5]
    p, q, r = x[9], x[10], x[11]
    F, tx, ty, tz = u
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(th), np.sin(th)
    cps, sps = np.cos(psi), np.sin(psi)
    tth = sth / cth
    ix, iy, iz = QUAD_INERTIA
    out = np.empty(12)
    out[0:3] = x[6:9]
    out[3] = p + q * sph * tth + r * cph * tth
    out[4] = q * cph - r * sph
    out[5] = (q * sph + r * cph) / cth
    a = F / QUAD_MASS
    out[6] = a * (cph * sth * cps + sph * sps)
    out[7] = a * (cph * sth * sps - sph * cps)
    out[8] = a * cph * cth - GRAVITY
    out[9] = (iy - iz) / ix * q * r + tx / ix
    out[10] = (iz - ix) / iy * p * r + ty / iy
    out[11] = (ix - iy) / iz * p * q + tz / iz
    return out


def quadrotor_jacobians(x, u):
    """(df/dx, df/du) of the quadrotor vector field (analytic)."""
    phi, th, psi = x[3], x[4], x[5]
    p, q, r = x[9], x[10], x[11]
    F = u[0]
    cph, sph = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(th), np.sin(th)
    cps, sps = np.cos(psi), np.sin(psi)
    tth = sth / cth
    sec2 = 1.0 / cth ** 2
    ix, iy, iz = QUAD_INERTIA
    A = np.zeros((12, 12))
    A[0:3, 6:9] = np.eye(3)
    # Euler-rate rows
    A[3, 3] = q * cph * tth - r * sph * tth
    A[3, 4] = (q * sph + r * cph) * sec2
    A[3, 9] = 1.0
    A[3, 10] = sph * tth
    A[3, 11] = cph * tth
    A[4, 3] = -q * sph - r * cph
    A[4, 10] = cph
    A[4, 11] = -sph
    A[5, 3] = (q * cph - r * sph) / cth
    A[5, 4] = (q * sph + r * cph) * tth / cth
    A[5, 10] = sph / cth
    A[5, 11] = cph / cth
    # translational acceleration rows
    a = F / QUAD_MASS
    A[6, 3] = a * (-sph * sth * cps + cph * sps)
    A[6, 4] = a * cph * cth * cps
    A[6, 5] = a * (-cph * sth * sps + sph * cps)
    A[7, 3] = a * (-sph * sth * sps - cph * cps)
    A[7, 4] = a * cph * cth * sps
    A[7, 5] = a * (cph * sth * cps + sph * sps)
    A[8, 3] = -a * sph * cth
    A[8, 4] = -a * cph * sth
    # angular acceleration rows (gyroscopic coupling)
    A[9, 10] = (iy - iz) / ix * r
    A[9, 11] = (iy - iz) / ix * q
    A[10, 9] = (iz - ix) / iy * r
    A[10, 11] = (iz - ix) / iy * p
    A[11, 9] = (ix - iy) / iz * q
    A[11, 10] = (ix - iy) / iz * p
    B = np.zeros((12, 4))
    B[6, 0] = (cph * sth * cps + sph * sps) / QUAD_MASS
    B[7, 0] = (cph * sth * sps - sph * cps) / QUAD_MASS
    B[8, 0] = cph * cth / QUAD_MASS
    B[9, 1] = 1.0 / ix
    B[10, 2] = 1.0 / iy
    B[11, 3] = 1.0 / iz
    return A, B


def euler_step(f, x, u, dt):
    """Explicit Euler discretization x + f(x, u) dt."""
    return x + f(x, u) * dt


_DYNAMICS = {"dubins": dubins_dynamics, "quadrotor": quadrotor_dynamics}
_JACOBIANS = {"dubins": dubins_jacobians, "quadrotor": quadrotor_jacobians}


# ---------------------------------------------------------------------------
# trajectory-optimization NLP builders

@dataclass
class OcpSpec:
    """Nonlinear trajectory-optimization task over a fixed horizon."""

    dynamics: str
    T: int
    dt: float
    Q: np.ndarray
    R: np.ndarray
    Q_T: np.ndarray
    x0: np.ndarray
    x_target: np.ndarray
    obstacles: list = field(default_factory=list)  # (center(2,), radius)
    u_lo: np.ndarray | None = None
    u_hi: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.dynamics not in _DYN_DIMS:
            raise SqpError(f"unknown dynamics tag {self.dynamics!r}")
        if self.T < 1 or self.dt <= 0:
            raise SqpError("require T >= 1 and dt > 0")
        for _, rad in self.obstacles:
            if rad <= 0:
                raise SqpError("obstacle radii must be positive")

    @property
    def dims(self):
        return _DYN_DIMS[self.dynamics]


def _interp_init(x0, x_target, n_u, T):
    """Initial guess: linearly interpolated states, zero controls."""
    alphas = np.linspace(0.0, 1.0, T + 1)[:, None]
    states = (1 - alphas) * x0[None, :] + alphas * x_target[None, :]
    return np.concatenate([states.ravel(), np.zeros(n_u * T)])


def _route_around(p0, p1, circles, margin, n_grid=64):
    """2-D polyline from p0 to p1 avoiding circles, via grid search.

    A-star on an 8-connected grid over the inflated bounding box, with
    cells inside any margin-inflated circle blocked; the path is then
    shortcut by line-of-sight.  Circles covering an endpoint do not
    block (a covered target still gets a route).  When no free path
    exists at the requested margin the search retries with margin 0,
    then falls back to the straight segment.
    """
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    if not circles:
        return np.array([p0, p1])
    cs = np.array([c for c, _ in circles])
    rs = np.array([r for _, r in circles])
    keep = ((np.linalg.norm(p0 - cs, axis=1) > rs)
            & (np.linalg.norm(p1 - cs, axis=1) > rs))
    cs, rs = cs[keep], rs[keep]
    if len(cs) == 0:
        return np.array([p0, p1])

    lo = np.minimum(p0, p1)
    hi = np.maximum(p0, p1)
    lo = np.minimum(lo, (cs - rs[:, None]).min(axis=0)) - 0.5
    hi = np.maximum(hi, (cs + rs[:, None]).max(axis=0)) + 0.5
    span = hi - lo

    def clearance(pts):
        d = np.linalg.norm(pts[:, None, :] - cs[None, :, :], axis=2) - rs[None, :]
        return d.min(axis=1)

    for marg in (margin, 0.0):
        gx = np.linspace(lo[0], hi[0], n_grid)
        gy = np.linspace(lo[1], hi[1], n_grid)
        xx, yy = np.meshgrid(gx, gy, indexing="ij")
        free = clearance(np.stack([xx.ravel(), yy.ravel()], axis=1)) >= marg
        free = free.reshape(n_grid, n_grid)

        def snap(p):
            i = int(np.clip(round((p[0] - lo[0]) / span[0] * (n_grid - 1)), 0, n_grid - 1))
            j = int(np.clip(round((p[1] - lo[1]) / span[1] * (n_grid - 1)), 0, n_grid - 1))
            if free[i, j]:
                return i, j
            ii, jj = np.nonzero(free)
            if len(ii) == 0:
                return None
            k = np.argmin((gx[ii] - p[0]) ** 2 + (gy[jj] - p[1]) ** 2)
            return int(ii[k]), int(jj[k])

        start, goal = snap(p0), snap(p1)
        if start is None or goal is None:
            continue
        dist = {start: 0.0}
        prev = {}
        heap = [(0.0, start)]
        steps = [(di, dj, float(np.hypot(di, dj)))
                 for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]
        found = False
        while heap:
            f, node = heapq.heappop(heap)
            if node == goal:
                found = True
                break
            i, j = node
            base = dist[node]
            for di, dj, w in steps:
                ni, nj = i + di, j + dj
                if not (0 <= ni < n_grid and 0 <= nj < n_grid) or not free[ni, nj]:
                    continue
                nd = base + w
                nxt = (ni, nj)
                if nd < dist.get(nxt, np.inf):
                    dist[nxt] = nd
                    prev[nxt] = node
                    h = float(np.hypot(ni - goal[0], nj - goal[1]))
                    heapq.heappush(heap, (nd + h, nxt))
        if not found:
            continue
        path = [goal]
        while path[-1] != start:
            path.append(prev[path[-1]])
        pts = [p0] + [np.array([gx[i], gy[j]]) for i, j in reversed(path)] + [p1]

        def clear_leg(a, b):
            n = max(int(np.linalg.norm(b - a) / (span.max() / n_grid)) * 2, 2)
            tt = np.linspace(0.0, 1.0, n + 1)[:, None]
            return bool(np.all(clearance(a * (1 - tt) + b * tt) >= marg))

        out = [pts[0]]
        k = 0
        while k < len(pts) - 1:
            nxt = k + 1
            for m in range(len(pts) - 1, k, -1):
                if clear_leg(pts[k], pts[m]):
                    nxt = m
                    break
            out.append(pts[nxt])
            k = nxt
        return np.array(out)
    return np.array([p0, p1])


def _detour_init(x0, x_target, obstacles, n_u, T, margin=0.1):
    """Initial guess routed around circular obstacles.

    Positions follow an obstacle-avoiding polyline sampled uniformly by
    arc length; the remaining state components interpolate linearly and
    controls start at zero.  A straight-line seed through an obstacle
    cluster can trap the merit line search at an infeasible stationary
    point, which this sidesteps.
    """
    circles = [(np.asarray(c, float), float(r)) for c, r in obstacles]
    goal = np.asarray(x_target, float)[:2].copy()
    # A covered target is unreachable as posed; aim the route at the
    # nearest rim point of the covering circle instead, the best
    # clearance-respecting stand-in, and let the terminal cost pull
    # from there.
    for _ in range(len(circles)):
        depth = [r - float(np.linalg.norm(goal - c)) for c, r in circles]
        j = int(np.argmax(depth))
        if depth[j] < 0.0:
            break
        c, r = circles[j]
        v = goal - c
        dist = float(np.linalg.norm(v))
        if dist < 1e-9:
            v, dist = x0[:2] - c, float(np.linalg.norm(x0[:2] - c))
            if dist < 1e-9:
                v, dist = np.array([1.0, 0.0]), 1.0
        goal = c + v * ((r + margin) / dist)
    poly = _route_around(x0[:2], goal, circles, margin)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
    alphas = np.linspace(0.0, 1.0, T + 1)[:, None]
    states = (1 - alphas) * x0[None, :] + alphas * np.asarray(x_target, float)[None, :]
    if arc[-1] > 0.0:
        s = np.linspace(0.0, arc[-1], T + 1)
        states[:, 0] = np.interp(s, arc, poly[:, 0])
        states[:, 1] = np.interp(s, arc, poly[:, 1])
        states[0, :2] = x0[:2]
    return np.concatenate([states.ravel(), np.zeros(n_u * T)])


def _split(w, n_x, n_u, T):
    nx_tot = n_x * (T + 1)
    return w[:nx_tot].reshape(T + 1, n_x), w[nx_tot:].reshape(T, n_u)


def unstack(w, n_x, n_u, T):
    """Split a stacked trajectory vector into (states, controls) arrays."""
    X, U = _split(np.asarray(w, dtype=np.float64), n_x, n_u, T)
    return X.copy(), U.copy()


def _dynamics_constraints(tag, dt, x0, n_x, n_u, T):
    """h(w) and jac_h(w) for initial condition + Euler dynamics rows."""
    f = _DYNAMICS[tag]
    jac = _JACOBIANS[tag]
    nv = n_x * (T + 1) + n_u * T

    def h(w):
        X, U = _split(w, n_x, n_u, T)
        out = np.empty(n_x * (T + 1))
        out[:n_x] = X[0] - x0
        for t in range(T):
            out[n_x * (t + 1):n_x * (t + 2)] = \
                X[t + 1] - X[t] - f(X[t], U[t]) * dt
        return out

    def jac_h(w):
        X, U = _split(w, n_x, n_u, T)
        rows, cols, vals = [], [], []

        def put(r0, c0, block):
            r, c = np.nonzero(block)
            rows.append(r + r0)
            cols.append(c + c0)
            vals.append(block[r, c])

        put(0, 0, np.eye(n_x))
        for t in range(T):
            A, B = jac(X[t], U[t])
            r0 = n_x * (t + 1)
            put(r0, n_x * t, -(np.eye(n_x) + A * dt))
            put(r0, n_x * (t + 1), np.eye(n_x))
            put(r0, n_x * (T + 1) + n_u * t, -B * dt)
        return sparse.csc_array(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_x * (T + 1), nv))

    return h, jac_h


def _control_bound_rows(n_x, n_u, T, u_lo, u_hi):
    """Static inequality block: u_t <= u_hi then -u_t <= -u_lo, per t."""
    nv = n_x * (T + 1) + n_u * T
    I_u = sparse.eye_array(n_u)
    per_t = sparse.vstack([I_u, -I_u])
    J = sparse.hstack([
        sparse.csc_array((2 * n_u * T, n_x * (T + 1))),
        sparse.kron(sparse.eye_array(T), per_t),
    ], format="csc")
    rhs = np.tile(np.concatenate([u_hi, -u_lo]), T)
    assert J.shape == (2 * n_u * T, nv)
    return J, rhs


def build_ocp_nlp(spec: OcpSpec, hess_mode: str = "gauss_newton") -> NlpSpec:
    """Stacked-trajectory NLP for an OcpSpec.

    Cost: sum_t (x_t - x_target)' Q (x_t - x_target) + u_t' R u_t plus the
    terminal (x_T - x_target)' Q_T (x_T - x_target).  Equalities: initial
    condition, then Euler dynamics rows per timestep.  Inequalities:
    circular-obstacle rows r^2 - ||pos_t - c||^2 <= 0 grouped per obstacle
    over t = 0..T, then control bounds (upper, lower) per timestep.

    hess_mode "gauss_newton" uses the constant PSD cost Hessian;
    "exact" adds multiplier-weighted constraint curvature (analytic for
    the obstacle rows and the Dubins dynamics, finite differences of the
    analytic Jacobians for the quadrotor) and goes through the
    eigenvalue-shift guard.
    """
    if hess_mode not in ("gauss_newton", "exact"):
        raise SqpError(f"unknown hess_mode {hess_mode!r}")
    n_x, n_u = spec.dims
    T = spec.T
    nv = n_x * (T + 1) + n_u * T
    n_obs = len(spec.obstacles)
    m = n_obs * (T + 1) + (2 * n_u * T if spec.u_lo is not None else 0)
    p = n_x * (T + 1)
    x_tgt = np.asarray(spec.x_target, dtype=np.float64)

    h, jac_h = _dynamics_constraints(
        spec.dynamics, spec.dt, np.asarray(spec.x0, dtype=np.float64),
        n_x, n_u, T)

    centers = np.array([c for c, _ in spec.obstacles], dtype=np.float64).reshape(n_obs, 2)
    radii = np.array([r for _, r in spec.obstacles], dtype=np.float64)
    if spec.u_lo is not None:
        J_ctrl, rhs_ctrl = _control_bound_rows(
            n_x, n_u, T, np.asarray(spec.u_lo, float), np.asarray(spec.u_hi, float))

    def g(w):
        X, U = _split(w, n_x, n_u, T)
        parts = []
        if n_obs:
            pos = X[:, :2]
            d2 = ((pos[None, :, :] - centers[:, None, :]) ** 2).sum(axis=2)
            parts.append((radii[:, None] ** 2 - d2).ravel())
        if spec.u_lo is not None:
            parts.append(np.concatenate([
                np.concatenate([U[t] - spec.u_hi, spec.u_lo - U[t]])
                for t in range(T)]))
        return np.concatenate(parts) if parts else np.zeros(0)

    def jac_g(w):
        X, _ = _split(w, n_x, n_u, T)
        blocks = []
        if n_obs:
            rows, cols, vals = [], [], []
            for i in range(n_obs):
                diff = X[:, :2] - centers[i]
                for t in range(T + 1):
                    r0 = i * (T + 1) + t
                    rows.extend([r0, r0])
                    cols.extend([n_x * t, n_x * t + 1])
                    vals.extend(-2.0 * diff[t])
            blocks.append(sparse.csc_array(
                (vals, (rows, cols)), shape=(n_obs * (T + 1), nv)))
        if spec.u_lo is not None:
            blocks.append(J_ctrl)
        return sparse.vstack(blocks, format="csc") if blocks else sparse.csc_array((0, nv))

    cost_H = sparse.block_diag(
        [2.0 * spec.Q] * T + [2.0 * spec.Q_T] + [2.0 * spec.R] * T,
        format="csc")

    def f(w):
        X, U = _split(w, n_x, n_u, T)
        E = X - x_tgt
        run = float(np.einsum("ti,ij,tj->", E[:T], spec.Q, E[:T]))
        run += float(np.einsum("ti,ij,tj->", U, spec.R, U))
        return run + float(E[T] @ spec.Q_T @ E[T])

    def grad_f(w):
        X, U = _split(w, n_x, n_u, T)
        E = X - x_tgt
        gx = np.vstack([2.0 * E[:T] @ spec.Q.T, 2.0 * (spec.Q_T @ E[T])[None, :]])
        gu = 2.0 * U @ spec.R.T
        return np.concatenate([gx.ravel(), gu.ravel()])

    if hess_mode == "gauss_newton":
        def hess_lag(w, y_I, y_E):
            return cost_H
        hess_psd = True
    else:
        jac = _JACOBIANS[spec.dynamics]
        dt = spec.dt

        def _weighted_dyn_curvature(xt, ut, lam):
            # Hessian of lam' f(x, u) on the (x_t, u_t) block.
            if spec.dynamics == "dubins":
                Hb = np.zeros((5, 5))
                v, th = ut[0], xt[2]
                c, s = np.cos(th), np.sin(th)
                # f1 = v cos(th):  d2/dth2 = -v c, d2/dth dv = -s
                # f2 = v sin(th):  d2/dth2 = -v s, d2/dth dv =  c
                Hb[2, 2] = lam[0] * (-v * c) + lam[1] * (-v * s)
                Hb[2, 3] = Hb[3, 2] = lam[0] * (-s) + lam[1] * c
                return Hb
            k = n_x + n_u
            Hb = np.zeros((k, k))
            eps = 1e-6
            for j in range(k):
                dxj = np.zeros(n_x)
                duj = np.zeros(n_u)
                (dxj if j < n_x else duj)[j if j < n_x else j - n_x] = eps
                Ap, Bp = jac(xt + dxj, ut + duj)
                Am, Bm = jac(xt - dxj, ut - duj)
                gp = lam @ np.hstack([Ap, Bp])
                gm = lam @ np.hstack([Am, Bm])
                Hb[j] = (gp - gm) / (2 * eps)
            return 0.5 * (Hb + Hb.T)

        def hess_lag(w, y_I, y_E):
            X, U = _split(w, n_x, n_u, T)
            H = cost_H.toarray()
            for t in range(T):
                lam = y_E[n_x * (t + 1):n_x * (t + 2)]
                Hb = _weighted_dyn_curvature(X[t], U[t], lam)
                sx = slice(n_x * t, n_x * (t + 1))
                su = slice(n_x * (T + 1) + n_u * t, n_x * (T + 1) + n_u * (t + 1))
                H[sx, sx] += -dt * Hb[:n_x, :n_x]
                H[sx, su] += -dt * Hb[:n_x, n_x:]
                H[su, sx] += -dt * Hb[n_x:, :n_x]
                H[su, su] += -dt * Hb[n_x:, n_x:]
            for i in range(n_obs):
                for t in range(T + 1):
                    yv = y_I[i * (T + 1) + t]
                    sxp = slice(n_x * t, n_x * t + 2)
                    H[sxp, sxp] += yv * (-2.0) * np.eye(2)
            return sparse.csc_array(H)
        hess_psd = False

    x0f = np.asarray(spec.x0, float)
    x_init = (_detour_init(x0f, x_tgt, spec.obstacles, n_u, T) if n_obs
              else _interp_init(x0f, x_tgt, n_u, T))
    return NlpSpec(
        n=nv, m=m, p=p, f=f, grad_f=grad_f, g=g, jac_g=jac_g, h=h,
        jac_h=jac_h, hess_lag=hess_lag, x_init=x_init,
        hess_psd=hess_psd, name=spec.name or f"{spec.dynamics}-ocp")


# ---------------------------------------------------------------------------
# predictive safety filter

@dataclass
class SafetyFilterSpec:
    """Barrier-constrained control filtering task (single obstacle)."""

    u_ref: np.ndarray          # (T, n_u) reference controls
    beta: float
    x0: np.ndarray
    obstacle: tuple            # (center(2,), radius)
    dynamics: str = "dubins"
    dt: float = 0.05
    u_lo: np.ndarray | None = None
    u_hi: np.ndarray | None = None
    include_control_bounds: bool = True
    name: str = ""

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise SqpError("beta must lie in (0, 1)")
        if self.dynamics not in _DYN_DIMS:
            raise SqpError(f"unknown dynamics tag {self.dynamics!r}")
        if self.obstacle[1] <= 0:
            raise SqpError("obstacle radius must be positive")

    @property
    def T(self):
        return len(self.u_ref)

    @property
    def dims(self):
        return _DYN_DIMS[self.dynamics]


def build_safety_filter_nlp(spec: SafetyFilterSpec) -> NlpSpec:
    """NLP that tracks reference controls under a decaying-barrier constraint.

    Objective sum_t ||u_t - u_t^ref||^2; equalities are the initial
    condition and Euler dynamics rows; inequalities are the barrier rows
    (1 - beta) h(x_t) - h(x_{t+1}) <= 0 for t = 0..T-1 with
    h(x) = ||pos - c||^2 - r^2, followed (when include_control_bounds)
    by per-timestep control bounds.  The initial guess rolls the
    reference controls through the dynamics, so an already-safe
    reference is a KKT point and sqp_solve returns it unchanged.
    """
    n_x, n_u = spec.dims
    T = spec.T
    nv = n_x * (T + 1) + n_u * T
    u_ref = np.asarray(spec.u_ref, dtype=np.float64).reshape(T, n_u)
    c = np.asarray(spec.obstacle[0], dtype=np.float64)
    r = float(spec.obstacle[1])
    beta = float(spec.beta)
    with_bounds = spec.include_control_bounds and spec.u_lo is not None
    m = T + (2 * n_u * T if with_bounds else 0)
    p = n_x * (T + 1)

    h_eq, jac_h = _dynamics_constraints(
        spec.dynamics, spec.dt, np.asarray(spec.x0, float), n_x, n_u, T)
    if with_bounds:
        J_ctrl, rhs_ctrl = _control_bound_rows(
            n_x, n_u, T, np.asarray(spec.u_lo, float), np.asarray(spec.u_hi, float))

    def barrier(pos):
        return ((pos - c) ** 2).sum(axis=-1) - r ** 2

    def g(w):
        X, U = _split(w, n_x, n_u, T)
        hx = barrier(X[:, :2])
        rows = (1.0 - beta) * hx[:-1] - hx[1:]
        if with_bounds:
            ctrl = np.concatenate([
                np.concatenate([U[t] - spec.u_hi, spec.u_lo - U[t]])
                for t in range(T)])
            return np.concatenate([rows, ctrl])
        return rows

    def jac_g(w):
        X, _ = _split(w, n_x, n_u, T)
        diff = X[:, :2] - c
        rows, cols, vals = [], [], []
        for t in range(T):
            rows.extend([t, t, t, t])
            cols.extend([n_x * t, n_x * t + 1, n_x * (t + 1), n_x * (t + 1) + 1])
            vals.extend([(1 - beta) * 2.0 * diff[t, 0],
                         (1 - beta) * 2.0 * diff[t, 1],
                         -2.0 * diff[t + 1, 0], -2.0 * diff[t + 1, 1]])
        J = sparse.csc_array((vals, (rows, cols)), shape=(T, nv))
        if with_bounds:
            J = sparse.vstack([J, J_ctrl], format="csc")
        return J

    H = sparse.diags_array(
        np.concatenate([np.zeros(n_x * (T + 1)), 2.0 * np.ones(n_u * T)]),
        format="csc")

    def f(w):
        _, U = _split(w, n_x, n_u, T)
        return float(((U - u_ref) ** 2).sum())

    def grad_f(w):
        _, U = _split(w, n_x, n_u, T)
        return np.concatenate([np.zeros(n_x * (T + 1)),
                               (2.0 * (U - u_ref)).ravel()])

    def hess_lag(w, y_I, y_E):
        return H

    # roll the reference through the dynamics for the initial guess
    fdyn = _DYNAMICS[spec.dynamics]
    states = [np.asarray(spec.x0, dtype=np.float64)]
    for t in range(T):
        states.append(euler_step(fdyn, states[-1], u_ref[t], spec.dt))
    x_init = np.concatenate([np.concatenate(states), u_ref.ravel()])

    return NlpSpec(
        n=nv, m=m, p=p, f=f, grad_f=grad_f, g=g, jac_g=jac_g, h=h_eq,
        jac_h=jac_h, hess_lag=hess_lag, x_init=x_init, hess_psd=True,
        name=spec.name or "safety-filter")


# ---------------------------------------------------------------------------
# randomized task samplers

def sample_dubins_task(seed: int) -> OcpSpec:
    """Random Dubins reach-target task with five circular obstacles.

    Draw order: x0 (3 uniforms on +-(5, 5, pi)), x_target (3), obstacle
    centers (5*2 uniforms in the axis-aligned box spanned by the initial
    and target positions), radii (5 uniforms on [0.01, 0.2] * distance).
    Scenarios whose fixed initial position lies inside an obstacle are
    unsolvable by construction (the initial-condition equality pins the
    violated row), so the whole scenario is redrawn until the start is
    clear; the target may remain covered.
    """
    rng = Stream(seed)
    bound = np.array([5.0, 5.0, np.pi])
    for _ in range(100):
        x0 = rng.uniform(3, -bound, bound)
        x_tgt = rng.uniform(3, -bound, bound)
        lo = np.minimum(x0[:2], x_tgt[:2])
        hi = np.maximum(x0[:2], x_tgt[:2])
        centers = rng.uniform(10, np.tile(lo, 5), np.tile(hi, 5)).reshape(5, 2)
        dist = float(np.linalg.norm(x_tgt - x0))
        radii = rng.uniform(5, 0.01 * dist, 0.2 * dist)
        if np.all(np.linalg.norm(x0[:2] - centers, axis=1) > radii):
            Q = np.diag([1.0, 1.0, 0.1])
            return OcpSpec(
                dynamics="dubins", T=50, dt=0.033, Q=Q, R=0.1 * np.eye(2),
                Q_T=100.0 * Q, x0=x0, x_target=x_tgt,
                obstacles=[(centers[i], float(radii[i])) for i in range(5)],
                u_lo=np.array([-10.0, -5.0]), u_hi=np.array([10.0, 5.0]),
                name=f"dubins-{seed}")
    raise SqpError("no clear-start scenario found in 100 draws")


def sample_quadrotor_task(seed: int) -> OcpSpec:
    """Random quadrotor reach-target task (no obstacles).

    Draw order: x0 (12 uniforms on +-bound), x_target (12).
    """
    rng = Stream(seed)
    bound = np.array([5, 5, 5, 1, 1, 1, np.pi, np.pi / 2, np.pi, 1, 1, 1],
                     dtype=np.float64)
    x0 = rng.uniform(12, -bound, bound)
    x_tgt = rng.uniform(12, -bound, bound)
    Q = np.diag([1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1])
    return OcpSpec(
        dynamics="quadrotor", T=50, dt=0.05, Q=Q, R=0.01 * np.eye(4),
        Q_T=1000.0 * Q, x0=x0, x_target=x_tgt, obstacles=[],
        u_lo=np.array([0.0, -10.0, -10.0, -10.0]),
        u_hi=np.array([20.0, 10.0, 10.0, 10.0]),
        name=f"quadrotor-{seed}")


def sample_safety_filter_task(seed: int, beta: float = 0.1,
                              include_control_bounds: bool = True) -> SafetyFilterSpec:
    """Random barrier-filter scenario with zero reference controls.

    Draw order: x0 (3 uniforms on +-(5, 5, pi)), x_target (3), obstacle
    center (2 uniforms in the box spanned by the positions), radius
    (1 uniform on [0.01, 2] * max coordinate gap).  The initial position
    is resampled away from the obstacle interior by redrawing the whole
    scenario (the filter needs a safe starting state).
    """
    rng = Stream(seed)
    bound = np.array([5.0, 5.0, np.pi])
    for _ in range(100):
        x0 = rng.uniform(3, -bound, bound)
        x_tgt = rng.uniform(3, -bound, bound)
        lo = np.minimum(x0[:2], x_tgt[:2])
        hi = np.maximum(x0[:2], x_tgt[:2])
        center = rng.uniform(2, lo, hi)
        gap = float(np.max(np.abs(x_tgt[:2] - x0[:2])))
        radius = float(rng.uniform(1, 0.01, 2.0)[0]) * gap
        if radius > 0 and np.linalg.norm(x0[:2] - center) > radius:
            return SafetyFilterSpec(
                u_ref=np.zeros((50, 2)), beta=beta, x0=x0,
                obstacle=(center, radius), dynamics="dubins", dt=0.05,
                u_lo=np.array([-10.0, -5.0]), u_hi=np.array([10.0, 5.0]),
                include_control_bounds=include_control_bounds,
                name=f"safety-filter-{seed}")
    raise SqpError("no safe scenario found in 100 draws")


# ---------------------------------------------------------------------------
# task / trajectory serialization

def ocp_spec_to_json(spec: OcpSpec, indent=None) -> str:
    doc = {
        "kind": "ocp",
        "dynamics": spec.dynamics, "T": spec.T, "dt": spec.dt,
        "Q": spec.Q.tolist(), "R": spec.R.tolist(), "Q_T": spec.Q_T.tolist(),
        "x0": list(map(float, spec.x0)),
        "x_target": list(map(float, spec.x_target)),
        "obstacles": [[list(map(float, c)), float(r)] for c, r in spec.obstacles],
        "u_lo": None if spec.u_lo is None else list(map(float, spec.u_lo)),
        "u_hi": None if spec.u_hi is None else list(map(float, spec.u_hi)),
        "name": spec.name,
    }
    return json.dumps(doc, indent=indent)


def ocp_spec_from_json(text: str) -> OcpSpec:
    doc = json.loads(text)
    if doc.get("kind") != "ocp":
        raise SqpError("not an OCP task document")
    arr = lambda v: None if v is None else np.asarray(v, dtype=np.float64)
    return OcpSpec(
        dynamics=doc["dynamics"], T=int(doc["T"]), dt=float(doc["dt"]),
        Q=arr(doc["Q"]), R=arr(doc["R"]), Q_T=arr(doc["Q_T"]),
        x0=arr(doc["x0"]), x_target=arr(doc["x_target"]),
        obstacles=[(np.asarray(c, dtype=np.float64), float(r))
                   for c, r in doc["obstacles"]],
        u_lo=arr(doc["u_lo"]), u_hi=arr(doc["u_hi"]),
        name=doc.get("name", ""))


def safety_spec_to_json(spec: SafetyFilterSpec, indent=None) -> str:
    doc = {
        "kind": "safety_filter",
        "dynamics": spec.dynamics, "dt": spec.dt, "beta": spec.beta,
        "u_ref": np.asarray(spec.u_ref, dtype=np.float64).tolist(),
        "x0": list(map(float, spec.x0)),
        "obstacle": [list(map(float, spec.obstacle[0])), float(spec.obstacle[1])],
        "u_lo": None if spec.u_lo is None else list(map(float, spec.u_lo)),
        "u_hi": None if spec.u_hi is None else list(map(float, spec.u_hi)),
        "include_control_bounds": spec.include_control_bounds,
        "name": spec.name,
    }
    return json.dumps(doc, indent=indent)


def safety_spec_from_json(text: str) -> SafetyFilterSpec:
    doc = json.loads(text)
    if doc.get("kind") != "safety_filter":
        raise SqpError("not a safety-filter task document")
    arr = lambda v: None if v is None else np.asarray(v, dtype=np.float64)
    return SafetyFilterSpec(
        u_ref=np.asarray(doc["u_ref"], dtype=np.float64),
        beta=float(doc["beta"]), x0=arr(doc["x0"]),
        obstacle=(np.asarray(doc["obstacle"][0], dtype=np.float64),
                  float(doc["obstacle"][1])),
        dynamics=doc["dynamics"], dt=float(doc["dt"]),
        u_lo=arr(doc["u_lo"]), u_hi=arr(doc["u_hi"]),
        include_control_bounds=bool(doc.get("include_control_bounds", True)),
        name=doc.get("name", ""))


def load_task(path):
    """Read a task file; returns OcpSpec or SafetyFilterSpec by its kind."""
    with open(path) as fh:
        text = fh.read()
    kind = json.loads(text).get("kind")
    if kind == "ocp":
        return ocp_spec_from_json(text)
    if kind == "safety_filter":
        return safety_spec_from_json(text)
    raise SqpError(f"unknown task kind {kind!r}")


def result_to_json(result: SqpResult, n_x, n_u, T, indent=None) -> str:
    """Trajectory + history export for external plotting."""
    X, U = unstack(result.x, n_x, n_u, T)
    doc = {
        "status": result.status.value,
        "states": X.tolist(),
        "controls": U.tolist(),
        "history": result.history,
    }
    return json.dumps(doc, indent=indent)
