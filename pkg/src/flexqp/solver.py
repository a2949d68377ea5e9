"""Elastic ADMM solver for the l1-relaxed QP.

The relaxation splits the penalty terms through copy variables

    z_I = Gx + s - h,   z_E = Ax - b,   s >= 0,

and alternates an equality-constrained QP solve (block 1, via linsys) with
closed-form shrinkage updates.  Over-relaxation with alpha in (0, 2) uses
the standard convention: the relaxed combination alpha*tilde + (1-alpha)*prev
replaces the block-1 iterate in both the projection arguments and the dual
updates, which keeps w_x identically zero and the dual iterates inside
[-mu, mu] elementwise at every iteration (the exactness certificate).

Policies (see policy module) may retune parameters between iterations.  In
the direct method the parameters that enter the KKT matrix (sigma_x,
sigma_s, rho_I, rho_E) are adopted only when the proposal drifts past the
refactor threshold (a factor of 5 by default), at which point the system
is refactored; the step therefore always runs with a factorization
consistent with its own parameters.  mu and alpha are adopted every
iteration.  The indirect method adopts full proposals every iteration.
The policy is queried once per iteration, before the step, with the
residual bundle of the current iterate.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import linsys
from .qp_core import QpProblem, QpSolution, Status, objective, problem_hash, qp_residual

PARAM_MIN = 1e-6
PARAM_MAX = 1e6
DIVERGENCE_GUARD = 1e12


def _inf(v) -> float:
    return float(np.max(np.abs(v))) if np.asarray(v).size else 0.0


@dataclass
class SolverParams:
    """Per-iteration tuning knobs.  Vector entries are per constraint."""

    mu_I: np.ndarray
    mu_E: np.ndarray
    sigma_s: np.ndarray
    rho_I: np.ndarray
    rho_E: np.ndarray
    sigma_x: float
    alpha: float

    def __post_init__(self):
        self.mu_I = np.atleast_1d(np.asarray(self.mu_I, dtype=np.float64))
        self.mu_E = np.atleast_1d(np.asarray(self.mu_E, dtype=np.float64))
        self.sigma_s = np.atleast_1d(np.asarray(self.sigma_s, dtype=np.float64))
        self.rho_I = np.atleast_1d(np.asarray(self.rho_I, dtype=np.float64))
        self.rho_E = np.atleast_1d(np.asarray(self.rho_E, dtype=np.float64))
        self.sigma_x = float(self.sigma_x)
        self.alpha = float(self.alpha)
        for nm, v in (("mu_I", self.mu_I), ("mu_E", self.mu_E),
                      ("sigma_s", self.sigma_s), ("rho_I", self.rho_I),
                      ("rho_E", self.rho_E)):
            if v.size and (not np.all(np.isfinite(v)) or np.any(v <= 0)):
                raise ValueError(f"{nm} must be positive and finite")
        if not (self.sigma_x > 0 and np.isfinite(self.sigma_x)):
            raise ValueError("sigma_x must be positive and finite")
        if not (0.0 < self.alpha < 2.0):
            raise ValueError("alpha must lie strictly inside (0, 2)")

    def copy(self) -> "SolverParams":
        return SolverParams(self.mu_I.copy(), self.mu_E.copy(),
                            self.sigma_s.copy(), self.rho_I.copy(),
                            self.rho_E.copy(), self.sigma_x, self.alpha)

    def snapshot(self) -> dict:
        return {"sigma_x": self.sigma_x, "sigma_s": self.sigma_s.copy(),
                "rho_I": self.rho_I.copy(), "rho_E": self.rho_E.copy()}


def default_params(prob: QpProblem, mu: float = 1e3, sigma_s: float = 1e-1,
                   rho: float = 1e-1, sigma_x: float = 1e-6,
                   alpha: float = 1.6) -> SolverParams:
    """Paper defaults broadcast to the problem's constraint counts."""
    return SolverParams(
        mu_I=np.full(prob.m, mu), mu_E=np.full(prob.p, mu),
        sigma_s=np.full(prob.m, sigma_s),
        rho_I=np.full(prob.m, rho), rho_E=np.full(prob.p, rho),
        sigma_x=sigma_x, alpha=alpha,
    )


def clamp_params(params: SolverParams) -> SolverParams:
    """Clamp every tunable into [PARAM_MIN, PARAM_MAX] (alpha untouched)."""
    cl = lambda v: np.clip(v, PARAM_MIN, PARAM_MAX)
    return SolverParams(cl(params.mu_I), cl(params.mu_E), cl(params.sigma_s),
                        cl(params.rho_I), cl(params.rho_E),
                        float(np.clip(params.sigma_x, PARAM_MIN, PARAM_MAX)),
                        params.alpha)


@dataclass
class SolverState:
    x: np.ndarray
    s: np.ndarray
    z_I: np.ndarray
    z_E: np.ndarray
    w_s: np.ndarray
    y_I: np.ndarray
    y_E: np.ndarray
    x_tilde: np.ndarray
    s_tilde: np.ndarray
    zI_tilde: np.ndarray
    zE_tilde: np.ndarray
    nu_I: np.ndarray
    nu_E: np.ndarray
    prev_x: np.ndarray
    prev_s: np.ndarray
    prev_z_I: np.ndarray
    prev_z_E: np.ndarray
    k: int = 0


def cold_start(prob: QpProblem) -> SolverState:
    """All-zero start with s0 = max(h, 0)."""
    n, m, p = prob.n, prob.m, prob.p
    x = np.zeros(n)
    s = np.maximum(prob.h, 0.0)
    zI = np.zeros(m)
    zE = np.zeros(p)
    return SolverState(
        x=x, s=s, z_I=zI, z_E=zE,
        w_s=np.zeros(m), y_I=np.zeros(m), y_E=np.zeros(p),
        x_tilde=x.copy(), s_tilde=s.copy(), zI_tilde=zI.copy(),
        zE_tilde=zE.copy(), nu_I=np.zeros(m), nu_E=np.zeros(p),
        prev_x=x.copy(), prev_s=s.copy(), prev_z_I=zI.copy(),
        prev_z_E=zE.copy(), k=0,
    )


@dataclass
class ResidualBundle:
    """Relaxed-problem KKT residuals plus the ADMM primal/dual residuals.

    Primal entries are tilde-minus-current at matching iteration index;
    dual entries are previous-minus-current (zero by definition at k = 0).
    """

    zeta_dual: np.ndarray
    zeta_I: np.ndarray
    zeta_E: np.ndarray
    prim_x: np.ndarray
    prim_s: np.ndarray
    prim_I: np.ndarray
    prim_E: np.ndarray
    dual_x: np.ndarray
    dual_s: np.ndarray
    dual_I: np.ndarray
    dual_E: np.ndarray

    def relaxed_inf(self) -> float:
        return max(_inf(self.zeta_dual), _inf(self.zeta_I), _inf(self.zeta_E))

    def admm_primal_inf(self) -> float:
        return max(_inf(self.prim_x), _inf(self.prim_s),
                   _inf(self.prim_I), _inf(self.prim_E))

    def admm_dual_inf(self) -> float:
        return max(_inf(self.dual_x), _inf(self.dual_s),
                   _inf(self.dual_I), _inf(self.dual_E))

    def max_all(self) -> float:
        return max(self.relaxed_inf(), self.admm_primal_inf(),
                   self.admm_dual_inf())

    def norms(self) -> dict:
        """All eleven inf-norms, keyed for traces and policies."""
        return {
            "zeta_dual": _inf(self.zeta_dual),
            "zeta_I": _inf(self.zeta_I),
            "zeta_E": _inf(self.zeta_E),
            "prim_x": _inf(self.prim_x),
            "prim_s": _inf(self.prim_s),
            "prim_I": _inf(self.prim_I),
            "prim_E": _inf(self.prim_E),
            "dual_x": _inf(self.dual_x),
            "dual_s": _inf(self.dual_s),
            "dual_I": _inf(self.dual_I),
            "dual_E": _inf(self.dual_E),
        }


def relaxed_residuals(prob: QpProblem, state: SolverState) -> ResidualBundle:
    """Residual bundle of the current iterate (see ResidualBundle)."""
    x, s = state.x, state.s
    zeta_dual = (prob.full_P() @ x + prob.q
                 + prob.G.T @ state.y_I + prob.A.T @ state.y_E)
    zeta_I = prob.G @ x + s - prob.h - state.z_I
    zeta_E = prob.A @ x - prob.b - state.z_E
    return ResidualBundle(
        zeta_dual=zeta_dual, zeta_I=zeta_I, zeta_E=zeta_E,
        prim_x=state.x_tilde - x, prim_s=state.s_tilde - s,
        prim_I=state.zI_tilde - state.z_I, prim_E=state.zE_tilde - state.z_E,
        dual_x=state.prev_x - x, dual_s=state.prev_s - s,
        dual_I=state.prev_z_I - state.z_I, dual_E=state.prev_z_E - state.z_E,
    )


def soft_threshold(v, kappa):
    """Elementwise shrinkage S_kappa(v) = (v - kappa)_+ - (-v - kappa)_+."""
    v = np.asarray(v, dtype=np.float64)
    return np.maximum(v - kappa, 0.0) - np.maximum(-v - kappa, 0.0)


def admm_step(prob: QpProblem, params: SolverParams, state: SolverState,
              method: str = "direct", fact: linsys.KktFactorization | None = None,
              cg: linsys.CgConfig | None = None,
              counters: dict | None = None) -> SolverState:
    """One relaxed ADMM iteration; returns the successor state.

    Block 1 is solved directly (LDL', using ``fact`` or factoring on the
    fly) or by CG.  The returned duals satisfy |y| <= mu elementwise for
    the parameters used in this step.  When ``counters`` is given its
    "cg_iterations" entry accumulates the CG work of the indirect path.
    """
    if method == "direct":
        if fact is None:
            fact = linsys.factor(linsys.assemble_kkt(prob, params),
                                 dims=(prob.n, prob.m, prob.p))
        x_t, nu_I, nu_E = linsys.solve_direct(fact, linsys.kkt_rhs(prob, params, state))
    elif method == "indirect":
        x_t, nu_I, nu_E, cg_used = linsys.solve_indirect(prob, params, state, cg)
        if counters is not None:
            counters["cg_iterations"] = counters.get("cg_iterations", 0) + cg_used
    else:
        raise ValueError(f"unknown method {method!r}")
    s_t, zI_t, zE_t = linsys.recover_block1_direct(params, state, nu_I, nu_E)

    a = params.alpha
    hx = a * x_t + (1.0 - a) * state.x
    hs = a * s_t + (1.0 - a) * state.s
    hI = a * zI_t + (1.0 - a) * state.z_I
    hE = a * zE_t + (1.0 - a) * state.z_E

    x_new = hx
    s_new = np.maximum(hs + state.w_s / params.sigma_s, 0.0)
    zI_new = soft_threshold(hI + state.y_I / params.rho_I,
                            params.mu_I / params.rho_I)
    zE_new = soft_threshold(hE + state.y_E / params.rho_E,
                            params.mu_E / params.rho_E)
    w_s_new = state.w_s + params.sigma_s * (hs - s_new)
    y_I_new = state.y_I + params.rho_I * (hI - zI_new)
    y_E_new = state.y_E + params.rho_E * (hE - zE_new)

    # dual iterates cannot leave the exactness box
    assert not y_I_new.size or np.all(np.abs(y_I_new) <= params.mu_I + 1e-9)
    assert not y_E_new.size or np.all(np.abs(y_E_new) <= params.mu_E + 1e-9)

    return SolverState(
        x=x_new, s=s_new, z_I=zI_new, z_E=zE_new,
        w_s=w_s_new, y_I=y_I_new, y_E=y_E_new,
        x_tilde=x_t, s_tilde=s_t, zI_tilde=zI_t, zE_tilde=zE_t,
        nu_I=nu_I, nu_E=nu_E,
        prev_x=state.x, prev_s=state.s, prev_z_I=state.z_I,
        prev_z_E=state.z_E, k=state.k + 1,
    )


@dataclass
class SolveSettings:
    eps_abs: float = 1e-3
    max_iter: int = 4000
    timeout_ms: float | None = None
    policy: object | None = None
    method: str = "direct"
    cg: linsys.CgConfig | None = None
    check_every: int = 1
    record_trace: bool = False
    refactor_threshold: float = 5.0
    polish: bool = False


@dataclass
class Feasibility:
    feasible: bool
    violated_ineq: np.ndarray
    violated_eq: np.ndarray


def classify_feasibility(solution: QpSolution, eps: float = 1e-3) -> Feasibility:
    """Read the violation certificates: any |z| beyond eps marks its
    original constraint as unsatisfiable at the computed solution."""
    vi = np.flatnonzero(np.abs(solution.z_I) > eps)
    ve = np.flatnonzero(np.abs(solution.z_E) > eps)
    return Feasibility(feasible=(vi.size == 0 and ve.size == 0),
                       violated_ineq=vi, violated_eq=ve)


POLISH_DELTA = 1e-9
POLISH_REFINE = 3
POLISH_PASSES = 30
POLISH_BATCH_PASSES = 2


def _elastic_kkt_error(prob, params, x, s, y_I, y_E, z_I, z_E) -> float:
    """Worst violation of the elastic problem's optimality conditions.

    Used to decide whether a polish candidate actually beats the iterate
    it started from; both candidates are scored with the same yardstick.
    """
    r_stat = prob.full_P() @ x + prob.q
    if prob.m:
        r_stat = r_stat + prob.G.T @ y_I
    if prob.p:
        r_stat = r_stat + prob.A.T @ y_E
    terms = [_inf(r_stat)]
    if prob.m:
        terms.append(_inf(prob.G @ x + s - prob.h - z_I))
        terms.append(float(np.maximum(-s, 0.0).max(initial=0.0)))
        terms.append(float(np.maximum(-y_I, 0.0).max(initial=0.0)))
        terms.append(float(np.maximum(np.abs(y_I) - params.mu_I, 0.0)
                           .max(initial=0.0)))
        terms.append(_inf(np.minimum(s, np.maximum(y_I, 0.0))))
        nz = z_I != 0.0
        if nz.any():
            terms.append(_inf((params.mu_I * np.sign(z_I) - y_I)[nz]))
    if prob.p:
        terms.append(_inf(prob.A @ x - prob.b - z_E))
        terms.append(float(np.maximum(np.abs(y_E) - params.mu_E, 0.0)
                           .max(initial=0.0)))
        nz = z_E != 0.0
        if nz.any():
            terms.append(_inf((params.mu_E * np.sign(z_E) - y_E)[nz]))
    return max(terms)


# row states used by the polish classification
_OFF, _ACT, _PIN_POS, _PIN_NEG = 0, 1, 2, 3

_POLISH_DEBUG = False


def _polish(prob, params, state: SolverState, settings: SolveSettings):
    """Active-set refinement of a converged elastic fixed point.

    Each row is classified from the iterate: pinned rows carry a decisive
    violation certificate, so their dual sits at the penalty box +-mu and
    they enter the reduced system only through the gradient; active rows
    hold a meaningful interior dual and are re-solved as equalities;
    the rest are dropped.  The reduced KKT system is regularized into
    quasi-definiteness, factored with the same LDL' machinery as the main
    loop, and corrected by iterative refinement against the unregularized
    matrix.  Misclassifications are repaired over a sequence of passes:
    actives whose recovered dual leaves [0, mu] (or [-mu, mu] for
    equalities) are dropped or pinned, violated dropped rows become
    active, and pinned rows whose residual changes sign fall back to
    active.  On degenerate geometry the walk can visit working sets out
    of order, so every pass is scored and the best candidate wins.
    Returns the polished (x, s, y_I, y_E, z_I, z_E, error), or None when
    no candidate strictly improves the elastic KKT error of the iterate.
    """
    n, m, p = prob.n, prob.m, prob.p
    eps = settings.eps_abs
    tight_tol = 10.0 * eps
    drop_tol = 1e-9

    res_I0 = prob.G @ state.x - prob.h if m else np.zeros(0)
    st_I = np.zeros(m, dtype=np.int8)
    st_I[(state.y_I > eps) & (np.abs(res_I0) <= tight_tol)] = _ACT
    st_I[state.z_I > eps] = _PIN_POS
    st_I[state.z_I < -eps] = _PIN_NEG
    st_E = np.full(p, _ACT, dtype=np.int8)
    st_E[state.z_E > eps] = _PIN_POS
    st_E[state.z_E < -eps] = _PIN_NEG

    P_full = sparse.csc_array(prob.full_P())
    delta = POLISH_DELTA
    best = None
    best_err = np.inf
    seen = set()
    for pass_i in range(POLISH_PASSES):
        key = (st_I.tobytes(), st_E.tobytes())
        if key in seen:
            break
        seen.add(key)
        uI_act = np.flatnonzero(st_I == _ACT)
        uI_pin = np.flatnonzero(st_I >= _PIN_POS)
        uE_act = np.flatnonzero(st_E == _ACT)
        uE_pin = np.flatnonzero(st_E >= _PIN_POS)
        sgnI_pin = np.where(st_I[uI_pin] == _PIN_POS, 1.0, -1.0)
        sgnE_pin = np.where(st_E[uE_pin] == _PIN_POS, 1.0, -1.0)
        q_eff = prob.q.copy()
        if uI_pin.size:
            q_eff = q_eff + prob.G[uI_pin].T @ (params.mu_I[uI_pin]
                                                * sgnI_pin)
        if uE_pin.size:
            q_eff = q_eff + prob.A[uE_pin].T @ (params.mu_E[uE_pin]
                                                * sgnE_pin)
        na, ne = uI_act.size, uE_act.size
        G_act = sparse.csc_array(prob.G[uI_act])
        A_enf = sparse.csc_array(prob.A[uE_act])
        K_reg = sparse.block_array(
            [[P_full + delta * sparse.identity(n), G_act.T, A_enf.T],
             [G_act, -delta * sparse.identity(na), None],
             [A_enf, None, -delta * sparse.identity(ne)]],
            format="csc")
        K_exact = sparse.block_array(
            [[P_full, G_act.T, A_enf.T],
             [G_act, None, None],
             [A_enf, None, None]], format="csc")
        rhs = np.concatenate([-q_eff, prob.h[uI_act], prob.b[uE_act]])
        fact = linsys.factor(K_reg)
        sol = fact.solve(rhs)
        for _ in range(POLISH_REFINE):
            sol = sol + fact.solve(rhs - K_exact @ sol)
        # a rank-deficient active set leaves the refinement stuck; bail
        # out rather than thrash on a singular reduced system
        ref_err = _inf(rhs - K_exact @ sol)
        if not np.isfinite(ref_err) or ref_err > eps * (1.0 + _inf(rhs)):
            if _POLISH_DEBUG:
                print(f"[polish] pass {pass_i}: singular bail "
                      f"ref_err={ref_err:.2e}")
            return None
        x_hat = sol[:n]
        y_act = sol[n:n + na]
        y_enf = sol[n + na:]

        res_I = prob.G @ x_hat - prob.h if m else np.zeros(0)
        res_E = prob.A @ x_hat - prob.b if p else np.zeros(0)
        y_I_hat = np.zeros(m)
        y_I_hat[uI_act] = np.clip(y_act, 0.0, params.mu_I[uI_act])
        y_I_hat[uI_pin] = params.mu_I[uI_pin] * sgnI_pin
        y_E_hat = np.zeros(p)
        y_E_hat[uE_act] = np.clip(y_enf, -params.mu_E[uE_act],
                                  params.mu_E[uE_act])
        y_E_hat[uE_pin] = params.mu_E[uE_pin] * sgnE_pin
        z_I_hat = np.zeros(m)
        z_I_hat[uI_pin] = np.where(sgnI_pin < 0,
                                   np.minimum(res_I[uI_pin], 0.0),
                                   np.maximum(res_I[uI_pin], 0.0))
        z_E_hat = np.zeros(p)
        z_E_hat[uE_pin] = np.where(sgnE_pin < 0,
                                   np.minimum(res_E[uE_pin], 0.0),
                                   np.maximum(res_E[uE_pin], 0.0))
        s_hat = np.maximum(-res_I, 0.0)
        if uI_pin.size:
            s_hat[uI_pin] = 0.0
        err = _elastic_kkt_error(prob, params, x_hat, s_hat,
                                 y_I_hat, y_E_hat, z_I_hat, z_E_hat)
        if np.isfinite(err) and err < best_err:
            best_err = err
            best = (x_hat, s_hat, y_I_hat, y_E_hat, z_I_hat, z_E_hat)

        # corrections as (severity, side, row, new state); dual-side
        # inconsistencies outrank primal ones
        fix_dual = []
        for i in np.flatnonzero(y_act < -drop_tol):
            fix_dual.append((-y_act[i], "I", uI_act[i], _OFF))
        over = y_act - params.mu_I[uI_act]
        for i in np.flatnonzero(over > 0):
            fix_dual.append((over[i], "I", uI_act[i], _PIN_POS))
        for i in np.flatnonzero(y_enf > params.mu_E[uE_act]):
            fix_dual.append((y_enf[i] - params.mu_E[uE_act][i],
                             "E", uE_act[i], _PIN_POS))
        for i in np.flatnonzero(-y_enf > params.mu_E[uE_act]):
            fix_dual.append((-y_enf[i] - params.mu_E[uE_act][i],
                             "E", uE_act[i], _PIN_NEG))
        fix_prim = []
        for i in np.flatnonzero((st_I == _OFF) & (res_I > drop_tol)):
            fix_prim.append((res_I[i], "I", i, _ACT))
        for i in np.flatnonzero((st_I == _PIN_POS) & (res_I < -drop_tol)):
            fix_prim.append((-res_I[i], "I", i, _ACT))
        for i in np.flatnonzero((st_I == _PIN_NEG) & (res_I > drop_tol)):
            fix_prim.append((res_I[i], "I", i, _ACT))
        for i in np.flatnonzero((st_E == _PIN_POS) & (res_E < -drop_tol)):
            fix_prim.append((-res_E[i], "E", i, _ACT))
        for i in np.flatnonzero((st_E == _PIN_NEG) & (res_E > drop_tol)):
            fix_prim.append((res_E[i], "E", i, _ACT))
        if _POLISH_DEBUG:
            print(f"[polish] pass {pass_i}: actI={uI_act.size} "
                  f"pinI={uI_pin.size} enfE={uE_act.size} "
                  f"pinE={uE_pin.size} ref_err={ref_err:.2e} "
                  f"err={err:.2e} dual_fixes={len(fix_dual)} "
                  f"prim_fixes={len(fix_prim)} "
                  f"worst={max((f[0] for f in fix_dual + fix_prim), default=0.0):.2e}")
        if not fix_dual and not fix_prim:
            break
        # early passes apply every correction at once; once that has had
        # its chance, degenerate sets are walked one row at a time so the
        # working set cannot oscillate in blocks
        if pass_i < POLISH_BATCH_PASSES:
            apply = fix_dual + fix_prim
        else:
            apply = [max(fix_dual or fix_prim, key=lambda f: f[0])]
        for _, side, row, new_state in apply:
            (st_I if side == "I" else st_E)[row] = new_state

    err_old = _elastic_kkt_error(prob, params, state.x, state.s,
                                 state.y_I, state.y_E,
                                 state.z_I, state.z_E)
    if _POLISH_DEBUG:
        print(f"[polish] err_old={err_old:.3e} err_new={best_err:.3e} "
              f"accepted={best_err < err_old}")
    if best is None or best_err >= err_old:
        return None
    return best + (best_err,)


def _diverged(state: SolverState, max_res: float) -> bool:
    vals = [max_res, _inf(state.x), _inf(state.s), _inf(state.z_I),
            _inf(state.z_E), _inf(state.y_I), _inf(state.y_E)]
    top = max(vals)
    return not np.isfinite(top) or top > DIVERGENCE_GUARD


def solve(prob: QpProblem, params: SolverParams | None = None,
          settings: SolveSettings | None = None,
          warm_start: SolverState | None = None,
          on_iteration=None):
    """Run the elastic ADMM loop to the configured tolerance.

    Returns (QpSolution, trace) where trace is a list of ResidualBundle
    captured at iterations 0..K when settings.record_trace is set, else
    None.  Status semantics: Solved when the relaxed residuals, ADMM
    residuals, violation certificates and the original-QP residual all sit
    inside eps_abs; SolvedInfeasibleOriginal when the relaxed problem
    converged but the certificates report violated original constraints;
    MaxIter / Timeout / Unbounded otherwise.
    """
    settings = settings or SolveSettings()
    if params is None:
        params = default_params(prob)
    params = params.copy()
    policy = settings.policy
    if policy is not None:
        policy.reset(prob, params)
    state = warm_start if warm_start is not None else cold_start(prob)
    if warm_start is not None and state.x.size != prob.n:
        raise ValueError("warm start dimension mismatch")
    k0 = state.k  # iterations reported below count work done in this call

    t0 = time.perf_counter()
    trace = [] if settings.record_trace else None
    fact = None
    fact_params = None
    status = Status.MAX_ITER
    counters = {"factorizations": 0, "cg_iterations": 0}
    needs_bundle_every = settings.record_trace or policy is not None

    while True:
        at_check = (state.k % settings.check_every == 0
                    or state.k >= settings.max_iter)
        bundle = None
        if needs_bundle_every or at_check:
            bundle = relaxed_residuals(prob, state)
        if trace is not None:
            trace.append(bundle)
        if bundle is not None and at_check:
            max_res = bundle.max_all()
            if _diverged(state, max_res):
                status = Status.UNBOUNDED
                break
            if max_res <= settings.eps_abs:
                z_norm = max(_inf(state.z_I), _inf(state.z_E))
                _, r_norm = qp_residual(prob, state.x, state.y_I, state.y_E)
                if z_norm <= settings.eps_abs and r_norm <= settings.eps_abs:
                    status = Status.SOLVED
                else:
                    status = Status.SOLVED_INFEASIBLE_ORIGINAL
                break
        if state.k >= settings.max_iter:
            status = Status.MAX_ITER
            break
        if settings.timeout_ms is not None and \
                (time.perf_counter() - t0) * 1e3 > settings.timeout_ms:
            status = Status.TIMEOUT
            break

        if policy is not None:
            proposal = policy.next_params(bundle, state)
            if settings.method == "direct" and fact_params is not None and \
                    not linsys.should_refactor(fact_params, proposal,
                                               settings.refactor_threshold):
                # Parameters entering the KKT matrix stay frozen until the
                # proposal drifts past the refactor threshold, so the step
                # always uses a factorization consistent with its own
                # parameters.  mu and alpha sit outside the matrix and take
                # effect immediately.
                params = SolverParams(
                    mu_I=proposal.mu_I, mu_E=proposal.mu_E,
                    sigma_s=params.sigma_s, rho_I=params.rho_I,
                    rho_E=params.rho_E, sigma_x=params.sigma_x,
                    alpha=proposal.alpha)
            else:
                params = proposal
        if settings.method == "direct":
            if fact is None or fact_params is None or \
                    linsys.should_refactor(fact_params, params,
                                           settings.refactor_threshold):
                fact = linsys.factor(linsys.assemble_kkt(prob, params),
                                     dims=(prob.n, prob.m, prob.p),
                                     params_snapshot=params.snapshot())
                fact_params = params.copy()
                counters["factorizations"] += 1
        else:
            fact = None
        state = admm_step(prob, params, state, method=settings.method,
                          fact=fact, cg=settings.cg, counters=counters)
        if on_iteration is not None:
            on_iteration(state, params)

    x_out, y_I_out, y_E_out = state.x, state.y_I, state.y_E
    z_I_out, z_E_out = state.z_I, state.z_E
    if settings.polish and status != Status.UNBOUNDED:
        try:
            refined = _polish(prob, params, state, settings)
        except linsys.FactorizationError:
            refined = None
        if refined is not None:
            x_out, _, y_I_out, y_E_out, z_I_out, z_E_out, err_new = refined
            if status in (Status.MAX_ITER, Status.TIMEOUT) \
                    and err_new <= settings.eps_abs:
                # the polished point reaches the tolerance the loop ran
                # out of budget chasing; classify it the same way the
                # convergence check would have
                z_norm = max(_inf(z_I_out), _inf(z_E_out))
                _, r_norm = qp_residual(prob, x_out, y_I_out, y_E_out)
                if z_norm <= settings.eps_abs and \
                        r_norm <= settings.eps_abs:
                    status = Status.SOLVED
                else:
                    status = Status.SOLVED_INFEASIBLE_ORIGINAL

    solution = QpSolution(
        x=x_out.copy(), y_I=y_I_out.copy(), y_E=y_E_out.copy(),
        z_I=z_I_out.copy(), z_E=z_E_out.copy(), status=status,
        iterations=state.k - k0, solve_time=time.perf_counter() - t0,
        objective=objective(prob, x_out),
        factorizations=counters["factorizations"],
        cg_iterations=counters["cg_iterations"],
    )
    return solution, trace


# ---------------------------------------------------------------------------
# warm-start serialization


def state_to_json(state: SolverState, prob: QpProblem, indent=None) -> str:
    """Serialize a solver state keyed to its problem (name + content hash)."""
    arrays = {nm: [float(v) for v in getattr(state, nm)]
              for nm in ("x", "s", "z_I", "z_E", "w_s", "y_I", "y_E",
                         "x_tilde", "s_tilde", "zI_tilde", "zE_tilde",
                         "nu_I", "nu_E", "prev_x", "prev_s", "prev_z_I",
                         "prev_z_E")}
    doc = {"problem_name": prob.name, "problem_hash": problem_hash(prob),
           "k": state.k, "state": arrays}
    return json.dumps(doc, indent=indent)


def state_from_json(text: str, prob: QpProblem) -> SolverState:
    """Parse a warm-start envelope, verifying it belongs to ``prob``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"invalid state JSON: {e}")
    if doc.get("problem_hash") != problem_hash(prob):
        raise ValueError("warm start does not match this problem "
                         "(name/hash mismatch)")
    arrays = doc["state"]
    kw = {nm: np.asarray(arrays[nm], dtype=np.float64) for nm in arrays}
    return SolverState(k=int(doc["k"]), **kw)


def save_state(state: SolverState, prob: QpProblem, path):
    with open(path, "w") as f:
        f.write(state_to_json(state, prob))


def load_state(path, prob: QpProblem) -> SolverState:
    with open(path) as f:
        return state_from_json(f.read(), prob)
