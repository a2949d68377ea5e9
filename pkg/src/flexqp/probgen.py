"""Seeded generators for the nine QP problem families.

Reproducibility contract
------------------------
All randomness flows through ``Stream``, a counter-based SplitMix64
generator fixed here so an implementation in any language can reproduce
the datasets bit for bit.  The k-th 64-bit output (k = 1, 2, ...) is
``mix64(seed + k * 0x9E3779B97F4A7C15)`` where ``mix64`` is::

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

with every operation modulo 2**64.  Uniforms on [0, 1) take the top 53
bits, ``u = (raw >> 11) * 2**-53``.  Normal variates use the Box-Muller
cosine branch, two uniforms per variate in draw order (u1, u2)::

    z = sqrt(-2 ln max(u1, 2**-53)) * cos(2 pi u2)

Bernoulli masks are ``u < p`` per entry.  Matrices are drawn row-major.
Sparse matrices draw the full Bernoulli mask first, then a value for
every entry (masked-out entries still consume draws), then multiply.
Each generator's docstring lists its exact draw order; together with the
stream definition above that makes the emitted problem JSON byte
identical across platforms.

The linear optimal control families are emitted in stacked form: the
variable vector is (x_0..x_T, u_0..u_{T-1}); equalities are the initial
condition block followed by the dynamics rows for t = 0..T-1; the
inequalities are the per-timestep state bounds for t = 0..T followed by
the control bounds for t = 0..T-1.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .qp_core import (
    QpProblem,
    oracle_solve,
    problem_hash,
    save,
    save_solution,
)

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)
_U53 = 2.0 ** -53


class GeneratorError(ValueError):
    """Invalid generator specification or non-convergent subroutine."""


class Stream:
    """Counter-based SplitMix64 draw stream (see module docstring).

    Parameters
    ----------
    seed : int
        64-bit seed; negative values are reduced modulo 2**64.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    @property
    def count(self) -> int:
        """Number of raw 64-bit words drawn so far."""
        return self._count

    def raw(self, k: int) -> np.ndarray:
        """Next k raw 64-bit outputs as uint64."""
        idx = np.arange(self._count + 1, self._count + k + 1, dtype=np.uint64)
        self._count += k
        z = self._seed + _GAMMA * idx
        z ^= z >> np.uint64(30)
        z *= _MIX_1
        z ^= z >> np.uint64(27)
        z *= _MIX_2
        z ^= z >> np.uint64(31)
        return z

    def uniform(self, k: int, lo=0.0, hi=1.0) -> np.ndarray:
        """k uniforms on [lo, hi); bounds may be arrays of length k."""
        u = (self.raw(k) >> np.uint64(11)).astype(np.float64) * _U53
        return np.asarray(lo) + (np.asarray(hi) - np.asarray(lo)) * u

    def normal(self, k: int, mean=0.0, std=1.0) -> np.ndarray:
        """k normal variates via Box-Muller (two uniforms each)."""
        u = self.uniform(2 * k).reshape(k, 2)
        u1 = np.maximum(u[:, 0], _U53)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[:, 1])
        return np.asarray(mean) + np.asarray(std) * z

    def bernoulli(self, p: float, k: int) -> np.ndarray:
        """k boolean draws, True with probability p."""
        return self.uniform(k) < p


@dataclass(frozen=True)
class GenSpec:
    """One generator invocation: class tag, seed, optional dimension overrides.

    The seed fully determines the output problem; ``scale`` may override
    the class's default dimensions (keys are validated per class).
    """

    class_tag: str
    seed: int
    scale: dict | None = None


def _resolve(scale, defaults, tag):
    dims = dict(defaults)
    for key, val in (scale or {}).items():
        if key not in dims:
            raise GeneratorError(f"unknown scale override {key!r} for {tag}")
        if not isinstance(val, (int, np.integer)) or isinstance(val, bool) or val <= 0:
            raise GeneratorError(f"scale override {key}={val!r} must be a positive integer")
        dims[key] = int(val)
    return dims


def _problem(P_full, q, G, h, A, b, name):
    """Wrap dense/sparse blocks into a canonical QpProblem (P upper triangle)."""
    n = len(q)
    m = 0 if h is None else len(h)
    p = 0 if b is None else len(b)
    P = sparse.triu(sparse.csc_array(P_full), format="csc")
    G = sparse.csc_array(G) if G is not None else sparse.csc_array((0, n))
    A = sparse.csc_array(A) if A is not None else sparse.csc_array((0, n))
    h = np.zeros(0) if h is None else np.asarray(h, dtype=np.float64)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=np.float64)
    return QpProblem(n=n, m=m, p=p, P=P, q=np.asarray(q, dtype=np.float64),
                     G=G, h=h, A=A, b=b, name=name)


# ---------------------------------------------------------------------------
# random QPs

def _gen_random_qp(seed, scale):
    """Inequality-only random QP: P = M'M + I, h = G xi.

    Draw order: M (n*n), q (n), G (m*n), xi (n).
    """
    d = _resolve(scale, {"n": 50, "m": 40}, "random_qp")
    n, m = d["n"], d["m"]
    rng = Stream(seed)
    M = rng.normal(n * n).reshape(n, n)
    q = rng.normal(n)
    G = rng.normal(m * n).reshape(m, n)
    xi = rng.normal(n)
    P = M.T @ M + np.eye(n)
    return _problem(P, q, G, G @ xi, None, None, f"random_qp-{seed}")


def _gen_random_qp_eq(seed, scale):
    """Random QP with equalities: h = G xi, b = A zeta (independent points).

    Draw order: M (n*n), q (n), G (m*n), A (p*n), xi (n), zeta (n).
    """
    d = _resolve(scale, {"n": 50, "m": 25, "p": 20}, "random_qp_eq")
    n, m, p = d["n"], d["m"], d["p"]
    rng = Stream(seed)
    M = rng.normal(n * n).reshape(n, n)
    q = rng.normal(n)
    G = rng.normal(m * n).reshape(m, n)
    A = rng.normal(p * n).reshape(p, n)
    xi = rng.normal(n)
    zeta = rng.normal(n)
    P = M.T @ M + np.eye(n)
    return _problem(P, q, G, G @ xi, A, A @ zeta, f"random_qp_eq-{seed}")


# ---------------------------------------------------------------------------
# portfolio optimization

def _gen_portfolio(seed, scale):
    """Factor-model portfolio QP in lifted (x, y) form.

    min x'Dx + y'y - mu'x / gamma  s.t.  y = F'x, 1'x = 1, x >= 0,
    with gamma = 1.  Equality rows: the k factor rows F'x - y = 0, then
    the budget row.  Inequalities: -x <= 0.

    Draw order: mu (n), F mask (n*k Bernoulli 0.5), F values (n*k),
    D diagonal (n uniforms on [0, sqrt(k))).
    """
    d = _resolve(scale, {"n": 250, "k": 25}, "portfolio")
    n, k = d["n"], d["k"]
    if k >= n:
        raise GeneratorError("portfolio requires k < n")
    gamma = 1.0
    rng = Stream(seed)
    mu = rng.normal(n)
    mask = rng.bernoulli(0.5, n * k)
    F = (rng.normal(n * k) * mask).reshape(n, k)
    D = rng.uniform(n, 0.0, np.sqrt(k))
    P = sparse.diags_array(np.concatenate([2.0 * D, 2.0 * np.ones(k)]), format="csc")
    q = np.concatenate([-mu / gamma, np.zeros(k)])
    G = sparse.hstack([-sparse.eye_array(n), sparse.csc_array((n, k))], format="csc")
    A = sparse.vstack([
        sparse.hstack([sparse.csc_array(F.T), -sparse.eye_array(k)]),
        sparse.csc_array((np.ones(n), (np.zeros(n, dtype=int), np.arange(n))), shape=(1, n + k)),
    ], format="csc")
    b = np.concatenate([np.zeros(k), [1.0]])
    return _problem(P, q, G, np.zeros(n), A, b, f"portfolio-{seed}")


# ---------------------------------------------------------------------------
# support vector machine

def _gen_svm(seed, scale):
    """Hinge-loss SVM in lifted (x, t) form, lambda = 1.

    min x'x + lambda 1't  s.t.  diag(labels) A x - t <= -1,  -t <= 0.
    Labels: +1 for the first floor(m/2) points, -1 after.  Features:
    A_ij = label_i / n + z_ij / sqrt(n) with z standard normal.

    Draw order: z (m*n, row-major).
    """
    d = _resolve(scale, {"n": 10, "m": 200}, "svm")
    n, m = d["n"], d["m"]
    lam = 1.0
    rng = Stream(seed)
    labels = np.where(np.arange(m) < m // 2, 1.0, -1.0)
    Z = rng.normal(m * n).reshape(m, n)
    A_feat = labels[:, None] / n + Z / np.sqrt(n)
    P = sparse.diags_array(np.concatenate([2.0 * np.ones(n), np.zeros(m)]), format="csc")
    q = np.concatenate([np.zeros(n), lam * np.ones(m)])
    BA = sparse.csc_array(labels[:, None] * A_feat)
    I_m = sparse.eye_array(m)
    G = sparse.vstack([
        sparse.hstack([BA, -I_m]),
        sparse.hstack([sparse.csc_array((m, n)), -I_m]),
    ], format="csc")
    h = np.concatenate([-np.ones(m), np.zeros(m)])
    return _problem(P, q, G, h, None, None, f"svm-{seed}")


# ---------------------------------------------------------------------------
# lasso

def _gen_lasso(seed, scale):
    """L1-regularized least squares in lifted (x, y, t) form.

    min y'y + lambda 1't  s.t.  Ax - y = b,  x - t <= 0,  -x - t <= 0,
    with lambda = 0.2 ||A'b||_inf and b = A v + noise.

    Draw order: A mask (m*n Bernoulli 0.15), A values (m*n), v mask
    (n Bernoulli 0.5), v values (n normals, std 1/sqrt(n)), noise (m).
    """
    d = _resolve(scale, {"n": 5, "m": 500}, "lasso")
    n, m = d["n"], d["m"]
    rng = Stream(seed)
    mask_A = rng.bernoulli(0.15, m * n)
    A_data = (rng.normal(m * n) * mask_A).reshape(m, n)
    mask_v = rng.bernoulli(0.5, n)
    v = rng.normal(n, std=1.0 / np.sqrt(n)) * mask_v
    noise = rng.normal(m)
    b_obs = A_data @ v + noise
    lam = 0.2 * np.max(np.abs(A_data.T @ b_obs))
    P = sparse.diags_array(
        np.concatenate([np.zeros(n), 2.0 * np.ones(m), np.zeros(n)]), format="csc")
    q = np.concatenate([np.zeros(n + m), lam * np.ones(n)])
    A_sp = sparse.csc_array(A_data)
    I_n, I_m = sparse.eye_array(n), sparse.eye_array(m)
    Z_nm = sparse.csc_array((n, m))
    A_eq = sparse.hstack([A_sp, -I_m, sparse.csc_array((m, n))], format="csc")
    G = sparse.vstack([
        sparse.hstack([I_n, Z_nm, -I_n]),
        sparse.hstack([-I_n, Z_nm, -I_n]),
    ], format="csc")
    return _problem(P, q, G, np.zeros(2 * n), A_eq, b_obs, f"lasso-{seed}")


# ---------------------------------------------------------------------------
# huber fitting

def _gen_huber(seed, scale):
    """Huber regression in lifted (x, u, r, s) form, delta = 1.

    min u'u + 2 delta 1'(r + s)  s.t.  Ax - u - r + s = b,  -r <= 0, -s <= 0,
    with b = A v + eps, eps drawn N(0, 1/4) with probability 0.95 and
    U(0, 10) otherwise.

    Draw order: A mask (m*n Bernoulli 0.15), A values (m*n), v
    (n normals, std 1/sqrt(n)), eps branch mask (m Bernoulli 0.95),
    eps normal values (m, std 1/2), eps uniform values (m on [0, 10)).
    """
    d = _resolve(scale, {"n": 10, "m": 100}, "huber")
    n, m = d["n"], d["m"]
    delta = 1.0
    rng = Stream(seed)
    mask_A = rng.bernoulli(0.15, m * n)
    A_data = (rng.normal(m * n) * mask_A).reshape(m, n)
    v = rng.normal(n, std=1.0 / np.sqrt(n))
    mask_eps = rng.bernoulli(0.95, m)
    eps_norm = rng.normal(m, std=0.5)
    eps_unif = rng.uniform(m, 0.0, 10.0)
    eps = np.where(mask_eps, eps_norm, eps_unif)
    b_obs = A_data @ v + eps
    P = sparse.diags_array(
        np.concatenate([np.zeros(n), 2.0 * np.ones(m), np.zeros(2 * m)]), format="csc")
    q = np.concatenate([np.zeros(n + m), 2.0 * delta * np.ones(2 * m)])
    I_m = sparse.eye_array(m)
    A_eq = sparse.hstack([sparse.csc_array(A_data), -I_m, -I_m, I_m], format="csc")
    Z = sparse.csc_array((m, n + m))
    G = sparse.vstack([
        sparse.hstack([Z, -I_m, sparse.csc_array((m, m))]),
        sparse.hstack([Z, sparse.csc_array((m, m)), -I_m]),
    ], format="csc")
    return _problem(P, q, G, np.zeros(2 * m), A_eq, b_obs, f"huber-{seed}")


# ---------------------------------------------------------------------------
# linear optimal control

def riccati_terminal_cost(A_d, B_d, Q, R, tol=1e-10, max_iter=10000):
    """Terminal cost from the discrete algebraic Riccati equation.

    Fixed-point iteration of the DARE starting from Q, stopping when the
    iterate changes by at most ``tol`` in the max norm.

    Parameters
    ----------
    A_d, B_d : ndarray
        Discrete-time dynamics, shapes (n_x, n_x) and (n_x, n_u).
    Q, R : ndarray
        State cost (PSD) and control cost (PD) matrices.

    Returns
    -------
    ndarray
        Symmetric PSD terminal cost matrix.

    Raises
    ------
    GeneratorError
        If the iteration has not converged after ``max_iter`` steps
        (callers resample the dynamics).
    """
    P = np.array(Q, dtype=np.float64)
    for _ in range(max_iter):
        BtP = B_d.T @ P
        K = np.linalg.solve(R + BtP @ B_d, BtP @ A_d)
        P_next = Q + A_d.T @ P @ A_d - A_d.T @ P @ B_d @ K
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) <= tol:
            return P_next
        P = P_next
    raise GeneratorError("Riccati fixed-point iteration did not converge")


def _stack_ocp(A_d, B_d, Q, R, Q_T, A_x, b_x, A_u, b_u, x0, T, name):
    """Stack a linear-quadratic OCP into a canonical QP.

    Variables (x_0..x_T, u_0..u_{T-1}); equalities: initial condition
    block, then dynamics rows x_{t+1} - A_d x_t - B_d u_t = 0 for
    t = 0..T-1; inequalities: A_x x_t <= b_x for t = 0..T, then
    A_u u_t <= b_u for t = 0..T-1.
    """
    n_x, n_u = B_d.shape
    nx_tot, nu_tot = n_x * (T + 1), n_u * T
    P = sparse.block_diag(
        [2.0 * Q] * T + [2.0 * Q_T] + [2.0 * R] * T, format="csc")
    q = np.zeros(nx_tot + nu_tot)

    eye_T = sparse.eye_array(T)
    shift = sparse.hstack([sparse.kron(eye_T, -A_d), sparse.csc_array((T * n_x, n_x))])
    ident = sparse.hstack([sparse.csc_array((T * n_x, n_x)), sparse.eye_array(T * n_x)])
    dyn_u = sparse.kron(eye_T, -B_d)
    A_eq = sparse.vstack([
        sparse.hstack([sparse.eye_array(n_x), sparse.csc_array((n_x, nx_tot - n_x + nu_tot))]),
        sparse.hstack([shift + ident, dyn_u]),
    ], format="csc")
    b_eq = np.concatenate([x0, np.zeros(T * n_x)])

    G = sparse.block_diag([
        sparse.kron(sparse.eye_array(T + 1), sparse.csc_array(A_x)),
        sparse.kron(eye_T, sparse.csc_array(A_u)),
    ], format="csc")
    h = np.concatenate([np.tile(b_x, T + 1), np.tile(b_u, T)])
    return _problem(P, q, G, h, A_eq, b_eq, name)


def _lp_feasible(prob) -> bool:
    """Phase-1 LP on the canonical constraint system."""
    from scipy.optimize import linprog
    res = linprog(np.zeros(prob.n), A_ub=prob.G, b_ub=prob.h,
                  A_eq=prob.A if prob.p else None,
                  b_eq=prob.b if prob.p else None,
                  bounds=[(None, None)] * prob.n, method="highs")
    return res.status == 0


def _gen_random_ocp(seed, scale):
    """Random stabilizable linear OCP with Riccati terminal cost.

    Dynamics A_d = X^-1 diag(a) X with a ~ U(-1, 1); diagonal state cost
    with 70% nonzero entries U(0, 10); R = 0.1 I; box constraints
    |x| <= x_bound ~ U(1, 2), |u| <= u_bound ~ U(0, 0.1); initial state
    U(-x_bound/2, x_bound/2).

    Similarity-transformed dynamics are non-normal, so roughly 40% of raw
    draws have free-decay transients that escape the state box faster than
    the weak controls can counter; those instances are rejected by an LP
    feasibility check and the whole draw repeats from the top, continuing
    the stream, so every emitted instance is known feasible.

    Draw order per attempt (an attempt also restarts on a failed Riccati
    fixed point or singular X): a (n_x), X (n_x*n_x), B_d (n_x*n_u),
    cost mask (n_x Bernoulli 0.7), cost values (n_x uniforms on [0, 10)),
    x_bound (n_x), u_bound (n_u), x0 (n_x).
    """
    d = _resolve(scale, {"n_x": 8, "n_u": 4, "T": 10}, "random_ocp")
    n_x, n_u, T = d["n_x"], d["n_u"], d["T"]
    rng = Stream(seed)
    I_x, I_u = np.eye(n_x), np.eye(n_u)
    for _ in range(100):
        a = rng.uniform(n_x, -1.0, 1.0)
        X = rng.normal(n_x * n_x).reshape(n_x, n_x)
        B_d = rng.normal(n_x * n_u).reshape(n_x, n_u)
        mask_q = rng.bernoulli(0.7, n_x)
        q_diag = rng.uniform(n_x, 0.0, 10.0) * mask_q
        Q = np.diag(q_diag)
        R = 0.1 * np.eye(n_u)
        x_bound = rng.uniform(n_x, 1.0, 2.0)
        u_bound = rng.uniform(n_u, 0.0, 0.1)
        x0 = rng.uniform(n_x, -0.5 * x_bound, 0.5 * x_bound)
        try:
            A_d = np.linalg.solve(X, np.diag(a) @ X)
            Q_T = riccati_terminal_cost(A_d, B_d, Q, R)
        except (np.linalg.LinAlgError, GeneratorError):
            continue
        prob = _stack_ocp(
            A_d, B_d, Q, R, Q_T,
            np.vstack([I_x, -I_x]), np.concatenate([x_bound, x_bound]),
            np.vstack([I_u, -I_u]), np.concatenate([u_bound, u_bound]),
            x0, T, f"random_ocp-{seed}")
        if _lp_feasible(prob):
            return prob
    raise GeneratorError("random_ocp: no feasible draw in 100 attempts")


def _gen_double_integrator(seed, scale):
    """Double-integrator OCP, fixed dynamics, T = 20.

    Draw order: x0 (2 uniforms on [-1, 1) x [-0.3, 0.3)).
    """
    d = _resolve(scale, {"T": 20}, "double_integrator")
    T = d["T"]
    rng = Stream(seed)
    x0 = rng.uniform(2, np.array([-1.0, -0.3]), np.array([1.0, 0.3]))
    A_d = np.array([[1.0, 1.0], [0.0, 1.0]])
    B_d = np.array([[0.5], [0.1]])
    Q = np.eye(2)
    R = np.array([[1.0]])
    I_x = np.eye(2)
    return _stack_ocp(
        A_d, B_d, Q, R, Q,
        np.vstack([I_x, -I_x]), np.array([5.0, 1.0, 5.0, 1.0]),
        np.array([[1.0], [-1.0]]), np.array([0.1, 0.1]),
        x0, T, f"double_integrator-{seed}")


def _gen_oscillating_masses(seed, scale):
    """Chain of six coupled oscillating masses, three actuators, T = 10.

    Continuous dynamics: positions feed velocities; the acceleration row
    is stiffness -2 I + (L + L') plus damping -2 I + 0.1 (L + L') with L
    the lower shift matrix.  (The damping diagonal must be negative: the
    sign-flipped +2 variant has spectral radius 2.04 after Euler
    discretization and admits no feasible trajectory within the 4-unit
    state box.)  Euler step dt = 0.5; unit costs; |x| <= 4, |u| <= 0.5.

    Draw order: x0 (12 uniforms on [-1, 1)).
    """
    d = _resolve(scale, {"T": 10}, "oscillating_masses")
    T = d["T"]
    rng = Stream(seed)
    x0 = rng.uniform(12, -1.0, 1.0)
    L = np.zeros((6, 6))
    L[np.arange(1, 6), np.arange(5)] = 1.0
    S = L + L.T
    stiff, damp = 1.0, 0.1
    A_c = np.block([
        [np.zeros((6, 6)), np.eye(6)],
        [-2.0 * stiff * np.eye(6) + stiff * S, -2.0 * np.eye(6) + damp * S],
    ])
    F = np.array([
        [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0],
    ])
    B_c = np.vstack([np.zeros((6, 3)), F])
    dt = 0.5
    A_d = np.eye(12) + A_c * dt
    B_d = B_c * dt
    I_x, I_u = np.eye(12), np.eye(3)
    return _stack_ocp(
        A_d, B_d, np.eye(12), np.eye(3), np.eye(12),
        np.vstack([I_x, -I_x]), 4.0 * np.ones(24),
        np.vstack([I_u, -I_u]), 0.5 * np.ones(6),
        x0, T, f"oscillating_masses-{seed}")


CLASSES = {
    "random_qp": _gen_random_qp,
    "random_qp_eq": _gen_random_qp_eq,
    "portfolio": _gen_portfolio,
    "svm": _gen_svm,
    "lasso": _gen_lasso,
    "huber": _gen_huber,
    "random_ocp": _gen_random_ocp,
    "double_integrator": _gen_double_integrator,
    "oscillating_masses": _gen_oscillating_masses,
}


def generate(spec: GenSpec) -> QpProblem:
    """Generate one problem instance.

    Parameters
    ----------
    spec : GenSpec
        Class tag (one of ``CLASSES``), 64-bit seed, optional dimension
        overrides.

    Returns
    -------
    QpProblem
        Canonical-form problem; same spec always yields byte-identical
        JSON serialization.

    Raises
    ------
    GeneratorError
        Unknown class tag or invalid scale override.
    """
    if spec.class_tag not in CLASSES:
        raise GeneratorError(f"unknown problem class {spec.class_tag!r}")
    return CLASSES[spec.class_tag](spec.seed, spec.scale)


# ---------------------------------------------------------------------------
# dataset writer

_ORACLE_DIM_LIMIT = 30


@dataclass
class DatasetEntry:
    """One manifest row: where a problem lives and what is known about it."""

    class_tag: str
    seed: int
    dims: dict
    hash: str
    problem: str
    oracle: str | None = None
    scale: dict | None = field(default=None)


def write_dataset(out_dir, class_tag, count, start_seed=0, scale=None,
                  with_oracle=True, append=False):
    """Generate ``count`` seeded problems and write them plus a manifest.

    Each problem is written to ``<class>-<seed>.json``.  When the
    instance is small enough for the enumeration oracle (n and m both at
    most 30) and ``with_oracle`` is set, the oracle solution is written
    alongside as ``<class>-<seed>.oracle.json`` and referenced from the
    manifest.  ``manifest.json`` lists class, seed, dimensions, problem
    hash, and file paths (relative to ``out_dir``).

    Parameters
    ----------
    out_dir : path-like
        Output directory, created if missing.
    class_tag : str
        One of ``CLASSES``.
    count : int
        Number of instances; seeds run start_seed .. start_seed+count-1.
    append : bool
        Extend an existing manifest instead of replacing it.

    Returns
    -------
    str
        Path to the manifest file.
    """
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.json")
    entries = []
    if append and os.path.exists(manifest_path):
        with open(manifest_path) as f:
            entries = json.load(f)["entries"]
    for i in range(count):
        seed = start_seed + i
        prob = generate(GenSpec(class_tag, seed, scale))
        fname = f"{class_tag}-{seed}.json"
        save(prob, os.path.join(out_dir, fname))
        entry = {
            "class": class_tag,
            "seed": seed,
            "dims": {"n": prob.n, "m": prob.m, "p": prob.p},
            "hash": problem_hash(prob),
            "problem": fname,
            "oracle": None,
        }
        if scale:
            entry["scale"] = {k: int(v) for k, v in scale.items()}
        if (with_oracle and prob.n <= _ORACLE_DIM_LIMIT
                and prob.m <= _ORACLE_DIM_LIMIT):
            sol = oracle_solve(prob)
            oname = f"{class_tag}-{seed}.oracle.json"
            save_solution(sol, os.path.join(out_dir, oname))
            entry["oracle"] = oname
        entries.append(entry)
    with open(manifest_path, "w") as f:
        json.dump({"version": 1, "entries": entries}, f, indent=2)
        f.write("\n")
    return manifest_path


def load_manifest(path):
    """Read a dataset manifest; returns the list of entry dicts."""
    with open(path) as f:
        doc = json.load(f)
    try:
        return doc["entries"]
    except (KeyError, TypeError):
        raise ValueError(f"{path} is not a dataset manifest")
