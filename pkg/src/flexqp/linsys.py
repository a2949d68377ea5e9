"""KKT assembly and linear solves for the elastic ADMM block-1 subproblem.

Direct path: sparse LDL' of the quasi-definite KKT matrix

    [[P + sx*I,  G',                     A'         ],
     [G,         -diag(1/ss + 1/rI),     0          ],
     [A,         0,                      -diag(1/rE)]]

under a greedy minimum-degree permutation.  Quasi-definiteness guarantees
the factorization exists for every symmetric permutation, so there is no
pivoting.  Symbolic analysis and the ordering are cached per sparsity
pattern; the pattern does not depend on parameter values, so refactoring
after a parameter change reuses both.

Indirect path: conjugate gradients on the reduced positive definite system
obtained by eliminating the two regularized diagonal blocks, warm started
from the previous block-1 solution.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import sparse


class FactorizationError(RuntimeError):
    """Raised when a pivot collapses to zero (cannot happen for exactly
    quasi-definite input; signals a malformed matrix)."""


@dataclass
class CgConfig:
    """Indirect-solve knobs.  tol is relative to the rhs 2-norm; the solver
    layer resolves the default to 1e-2 * eps_abs.  max_iter defaults to 10n."""

    tol: float = 1e-5
    max_iter: int | None = None
    precondition: bool = False


@dataclass
class KktFactorization:
    perm: np.ndarray
    iperm: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Lx: np.ndarray
    D: np.ndarray
    dims: tuple
    params_snapshot: dict = field(default_factory=dict)

    @property
    def L(self) -> sparse.csc_array:
        """Unit lower-triangular factor as a scipy matrix (diagonal included)."""
        n = self.D.size
        L = sparse.csc_array((self.Lx, self.Li, self.Lp), shape=(n, n))
        return (L + sparse.eye_array(n, format="csc")).tocsc()

    def solve(self, rhs):
        out = np.asarray(rhs, dtype=np.float64)[self.perm]
        _ldl_solve(self.Lp, self.Li, self.Lx, self.D, out)
        return out[self.iperm]


# ---------------------------------------------------------------------------
# assembly


def assemble_kkt(prob, params) -> sparse.csc_array:
    """Quasi-definite KKT matrix of the block-1 equality-constrained QP."""
    n, m, p = prob.n, prob.m, prob.p
    blocks = [[prob.full_P() + params.sigma_x * sparse.eye_array(n, format="csc"),
               prob.G.T, prob.A.T]]
    if m:
        dI = -(1.0 / params.sigma_s + 1.0 / params.rho_I)
        blocks.append([prob.G, sparse.diags_array(dI, format="csc"), None])
    if p:
        dE = -(1.0 / params.rho_E)
        blocks.append([prob.A, None, sparse.diags_array(dE, format="csc")])
    cols = [True, m > 0, p > 0]
    rows = [[blk for blk, keep in zip(row, cols) if keep] for row in blocks]
    K = sparse.block_array(rows, format="csc")
    K.sum_duplicates()
    K.sort_indices()
    return K


def kkt_rhs(prob, params, state) -> np.ndarray:
    """Right-hand side of the direct KKT system at the current iterate."""
    r1 = params.sigma_x * state.x - prob.q
    r2 = (prob.h - state.s + state.w_s / params.sigma_s
          + state.z_I - state.y_I / params.rho_I)
    r3 = prob.b + state.z_E - state.y_E / params.rho_E
    return np.concatenate([r1, r2, r3])


# ---------------------------------------------------------------------------
# LDL' kernels


@njit(cache=True)
def _ldl_symbolic(n, Ap, Ai):
    parent = np.full(n, -1, np.int64)
    flag = np.full(n, -1, np.int64)
    Lnz = np.zeros(n, np.int64)
    for k in range(n):
        flag[k] = k
        for ptr in range(Ap[k], Ap[k + 1]):
            i = Ai[ptr]
            if i < k:
                while flag[i] != k:
                    if parent[i] == -1:
                        parent[i] = k
                    Lnz[i] += 1
                    flag[i] = k
                    i = parent[i]
    Lp = np.zeros(n + 1, np.int64)
    for k in range(n):
        Lp[k + 1] = Lp[k] + Lnz[k]
    return parent, Lp


@njit(cache=True)
def _ldl_numeric(n, Ap, Ai, Ax, parent, Lp):
    Li = np.zeros(Lp[n], np.int64)
    Lx = np.zeros(Lp[n], np.float64)
    D = np.zeros(n, np.float64)
    Y = np.zeros(n, np.float64)
    pattern = np.zeros(n, np.int64)
    stack = np.zeros(n, np.int64)
    lnz = np.zeros(n, np.int64)
    flag = np.full(n, -1, np.int64)
    for k in range(n):
        top = n
        flag[k] = k
        for ptr in range(Ap[k], Ap[k + 1]):
            i = Ai[ptr]
            if i > k:
                continue
            Y[i] += Ax[ptr]
            length = 0
            while flag[i] != k:
                pattern[length] = i
                length += 1
                flag[i] = k
                i = parent[i]
            while length > 0:
                length -= 1
                top -= 1
                stack[top] = pattern[length]
        D[k] = Y[k]
        Y[k] = 0.0
        while top < n:
            i = stack[top]
            top += 1
            yi = Y[i]
            Y[i] = 0.0
            for ptr in range(Lp[i], Lp[i] + lnz[i]):
                Y[Li[ptr]] -= Lx[ptr] * yi
            lki = yi / D[i]
            D[k] -= lki * yi
            Li[Lp[i] + lnz[i]] = k
            Lx[Lp[i] + lnz[i]] = lki
            lnz[i] += 1
        if D[k] == 0.0:
            return Li, Lx, D, k
    return Li, Lx, D, -1


@njit(cache=True)
def _ldl_solve(Lp, Li, Lx, D, x):
    n = D.size
    for j in range(n):
        xj = x[j]
        for ptr in range(Lp[j], Lp[j + 1]):
            x[Li[ptr]] -= Lx[ptr] * xj
    for j in range(n):
        x[j] /= D[j]
    for j in range(n - 1, -1, -1):
        acc = x[j]
        for ptr in range(Lp[j], Lp[j + 1]):
            acc -= Lx[ptr] * x[Li[ptr]]
        x[j] = acc


# ---------------------------------------------------------------------------
# ordering and caches


def _pattern_key(N, indptr, indices):
    hsh = hashlib.sha1()
    hsh.update(np.int64(N).tobytes())
    hsh.update(np.asarray(indptr, dtype=np.int64).tobytes())
    hsh.update(np.asarray(indices, dtype=np.int64).tobytes())
    return hsh.hexdigest()


_ORDER_CACHE: dict = {}
_SYMBOLIC_CACHE: dict = {}


def reset_caches():
    _ORDER_CACHE.clear()
    _SYMBOLIC_CACHE.clear()


def _min_degree(N, Ap, Ai):
    """Greedy exact minimum-degree ordering on the elimination graph,
    deterministic (ties broken by lowest index)."""
    import heapq

    adj = [set() for _ in range(N)]
    for j in range(N):
        for ptr in range(Ap[j], Ap[j + 1]):
            i = Ai[ptr]
            if i != j:
                adj[i].add(j)
                adj[j].add(i)
    heap = [(len(adj[v]), v) for v in range(N)]
    heapq.heapify(heap)
    done = np.zeros(N, dtype=bool)
    perm = np.empty(N, dtype=np.int64)
    count = 0
    while heap:
        d, v = heapq.heappop(heap)
        if done[v] or d != len(adj[v]):
            continue
        done[v] = True
        perm[count] = v
        count += 1
        nbrs = [u for u in adj[v] if not done[u]]
        for u in nbrs:
            adj[u].discard(v)
        for a in range(len(nbrs)):
            u = nbrs[a]
            au = adj[u]
            for c in range(a + 1, len(nbrs)):
                w = nbrs[c]
                if w not in au:
                    au.add(w)
                    adj[w].add(u)
        for u in nbrs:
            heapq.heappush(heap, (len(adj[u]), u))
        adj[v] = set()
    return perm


def fill_reducing_permutation(K) -> np.ndarray:
    """Cached greedy minimum-degree permutation for a symmetric pattern."""
    K = sparse.csc_array(K)
    key = _pattern_key(K.shape[0], K.indptr, K.indices)
    perm = _ORDER_CACHE.get(key)
    if perm is None:
        perm = _min_degree(K.shape[0], K.indptr, K.indices)
        _ORDER_CACHE[key] = perm
    return perm


def factor(kkt, dims=None, params_snapshot=None) -> KktFactorization:
    """LDL' factorization of a quasi-definite symmetric matrix.

    Raises FactorizationError (naming the pivot) on a zero pivot, which a
    genuinely quasi-definite matrix cannot produce.
    """
    K = sparse.csc_array(kkt)
    N = K.shape[0]
    if dims is None:
        dims = (N, 0, 0)
    perm = fill_reducing_permutation(K)
    Kp = K[perm][:, perm]
    U = sparse.triu(Kp, format="csc")
    U.sort_indices()
    Ap = np.asarray(U.indptr, dtype=np.int64)
    Ai = np.asarray(U.indices, dtype=np.int64)
    key = _pattern_key(N, Ap, Ai)
    symb = _SYMBOLIC_CACHE.get(key)
    if symb is None:
        symb = _ldl_symbolic(N, Ap, Ai)
        _SYMBOLIC_CACHE[key] = symb
    parent, Lp = symb
    Li, Lx, D, bad = _ldl_numeric(N, Ap, Ai, U.data.astype(np.float64),
                                  parent, Lp)
    if bad >= 0:
        raise FactorizationError(f"zero pivot at permuted index {bad}")
    iperm = np.empty_like(perm)
    iperm[perm] = np.arange(N)
    snap = dict(params_snapshot) if params_snapshot else {}
    return KktFactorization(perm=perm, iperm=iperm, Lp=Lp, Li=Li, Lx=Lx,
                            D=D, dims=tuple(dims), params_snapshot=snap)


def solve_direct(fact: KktFactorization, rhs):
    """Solve the factored KKT system and split into (x_tilde, nu_I, nu_E)."""
    n, m, p = fact.dims
    sol = fact.solve(rhs)
    return sol[:n], sol[n:n + m], sol[n + m:n + m + p]


def recover_block1_direct(params, state, nu_I, nu_E):
    """Recover the slack and split iterates from the KKT multipliers."""
    s_t = state.s - state.w_s / params.sigma_s - nu_I / params.sigma_s
    zI_t = state.z_I - state.y_I / params.rho_I + nu_I / params.rho_I
    zE_t = state.z_E - state.y_E / params.rho_E + nu_E / params.rho_E
    return s_t, zI_t, zE_t


def should_refactor(old_params, new_params, threshold: float = 5.0) -> bool:
    """True when any parameter that enters the KKT matrix moved by more
    than ``threshold`` in ratio (mu and alpha never require refactoring)."""
    pairs = [(np.atleast_1d(old_params.sigma_x), np.atleast_1d(new_params.sigma_x)),
             (old_params.sigma_s, new_params.sigma_s),
             (old_params.rho_I, new_params.rho_I),
             (old_params.rho_E, new_params.rho_E)]
    for old, new in pairs:
        if np.asarray(old).size == 0:
            continue
        ratio = np.maximum(new / old, old / new)
        if np.any(ratio > threshold):
            return True
    return False


# ---------------------------------------------------------------------------
# indirect path


def solve_indirect(prob, params, state, cfg: CgConfig | None = None):
    """Conjugate-gradient solve of the reduced block-1 system.

    Returns (x_tilde, nu_I, nu_E, cg_iterations).  Terminates when the
    residual 2-norm falls below cfg.tol * ||rhs||_2 or at the iteration
    cap (10n by default).  Warm starts from state.x_tilde.
    """
    if cfg is None:
        cfg = CgConfig()
    n, m, p = prob.n, prob.m, prob.p
    G, A, Pfull = prob.G, prob.A, prob.full_P()
    dI = 1.0 / (1.0 / params.sigma_s + 1.0 / params.rho_I)
    dE = params.rho_E

    def matvec(v):
        out = Pfull @ v + params.sigma_x * v
        if m:
            out += G.T @ (dI * (G @ v))
        if p:
            out += A.T @ (dE * (A @ v))
        return out

    rhs = params.sigma_x * state.x - prob.q
    if m:
        rhs += G.T @ (dI * (prob.h - state.s + state.w_s / params.sigma_s
                            + state.z_I - state.y_I / params.rho_I))
    if p:
        rhs += A.T @ (dE * (prob.b + state.z_E - state.y_E / params.rho_E))

    max_iter = cfg.max_iter if cfg.max_iter is not None else 10 * n
    rhs_norm = np.linalg.norm(rhs)
    x = state.x_tilde.copy()
    if rhs_norm == 0.0:
        x = np.zeros(n)
        iters = 0
    else:
        if cfg.precondition:
            dg = Pfull.diagonal() + params.sigma_x
            if m:
                dg = dg + G.power(2).T @ dI
            if p:
                dg = dg + A.power(2).T @ dE
            minv = 1.0 / dg
        else:
            minv = None
        r = rhs - matvec(x)
        z = minv * r if minv is not None else r
        d = z.copy()
        rz = r @ z
        iters = 0
        tol_abs = cfg.tol * rhs_norm
        while np.linalg.norm(r) > tol_abs and iters < max_iter:
            Kd = matvec(d)
            alpha = rz / (d @ Kd)
            x = x + alpha * d
            r = r - alpha * Kd
            z = minv * r if minv is not None else r
            rz_new = r @ z
            d = z + (rz_new / rz) * d
            rz = rz_new
            iters += 1

    nu_I = dI * (G @ x + state.s - state.w_s / params.sigma_s
                 - state.z_I + state.y_I / params.rho_I - prob.h) if m else np.zeros(0)
    nu_E = dE * (A @ x - state.z_E + state.y_E / params.rho_E - prob.b) if p else np.zeros(0)
    return x, nu_I, nu_E, iters
