"""Convex QP containers, evaluation helpers, and a brute-force KKT oracle.

The canonical problem is

    minimize   0.5 x'Px + q'x
    subject to Gx <= h,  Ax = b

with P symmetric positive semidefinite (stored as its upper triangle, CSC),
G of shape (m, n), A of shape (p, n).  m = 0 and p = 0 are legal.

The elastic relaxation replaces hard constraints by weighted l1 penalties

    phi(x, s; mu) = 0.5 x'Px + q'x + mu_I'|Gx + s - h| + mu_E'|Ax - b|,  s >= 0,

which is bounded and attained for every problem whose objective is bounded
below on the penalty's flat directions, so the solver layer built on top of
it never has to declare defeat on an infeasible instance.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse


class Status(str, enum.Enum):
    """Terminal states of a QP solve."""

    SOLVED = "Solved"
    SOLVED_INFEASIBLE_ORIGINAL = "SolvedInfeasibleOriginal"
    MAX_ITER = "MaxIter"
    TIMEOUT = "Timeout"
    UNBOUNDED = "Unbounded"


def _as_csc(M, shape):
    out = sparse.csc_array(M, shape=shape, dtype=np.float64)
    out.sum_duplicates()
    out.sort_indices()
    return out


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


@dataclass
class QpProblem:
    """Immutable-by-convention container for one convex QP.

    Parameters
    ----------
    n, m, p : int
        Number of variables, inequality rows, equality rows.
    P : scipy sparse, (n, n)
        Upper triangle of the symmetric cost matrix.  Entries strictly
        below the diagonal are rejected.
    q, h, b : ndarray
        Dense vectors of length n, m, p.
    G, A : scipy sparse
        Constraint matrices, shapes (m, n) and (p, n).
    name : str
        Optional label carried through serialization and benchmarks.
    """

    n: int
    m: int
    p: int
    P: sparse.csc_array
    q: np.ndarray
    G: sparse.csc_array
    h: np.ndarray
    A: sparse.csc_array
    b: np.ndarray
    name: str = ""
    _P_full: sparse.csc_array = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if min(self.n, self.m, self.p) < 0:
            raise ValueError("dimensions must be nonnegative")
        self.P = _as_csc(self.P, (self.n, self.n))
        self.G = _as_csc(self.G, (self.m, self.n))
        self.A = _as_csc(self.A, (self.p, self.n))
        self.q = np.asarray(self.q, dtype=np.float64).reshape(self.n)
        self.h = np.asarray(self.h, dtype=np.float64).reshape(self.m)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(self.p)
        coo = self.P.tocoo()
        if np.any(coo.row > coo.col):
            raise ValueError("P must be given as its upper triangle")
        for nm, arr in (("P", self.P.data), ("q", self.q), ("G", self.G.data),
                        ("h", self.h), ("A", self.A.data), ("b", self.b)):
            _check_finite(nm, arr)
        self._P_full = None

    def full_P(self) -> sparse.csc_array:
        """Symmetric P reconstructed from the stored upper triangle."""
        if self._P_full is None:
            U = self.P
            D = sparse.diags_array(U.diagonal(), format="csc")
            self._P_full = (U + U.T - D).tocsc()
        return self._P_full


@dataclass
class QpSolution:
    x: np.ndarray
    y_I: np.ndarray
    y_E: np.ndarray
    z_I: np.ndarray
    z_E: np.ndarray
    status: Status
    iterations: int
    solve_time: float
    objective: float
    # work counters of the main loop: KKT factorizations (direct method)
    # and total conjugate-gradient iterations (indirect method)
    factorizations: int = 0
    cg_iterations: int = 0


def objective(prob: QpProblem, x) -> float:
    """0.5 x'Px + q'x."""
    x = np.asarray(x, dtype=np.float64)
    return float(0.5 * x @ (prob.full_P() @ x) + prob.q @ x)


def elastic_objective(prob: QpProblem, x, s, mu_I, mu_E) -> float:
    """Weighted l1 elastic merit phi(x, s; mu).  Requires s >= 0."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64).reshape(prob.m)
    if prob.m and s.min() < 0:
        raise ValueError("slack s must be elementwise nonnegative")
    mu_I = np.broadcast_to(np.asarray(mu_I, dtype=np.float64), (prob.m,))
    mu_E = np.broadcast_to(np.asarray(mu_E, dtype=np.float64), (prob.p,))
    pen_I = mu_I @ np.abs(prob.G @ x + s - prob.h) if prob.m else 0.0
    pen_E = mu_E @ np.abs(prob.A @ x - prob.b) if prob.p else 0.0
    return objective(prob, x) + float(pen_I) + float(pen_E)


def qp_residual(prob: QpProblem, x, y_I, y_E):
    """Residual map of the original QP's KKT system.

    Stacks dual stationarity Px + q + G'y_I + A'y_E, clipped primal
    inequality violation (Gx - h)_+ and equality violation Ax - b.

    Returns
    -------
    (ndarray, float)
        The stacked residual vector and its infinity norm.
    """
    x = np.asarray(x, dtype=np.float64)
    y_I = np.asarray(y_I, dtype=np.float64).reshape(prob.m)
    y_E = np.asarray(y_E, dtype=np.float64).reshape(prob.p)
    stat = prob.full_P() @ x + prob.q + prob.G.T @ y_I + prob.A.T @ y_E
    ineq = np.maximum(prob.G @ x - prob.h, 0.0)
    eq = prob.A @ x - prob.b
    r = np.concatenate([stat, ineq, eq])
    norm = float(np.max(np.abs(r))) if r.size else 0.0
    return r, norm


# ---------------------------------------------------------------------------
# serialization


def _csc_to_parts(M) -> dict:
    return {
        "col_ptr": [int(v) for v in M.indptr],
        "row_idx": [int(v) for v in M.indices],
        "val": [float(v) for v in M.data],
    }


def _csc_from_parts(parts, shape):
    try:
        col_ptr = np.asarray(parts["col_ptr"], dtype=np.int64)
        row_idx = np.asarray(parts["row_idx"], dtype=np.int64)
        val = np.asarray(parts["val"], dtype=np.float64)
    except (KeyError, TypeError) as e:
        raise ValueError(f"malformed sparse block: {e}")
    if col_ptr.size != shape[1] + 1:
        raise ValueError("col_ptr length does not match column count")
    return sparse.csc_array((val, row_idx, col_ptr), shape=shape)


def to_json(prob: QpProblem, indent=None) -> str:
    """Serialize to the canonical JSON problem format (values round-trip
    bit exactly through python's shortest-repr float encoding)."""
    doc = {
        "n": prob.n,
        "m": prob.m,
        "p": prob.p,
        "P": _csc_to_parts(prob.P),
        "q": [float(v) for v in prob.q],
        "G": _csc_to_parts(prob.G),
        "h": [float(v) for v in prob.h],
        "A": _csc_to_parts(prob.A),
        "b": [float(v) for v in prob.b],
        "name": prob.name,
    }
    return json.dumps(doc, indent=indent)


def from_json(text: str) -> QpProblem:
    """Parse the canonical JSON problem format.  Raises ValueError on
    malformed documents."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"invalid problem JSON: {e}")
    try:
        n, m, p = int(doc["n"]), int(doc["m"]), int(doc["p"])
        prob = QpProblem(
            n=n, m=m, p=p,
            P=_csc_from_parts(doc["P"], (n, n)),
            q=np.asarray(doc["q"], dtype=np.float64),
            G=_csc_from_parts(doc["G"], (m, n)),
            h=np.asarray(doc["h"], dtype=np.float64),
            A=_csc_from_parts(doc["A"], (p, n)),
            b=np.asarray(doc["b"], dtype=np.float64),
            name=str(doc.get("name", "")),
        )
    except KeyError as e:
        raise ValueError(f"problem JSON missing field {e}")
    return prob


def problem_hash(prob: QpProblem) -> str:
    """sha256 of the canonical serialization; stable across processes."""
    return hashlib.sha256(to_json(prob).encode()).hexdigest()


def load(path) -> QpProblem:
    with open(path) as f:
        return from_json(f.read())


def save(prob: QpProblem, path, indent=None):
    with open(path, "w") as f:
        f.write(to_json(prob, indent=indent))


def solution_to_json(sol: QpSolution, indent=None) -> str:
    """Serialize a solution; status is stored by its wire value."""
    doc = {
        "x": [float(v) for v in sol.x],
        "y_I": [float(v) for v in sol.y_I],
        "y_E": [float(v) for v in sol.y_E],
        "z_I": [float(v) for v in sol.z_I],
        "z_E": [float(v) for v in sol.z_E],
        "status": sol.status.value,
        "iterations": sol.iterations,
        "solve_time": sol.solve_time,
        "objective": sol.objective,
        "factorizations": sol.factorizations,
        "cg_iterations": sol.cg_iterations,
    }
    return json.dumps(doc, indent=indent)


def solution_from_json(text: str) -> QpSolution:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"invalid solution JSON: {e}")
    try:
        return QpSolution(
            x=np.asarray(doc["x"], dtype=np.float64),
            y_I=np.asarray(doc["y_I"], dtype=np.float64),
            y_E=np.asarray(doc["y_E"], dtype=np.float64),
            z_I=np.asarray(doc["z_I"], dtype=np.float64),
            z_E=np.asarray(doc["z_E"], dtype=np.float64),
            status=Status(doc["status"]),
            iterations=int(doc["iterations"]),
            solve_time=float(doc["solve_time"]),
            objective=float(doc["objective"]),
            factorizations=int(doc.get("factorizations", 0)),
            cg_iterations=int(doc.get("cg_iterations", 0)),
        )
    except KeyError as e:
        raise ValueError(f"solution JSON missing field {e}")


def load_solution(path) -> QpSolution:
    with open(path) as f:
        return solution_from_json(f.read())


def save_solution(sol: QpSolution, path, indent=None):
    with open(path, "w") as f:
        f.write(solution_to_json(sol, indent=indent))


# ---------------------------------------------------------------------------
# brute-force oracle

_ORACLE_DIM_CAP = 30


def _dense_blocks(prob):
    return (prob.full_P().toarray(), prob.q, prob.G.toarray(), prob.h,
            prob.A.toarray(), prob.b)


def oracle_solve(prob: QpProblem, eps: float = 1e-9) -> QpSolution:
    """Exhaustive active-set enumeration oracle for desk-scale problems.

    Enumerates subsets S of the inequality rows by increasing cardinality
    (lexicographic within a cardinality), solves the equality-constrained
    KKT system that treats S as active, and returns the first candidate
    satisfying stationarity, primal feasibility, dual feasibility and
    complementarity within ``eps``.  Exponential in m by design; refuses
    n > 30 or m > 30.

    Infeasible problems fall back to an elastic phase-1 solve at large mu
    and come back as SolvedInfeasibleOriginal with violation certificates.
    """
    if prob.n > _ORACLE_DIM_CAP or prob.m > _ORACLE_DIM_CAP:
        raise ValueError("oracle_solve is exponential by design; "
                         f"refusing n or m beyond {_ORACLE_DIM_CAP}")
    t0 = time.perf_counter()
    P, q, G, h, A, b = _dense_blocks(prob)
    n, m, p = prob.n, prob.m, prob.p
    solves = 0

    for card in range(m + 1):
        combos = itertools.combinations(range(m), card)
        while True:
            chunk = list(itertools.islice(combos, 2048))
            if not chunk:
                break
            idx = np.asarray(chunk, dtype=np.int64).reshape(len(chunk), card)
            B = idx.shape[0]
            N = n + card + p
            K = np.zeros((B, N, N))
            K[:, :n, :n] = P
            if card:
                GS = G[idx]
                K[:, :n, n:n + card] = GS.transpose(0, 2, 1)
                K[:, n:n + card, :n] = GS
            if p:
                K[:, :n, n + card:] = A.T
                K[:, n + card:, :n] = A
            rhs = np.empty((B, N))
            rhs[:, :n] = -q
            if card:
                rhs[:, n:n + card] = h[idx]
            if p:
                rhs[:, n + card:] = b
            solves += B
            try:
                sol = np.linalg.solve(K, rhs[..., None])[..., 0]
            except np.linalg.LinAlgError:
                sol = np.full((B, N), np.nan)
                for i in range(B):
                    try:
                        sol[i] = np.linalg.solve(K[i], rhs[i])
                    except np.linalg.LinAlgError:
                        pass
            x = sol[:, :n]
            yS = sol[:, n:n + card]
            yE = sol[:, n + card:]

            ok = np.all(np.isfinite(sol), axis=1)
            stat = x @ P + q + yE @ A
            if card:
                stat += np.einsum("bc,bcn->bn", yS, GS)
            ok &= np.max(np.abs(stat), axis=1, initial=0.0) <= eps
            if m:
                ok &= np.all(x @ G.T <= h + eps, axis=1)
            if p:
                ok &= np.max(np.abs(x @ A.T - b), axis=1, initial=0.0) <= eps
            if card:
                ok &= np.all(yS >= -eps, axis=1)
                act = np.einsum("bcn,bn->bc", GS, x) - h[idx]
                ok &= np.max(np.abs(act), axis=1, initial=0.0) <= eps
            hit = np.flatnonzero(ok)
            if hit.size:
                i = int(hit[0])
                y_I = np.zeros(m)
                if card:
                    y_I[idx[i]] = yS[i]
                xs = x[i]
                z_I = np.maximum(G @ xs - h, 0.0) if m else np.zeros(0)
                z_E = (A @ xs - b) if p else np.zeros(0)
                return QpSolution(
                    x=xs, y_I=y_I, y_E=yE[i].copy(),
                    z_I=z_I, z_E=z_E, status=Status.SOLVED,
                    iterations=solves,
                    solve_time=time.perf_counter() - t0,
                    objective=objective(prob, xs),
                )

    return _oracle_phase1(prob, eps, solves, t0)


def _oracle_phase1(prob, eps, solves, t0):
    """No KKT point found: decide infeasible vs unbounded via an elastic
    solve at large mu (minimizes constraint violation up to the original
    objective's pull, which vanishes as mu grows).  The adaptive policy
    is essential here: penalty duals must travel all the way to mu, and
    the fixed step sizes crawl there."""
    from . import policy as _policy
    from . import solver as _solver

    params = _solver.default_params(prob, mu=1e4)
    settings = _solver.SolveSettings(eps_abs=1e-7, max_iter=200000,
                                     policy=_policy.adaptive())
    sol, _ = _solver.solve(prob, params=params, settings=settings)
    viol = 0.0
    if prob.m:
        viol = max(viol, float(np.max(np.maximum(prob.G @ sol.x - prob.h, 0.0))))
    if prob.p:
        viol = max(viol, float(np.max(np.abs(prob.A @ sol.x - prob.b))))
    status = Status.SOLVED_INFEASIBLE_ORIGINAL if viol > 1e-6 else Status.UNBOUNDED
    return QpSolution(
        x=sol.x, y_I=sol.y_I, y_E=sol.y_E, z_I=sol.z_I, z_E=sol.z_E,
        status=status, iterations=solves,
        solve_time=time.perf_counter() - t0,
        objective=objective(prob, sol.x),
    )
