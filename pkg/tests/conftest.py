import numpy as np
import pytest
from scipy import sparse

from flexqp import qp_core

# one line per acceptance criterion, echoed after the test summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_feasible_qp(seed, n=12, m=9, p=4, name=""):
    """Bounded random QP with a certified strict interior point.

    P = M'M + I keeps the Hessian comfortably positive definite, h is
    lifted above G @ x0 so x0 is strictly feasible for the inequalities
    and exactly feasible for the equalities.
    """
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    P = sparse.csc_array(np.triu(M.T @ M + np.eye(n)))
    q = rng.normal(size=n)
    G = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    h = G @ x0 + rng.uniform(0.5, 1.5, size=m)
    A = rng.normal(size=(p, n))
    b = A @ x0
    return qp_core.QpProblem(
        n=n, m=m, p=p, P=P, q=q, G=sparse.csc_array(G), h=h,
        A=sparse.csc_array(A), b=b, name=name or f"feasible-{seed}")


def contradictory_qp():
    """Scalar QP with x <= -1 and x >= 1: infeasible by construction.

    The elastic optimum is x = 0 (the l1 slopes cancel on [-1, 1] and
    the quadratic picks the center) with both penalty duals pinned at mu.
    """
    return qp_core.QpProblem(
        n=1, m=2, p=0,
        P=sparse.csc_array(np.array([[1.0]])), q=np.zeros(1),
        G=sparse.csc_array(np.array([[1.0], [-1.0]])),
        h=np.array([-1.0, -1.0]),
        A=sparse.csc_array(np.zeros((0, 1))), b=np.zeros(0),
        name="contradictory")


def tiny_qp():
    """Two-variable QP with a hand-checkable unconstrained optimum.

    min 0.5 (2 x0^2 + 2 x0 x1 + 3 x1^2) + x0 - 2 x1, no constraints
    binding at the optimum: grad = [2 x0 + x1 + 1, x0 + 3 x1 - 2] = 0
    gives x* = (-1, 1).
    """
    P = sparse.csc_array(np.array([[2.0, 1.0], [0.0, 3.0]]))
    q = np.array([1.0, -2.0])
    G = sparse.csc_array(np.array([[1.0, 0.0], [0.0, 1.0]]))
    h = np.array([10.0, 10.0])
    A = sparse.csc_array(np.zeros((0, 2)))
    return qp_core.QpProblem(n=2, m=2, p=0, P=P, q=q, G=G, h=h, A=A,
                             b=np.zeros(0), name="tiny"), np.array([-1.0, 1.0])


@pytest.fixture
def qp_factory():
    return random_feasible_qp
