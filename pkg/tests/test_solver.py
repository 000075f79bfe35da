import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from evcs_ems.solver import ProgramBuilder, QPError, QuadraticProgram, minimize_scalar, solve_qp


def test_active_lower_bound():
    rep = solve_qp(QuadraticProgram(np.array([[2.0]]), np.zeros(1), lb=np.array([3.0])))
    assert rep.ok
    assert rep.x[0] == pytest.approx(3.0, abs=1e-6)
    assert rep.objective == pytest.approx(9.0, abs=1e-5)


def test_equality_symmetry():
    b = ProgramBuilder()
    x = b.var("x", 2)
    b.square({x[0]: 1.0}, -1.0)
    b.square({x[1]: 1.0}, -1.0)
    b.eq({x[0]: 1.0, x[1]: 1.0}, 1.0)
    rep = solve_qp(b.build())
    assert rep.ok
    np.testing.assert_allclose(rep.x, [0.5, 0.5], atol=1e-6)


def test_infeasible_detected():
    qp = QuadraticProgram(np.zeros((1, 1)), np.ones(1), A_in=np.array([[1.0]]),
                          b_in=np.array([-1.0]), lb=np.array([0.0]))
    assert solve_qp(qp).status == "infeasible"


def test_rejects_indefinite():
    with pytest.raises(QPError):
        QuadraticProgram(np.array([[1.0, 0.0], [0.0, -1.0]]), np.zeros(2))


def _random_psd(rng, n, rank=None):
    m = rng.standard_normal((rank or n, n))
    return m.T @ m + 1e-3 * np.eye(n)


def test_box_qp_20_vars_matches_reference():
    """20-variable box QP against a quasi-Newton bound-constrained solve."""
    rng = np.random.default_rng(3)
    for _ in range(5):
        P = _random_psd(rng, 20)
        q = rng.standard_normal(20) * 5
        lb, ub = -rng.uniform(0, 1, 20), rng.uniform(0, 1, 20)
        rep = solve_qp(QuadraticProgram(P, q, lb=lb, ub=ub), eps_abs=1e-9, eps_rel=1e-9)
        ref = minimize(lambda x: 0.5 * x @ P @ x + q @ x, np.zeros(20),
                       jac=lambda x: P @ x + q, bounds=list(zip(lb, ub)), method="L-BFGS-B",
                       options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10000})
        assert rep.ok
        assert rep.objective == pytest.approx(ref.fun, abs=1e-6)


def _active_set_oracle(P, q, G, h):
    """Minimize 0.5x'Px+q'x s.t. Gx<=h by enumerating every active set and
    solving its KKT system; keep the best primal-dual feasible point."""
    n, m = len(q), len(h)
    best = np.inf
    for k in range(0, min(n, m) + 1):
        for act in itertools.combinations(range(m), k):
            A = G[list(act)]
            K = np.block([[P, A.T], [A, np.zeros((k, k))]])
            rhs = np.concatenate([-q, h[list(act)]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.all(G @ x <= h + 1e-9) and np.all(lam >= -1e-9):
                best = min(best, 0.5 * x @ P @ x + q @ x)
    return best


def test_general_qp_against_active_set_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(6):
        n = 6
        P = _random_psd(rng, n)
        q = rng.standard_normal(n) * 3
        G = rng.standard_normal((5, n))
        h = rng.uniform(0.1, 1.0, 5)
        G = np.vstack([G, np.eye(n), -np.eye(n)])
        h = np.concatenate([h, np.ones(n), np.ones(n)])
        rep = solve_qp(QuadraticProgram(P, q, A_in=G, b_in=h), eps_abs=1e-9, eps_rel=1e-9)
        assert rep.ok
        assert rep.objective == pytest.approx(_active_set_oracle(P, q, G, h), abs=1e-6)


def test_polish_lands_on_degenerate_vertex():
    # three constraints meet at (1, 1); the ADMM iterate alone sits off it
    P = np.zeros((2, 2))
    G = np.array([[1.0, 1.0], [1.0, 2.0], [2.0, 1.0]])
    qp = QuadraticProgram(P, np.array([-1.0, -1.0]), A_in=G, b_in=np.array([2.0, 3.0, 3.0]),
                          lb=np.zeros(2))
    rep = solve_qp(qp, eps_abs=1e-3, eps_rel=1e-3)
    assert rep.polished
    np.testing.assert_allclose(rep.x, [1.0, 1.0], atol=1e-9)


def test_deterministic():
    rng = np.random.default_rng(5)
    P, q = _random_psd(rng, 8), rng.standard_normal(8)
    qp = QuadraticProgram(P, q, lb=-np.ones(8), ub=np.ones(8))
    a, b = solve_qp(qp), solve_qp(qp)
    assert a.iterations == b.iterations
    assert np.array_equal(a.x, b.x)


@given(st.floats(0.01, 1000.0))
def test_argmin_invariant_to_objective_scale(scale):
    rng = np.random.default_rng(9)
    P, q = _random_psd(rng, 5), rng.standard_normal(5)
    kw = dict(lb=-0.5 * np.ones(5), ub=0.5 * np.ones(5))
    x1 = solve_qp(QuadraticProgram(P, q, **kw), eps_abs=1e-9, eps_rel=1e-9).x
    x2 = solve_qp(QuadraticProgram(scale * P, scale * q, **kw), eps_abs=1e-9, eps_rel=1e-9).x
    np.testing.assert_allclose(x1, x2, atol=1e-5)


# -- scalar minimizer -------------------------------------------------------

def test_scalar_quadratic():
    x, fx = minimize_scalar(lambda x: (x - 2.0) ** 2, 0.0, 10.0)
    assert x == pytest.approx(2.0, abs=1e-8)
    assert fx == pytest.approx(0.0, abs=1e-15)


def test_breakpoint_always_evaluated():
    seen = []

    def f(x):
        seen.append(x)
        return abs(x - 3.7)
    x, _ = minimize_scalar(f, 0.0, 10.0, breakpoints=(3.7,))
    assert 3.7 in seen
    assert x == pytest.approx(3.7)


def test_non_finite_raises_with_location():
    with pytest.raises(ValueError, match="x="):
        minimize_scalar(lambda x: np.inf if x > 5 else x, 0.0, 10.0)


@given(st.floats(0.0, 10.0), st.floats(0.01, 5.0), st.floats(0.01, 5.0),
       st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_piecewise_quadratic_vs_grid(bp, a1, a2, c1, c2):
    """Convex piecewise quadratic with a kink at ``bp``; compare against a
    10^6-point grid scan."""
    s1 = 2 * a1 * (bp - c1)  # left slope at bp
    s2 = max(s1, 2 * a2 * (bp - c2))

    def f(x):
        if x <= bp:
            return a1 * (x - c1) ** 2 - a1 * (bp - c1) ** 2
        return a2 * (x - bp) ** 2 + s2 * (x - bp)
    x, fx = minimize_scalar(f, 0.0, 10.0, tol=1e-9, breakpoints=(bp,))
    grid = np.linspace(0.0, 10.0, 1_000_001)
    vals = np.where(grid <= bp, a1 * (grid - c1) ** 2 - a1 * (bp - c1) ** 2,
                    a2 * (grid - bp) ** 2 + s2 * (grid - bp))
    xg = grid[np.argmin(vals)]
    assert abs(x - xg) <= 1e-5 + 1e-6
    assert fx <= min(f(0.0), f(10.0), f(bp)) + 1e-12
