"""Convex QP solver (operator splitting) and a bracketed scalar minimizer.

``solve_qp`` follows the OSQP iteration: the program

    minimize    0.5 x'Px + q'x + offset
    subject to  A_eq x = b_eq,  A_in x <= b_in,  lb <= x <= ub

is stacked into ``l <= A x <= u`` and solved by ADMM on the split
``z = A x`` with Ruiz equilibration, residual-balanced step size and a
final active-set polishing solve. Everything is dense; the programs built
by the day-ahead and intraday layers have a few hundred variables.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

INF = 1e20


class QPError(ValueError):
    pass


@dataclass
class QuadraticProgram:
    P: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    offset: float = 0.0
    names: dict[str, slice] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.q)
        self.q = np.asarray(self.q, dtype=float)
        P = np.asarray(self.P, dtype=float)
        if P.shape != (n, n):
            raise QPError(f"P has shape {P.shape}, expected {(n, n)}")
        P = 0.5 * (P + P.T)
        if n:
            eig_min = np.linalg.eigvalsh(P)[0]
            if eig_min < -1e-9 * max(1.0, np.abs(P).max()):
                raise QPError(f"P is not positive semidefinite (min eigenvalue {eig_min:.3g})")
        self.P = P
        self.A_eq, self.b_eq = _pair(self.A_eq, self.b_eq, n, "eq")
        self.A_in, self.b_in = _pair(self.A_in, self.b_in, n, "in")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise QPError("bound vectors have the wrong length")
        if np.any(self.lb > self.ub):
            raise QPError("lb > ub for some variable")

    @property
    def n(self) -> int:
        return len(self.q)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x + self.offset)

    def violation(self, x: np.ndarray) -> float:
        """Largest constraint violation at ``x`` (0 when feasible)."""
        v = 0.0
        if len(self.b_eq):
            v = max(v, float(np.abs(self.A_eq @ x - self.b_eq).max()))
        if len(self.b_in):
            v = max(v, float(np.maximum(self.A_in @ x - self.b_in, 0.0).max()))
        v = max(v, float(np.maximum(self.lb - x, 0.0).max(initial=0.0)))
        v = max(v, float(np.maximum(x - self.ub, 0.0).max(initial=0.0)))
        return v


def _pair(A, b, n, tag):
    if A is None:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.shape != (len(b), n):
        raise QPError(f"A_{tag} has shape {A.shape}, expected {(len(b), n)}")
    return A, b


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    status: str  # "optimal" | "max-iter" | "infeasible"
    y: np.ndarray | None = None
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class ProgramBuilder:
    """Incremental assembly of a :class:`QuadraticProgram` with named
    variable blocks."""

    def __init__(self) -> None:
        self._blocks: dict[str, slice] = {}
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self.n = 0
        self._eq: list[tuple[dict, float]] = []
        self._in: list[tuple[dict, float]] = []
        self._lin: dict[int, float] = {}
        self._quad: dict[tuple[int, int], float] = {}
        self.offset = 0.0

    def var(self, name: str, size: int, lb=-np.inf, ub=np.inf) -> np.ndarray:
        sl = slice(self.n, self.n + size)
        self._blocks[name] = sl
        self._lb.append(np.broadcast_to(np.asarray(lb, dtype=float), (size,)).copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, dtype=float), (size,)).copy())
        self.n += size
        return np.arange(sl.start, sl.stop)

    def eq(self, terms: dict[int, float], rhs: float) -> None:
        self._eq.append((dict(terms), float(rhs)))

    def le(self, terms: dict[int, float], rhs: float) -> None:
        self._in.append((dict(terms), float(rhs)))

    def ge(self, terms: dict[int, float], rhs: float) -> None:
        self._in.append(({k: -v for k, v in terms.items()}, -float(rhs)))

    def linear(self, idx: int, coef: float) -> None:
        self._lin[idx] = self._lin.get(idx, 0.0) + coef

    def square(self, terms: dict[int, float], const: float = 0.0, weight: float = 1.0) -> None:
        """Add ``weight * (sum_k terms[k] x_k + const)^2`` to the objective."""
        items = list(terms.items())
        for i, ci in items:
            for j, cj in items:
                key = (i, j)
                # 0.5 x'Px convention: P gets 2*weight*ci*cj
                self._quad[key] = self._quad.get(key, 0.0) + 2.0 * weight * ci * cj
            self.linear(i, 2.0 * weight * const * ci)
        self.offset += weight * const * const

    def build(self) -> QuadraticProgram:
        n = self.n
        P = np.zeros((n, n))
        for (i, j), v in self._quad.items():
            P[i, j] += v
        q = np.zeros(n)
        for i, v in self._lin.items():
            q[i] += v

        def rows(items):
            A = np.zeros((len(items), n))
            b = np.zeros(len(items))
            for r, (terms, rhs) in enumerate(items):
                for k, v in terms.items():
                    A[r, k] += v
                b[r] = rhs
            return A, b

        A_eq, b_eq = rows(self._eq)
        A_in, b_in = rows(self._in)
        lb = np.concatenate(self._lb) if self._lb else np.zeros(0)
        ub = np.concatenate(self._ub) if self._ub else np.zeros(0)
        return QuadraticProgram(P, q, A_eq, b_eq, A_in, b_in, lb, ub,
                                offset=self.offset, names=dict(self._blocks))


def _stack(qp: QuadraticProgram):
    n = qp.n
    finite_box = np.isfinite(qp.lb) | np.isfinite(qp.ub)
    box_rows = np.eye(n)[finite_box]
    A = np.vstack([qp.A_eq, qp.A_in, box_rows])
    l = np.concatenate([qp.b_eq, np.full(len(qp.b_in), -INF),
                        np.where(np.isfinite(qp.lb[finite_box]), qp.lb[finite_box], -INF)])
    u = np.concatenate([qp.b_eq, qp.b_in,
                        np.where(np.isfinite(qp.ub[finite_box]), qp.ub[finite_box], INF)])
    return A, l, u


def _ruiz(P, q, A, iters=15):
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(Ps).max(axis=0, initial=0.0), np.abs(As).max(axis=0, initial=0.0))
        d = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        e = 1.0 / np.sqrt(np.clip(np.abs(As).max(axis=1, initial=0.0), 1e-4, 1e4)) if m else np.ones(0)
        Ps = d[:, None] * Ps * d[None, :]
        As = e[:, None] * As * d[None, :]
        qs = d * qs
        D *= d
        E *= e
    scale = max(np.abs(Ps).max(axis=0, initial=0.0).mean(), np.abs(qs).max(initial=0.0), 1e-4)
    c = 1.0 / np.clip(scale, 1e-4, 1e4)
    return Ps * c, qs * c, As, D, E, c


def solve_qp(qp: QuadraticProgram, eps_abs: float = 1e-6, eps_rel: float = 1e-4,
             max_iter: int = 50_000, polish: bool = True, rho: float = 0.1,
             sigma: float = 1e-6, alpha: float = 1.6) -> SolveReport:
    n = qp.n
    A, l, u = _stack(qp)
    m = A.shape[0]
    Ps, qs, As, D, E, c = _ruiz(qp.P, qp.q, A)
    ls = np.where(l > -INF, l * E, -INF)
    us = np.where(u < INF, u * E, INF)
    eq_rows = (u - l) < 1e-12
    inf_rows = (l <= -INF) & (u >= INF)

    def rho_vec(r):
        v = np.full(m, r)
        v[eq_rows] = 1e3 * r
        v[inf_rows] = 1e-6
        return v

    def factor(rv):
        K = Ps + sigma * np.eye(n) + As.T @ (rv[:, None] * As)
        return sla.cho_factor(K, lower=True, check_finite=False)

    rv = rho_vec(rho)
    K = factor(rv)
    x = np.zeros(n)
    z = np.clip(As @ x, ls, us)
    y = np.zeros(m)
    Dinv_scale = 1.0 / c

    status = "max-iter"
    it = 0
    r_prim = r_dual = np.inf
    check_every = 10
    for it in range(1, max_iter + 1):
        rhs = sigma * x - qs + As.T @ (rv * z - y)
        xt = sla.cho_solve(K, rhs, check_finite=False)
        zt = As @ xt
        x_new = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = np.clip(zr + y / rv, ls, us)
        dy = rv * (zr - z_new)
        y_new = y + dy
        x, z, y = x_new, z_new, y_new

        if it % check_every and it != max_iter:
            continue
        # unscaled residuals
        Ax = (As @ x) / E
        zu = z / E
        xu = D * x
        yu = E * y * Dinv_scale
        Px = qp.P @ xu
        Aty = A.T @ yu
        r_prim = float(np.abs(Ax - zu).max(initial=0.0))
        r_dual = float(np.abs(Px + qp.q + Aty).max(initial=0.0))
        eps_p = eps_abs + eps_rel * max(np.abs(Ax).max(initial=0.0), np.abs(zu).max(initial=0.0))
        eps_d = eps_abs + eps_rel * max(np.abs(Px).max(initial=0.0), np.abs(Aty).max(initial=0.0),
                                        np.abs(qp.q).max(initial=0.0))
        if r_prim <= eps_p and r_dual <= eps_d:
            status = "optimal"
            break
        if _primal_infeasible(dy, As, ls, us, eps=1e-7) and it > 200:
            status = "infeasible"
            break
        # residual balancing of rho (scaled quantities)
        if it % 50 == 0:
            sp = r_prim / max(np.abs(Ax).max(initial=0.0), np.abs(zu).max(initial=0.0), 1e-12)
            sd = r_dual / max(np.abs(Px).max(initial=0.0), np.abs(Aty).max(initial=0.0),
                              np.abs(qp.q).max(initial=0.0), 1e-12)
            new_rho = float(np.clip(rho * math.sqrt(max(sp, 1e-12) / max(sd, 1e-12)), 1e-6, 1e6))
            if new_rho > 5 * rho or new_rho < rho / 5:
                rho = new_rho
                rv = rho_vec(rho)
                K = factor(rv)

    xu = D * x
    yu = E * y * Dinv_scale
    report = SolveReport(xu, qp.objective(xu), r_prim, r_dual, it, status, yu)
    if status == "infeasible":
        return report
    if polish:
        pol = _polish(qp, A, l, u, xu, yu, z / E)
        if pol is not None:
            xp, yp = pol
            rp = float(np.abs(np.clip(A @ xp, l, u) - A @ xp).max(initial=0.0))
            rd = float(np.abs(qp.P @ xp + qp.q + A.T @ yp).max(initial=0.0))
            if rp <= max(report.primal_residual, eps_abs) and rd <= max(report.dual_residual, eps_abs):
                report = SolveReport(xp, qp.objective(xp), rp, rd, it, report.status, yp, polished=True)
                if status == "max-iter":
                    eps_p = eps_abs + eps_rel * np.abs(A @ xp).max(initial=0.0)
                    eps_d = eps_abs + eps_rel * max(np.abs(qp.P @ xp).max(initial=0.0),
                                                    np.abs(qp.q).max(initial=0.0))
                    if rp <= eps_p and rd <= eps_d:
                        report.status = "optimal"
    return report


def _primal_infeasible(dy, As, ls, us, eps):
    ndy = np.abs(dy).max(initial=0.0)
    if ndy < 1e-10:
        return False
    if np.abs(As.T @ dy).max(initial=0.0) > eps * ndy:
        return False
    up = np.where(us < INF, us, 0.0) @ np.maximum(dy, 0.0)
    lo = np.where(ls > -INF, ls, 0.0) @ np.minimum(dy, 0.0)
    # rows with infinite bounds must carry no certificate weight
    if np.any((us >= INF) & (dy > eps * ndy)) or np.any((ls <= -INF) & (dy < -eps * ndy)):
        return False
    return up + lo < -eps * ndy


def _polish(qp, A, l, u, x, y, z, rounds: int = 8):
    """Solve the equality-constrained QP on the guessed active set.

    The guess from the ADMM iterate misses rows whose multipliers are
    still near zero (common on degenerate LP vertices); rows the polished
    point violates are added at the violated bound and the system is
    solved again.
    """
    n = qp.n
    low = (z - l < -y) & (l > -INF)
    upp = (u - z < y) & (u < INF)
    delta = 1e-9
    xp = yp = None
    for _ in range(rounds):
        active = low | upp
        A_act = A[active]
        b_act = np.where(low[active], l[active], u[active])
        k = A_act.shape[0]
        KKT = np.block([[qp.P + delta * np.eye(n), A_act.T],
                        [A_act, -delta * np.eye(k)]])
        rhs = np.concatenate([-qp.q, b_act])
        try:
            sol = np.linalg.solve(KKT, rhs)
            # iterative refinement against the unregularized system
            K0 = np.block([[qp.P, A_act.T], [A_act, np.zeros((k, k))]])
            for _ in range(3):
                sol = sol + np.linalg.solve(KKT, rhs - K0 @ sol)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(sol)):
            return None
        xp = sol[:n]
        yp = np.zeros(len(l))
        yp[active] = sol[n:]
        ax = A @ xp
        tol = 1e-9 * (1.0 + np.abs(ax))
        new_low = (ax < l - tol) & ~active
        new_upp = (ax > u + tol) & ~active
        if not (new_low.any() or new_upp.any()):
            break
        low, upp = low | new_low, upp | new_upp
    return xp, yp


# -- scalar minimization ----------------------------------------------------

_CGOLD = 0.3819660112501051


def _brent(f: Callable[[float], float], a: float, b: float, tol: float) -> tuple[float, float]:
    """Bounded Brent minimization (golden section with parabolic steps).

    Stops when the bracket half-width falls under ``tol``, so the returned
    point lies within ``tol`` of the minimizer of a unimodal ``f``.
    """
    x = w = v = a + _CGOLD * (b - a)
    fx = fw = fv = f(x)
    d = e = 0.0
    eps = 1e-12
    for _ in range(500):
        xm = 0.5 * (a + b)
        tol1 = eps * abs(x) + tol / 3.0
        tol2 = 2.0 * tol1
        if abs(x - xm) <= tol2 - 0.5 * (b - a):
            break
        use_golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            etemp = e
            e = d
            if abs(p) < abs(0.5 * q * etemp) and q * (a - x) < p < q * (b - x):
                d = p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = tol1 if xm >= x else -tol1
                use_golden = False
        if use_golden:
            e = (a - x) if x >= xm else (b - x)
            d = _CGOLD * e
        u = x + d if abs(d) >= tol1 else x + (tol1 if d >= 0 else -tol1)
        fu = f(u)
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, fv, w, fw, x, fx = w, fw, x, fx, u, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, fv, w, fw = w, fw, u, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x, fx


def minimize_scalar(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-9,
                    breakpoints: Sequence[float] = ()) -> tuple[float, float]:
    """Minimize ``f`` on ``[lo, hi]``.

    The interval is split at ``breakpoints``; each piece is searched with
    Brent's method and the endpoints and breakpoints are always evaluated,
    so the result is never worse than any of them.
    """
    if not lo < hi:
        if lo == hi:
            return lo, _checked(f, lo)
        raise ValueError(f"empty interval [{lo}, {hi}]")

    def g(x):
        return _checked(f, x)

    knots = [lo] + sorted(b for b in breakpoints if lo < b < hi) + [hi]
    best_x, best_f = lo, g(lo)
    for a, b in zip(knots[:-1], knots[1:]):
        fb = g(b)
        if fb < best_f:
            best_x, best_f = b, fb
        if b - a > tol:
            xm, fm = _brent(g, a, b, tol)
            if fm < best_f:
                best_x, best_f = xm, fm
    return best_x, best_f


def _checked(f, x):
    v = f(x)
    if not math.isfinite(v):
        raise ValueError(f"objective is not finite at x={x!r}: {v!r}")
    return v
