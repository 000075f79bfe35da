"""Real-time Stackelberg-game ADMM.

The station (leader) splits the available power ``C + s_L`` among the
connected EVs (followers). The inner loop is a Gauss-Seidel ADMM on the
followers' incentive-adjusted costs with one coupling equality and one
column equality (with slack) per charging column. The outer loop prices
each follower's marginal cost as its incentive and moves the leader slack
``s_L`` by bisection until the mean incentive is within the cap ``D``.

Sign conventions: power is kW, positive into the EV. ``theta`` enters a
follower's cost as ``-theta * p * dj`` so a positive incentive rewards
consumption.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .config import SgAdmmHyper, StationConfig
from .intraday import GridPowerBudget
from .solver import minimize_scalar


class SessionError(ValueError):
    pass


@dataclass
class EvSession:
    id: int
    column: int
    p_req_kw: float
    capacity_kwh: float = 60.0
    # linear C-rate stress curve of the EV battery: 1 + slope*(cr/cr_ref - 1)
    cr_ref_per_h: float = 1.0
    cr_slope: float = 0.5
    arrival_h: float = 0.0
    departure_h: float = math.inf
    p_kw: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        if not self.p_req_kw > 0:
            raise SessionError(f"EV {self.id}: p_req_kw must be positive")
        if self.capacity_kwh <= 0 or self.cr_ref_per_h <= 0 or self.cr_slope < 0:
            raise SessionError(f"EV {self.id}: invalid battery stress parameters")
        if self.stress(self.p_req_kw) <= 0:
            raise SessionError(f"EV {self.id}: stress factor not positive at p_req")
        if self.departure_h < self.arrival_h:
            raise SessionError(f"EV {self.id}: departs before arriving")

    def stress(self, p_kw: float) -> float:
        return 1.0 + self.cr_slope * (p_kw / self.capacity_kwh / self.cr_ref_per_h - 1.0)


# -- objectives ----------------------------------------------------------------

def leader_term(p: float, s: EvSession, alpha: float) -> float:
    return alpha * abs(p - s.p_req_kw) / s.p_req_kw


def leader_objective(powers: Sequence[float], sessions: Sequence[EvSession],
                     alpha: float = 1.0) -> float:
    return float(sum(leader_term(p, s, alpha) for p, s in zip(powers, sessions)))


def follower_objective(p: float, s: EvSession, beta: float, gamma: float) -> float:
    if p <= s.p_req_kw:
        return beta * (s.p_req_kw - p) ** 2
    return gamma * (s.stress(p) / s.stress(s.p_req_kw) - 1.0)


def follower_gradient(p: float, s: EvSession, beta: float, gamma: float) -> float:
    """Derivative of :func:`follower_objective`; 0 at the breakpoint."""
    if p < s.p_req_kw:
        return -2.0 * beta * (s.p_req_kw - p)
    if p > s.p_req_kw:
        return gamma * s.cr_slope / (s.cr_ref_per_h * s.capacity_kwh * s.stress(s.p_req_kw))
    return 0.0


def incentive_cost(p: float, s: EvSession, lam: float, mu_cc: float, theta: float,
                   dj_h: float, eta_cp: float, hyper: SgAdmmHyper) -> float:
    return (leader_term(p, s, hyper.alpha) - lam * p / eta_cp - mu_cc * p
            + follower_objective(p, s, hyper.beta, hyper.gamma) - theta * p * dj_h)


def incentive_update(powers: Sequence[float], sessions: Sequence[EvSession],
                     hyper: SgAdmmHyper) -> np.ndarray:
    return np.array([hyper.delta * follower_gradient(p, s, hyper.beta, hyper.gamma)
                     for p, s in zip(powers, sessions)])


def aggregate_incentive(theta: np.ndarray, mode: str = "mean") -> float:
    if len(theta) == 0:
        return 0.0
    if mode == "mean":
        return float(np.mean(theta))
    return float(theta[int(np.argmax(np.abs(theta)))])


def penalty_update(rho: float, r_norm: float, s_norm: float, hyper: SgAdmmHyper) -> float:
    if r_norm > hyper.mu * s_norm:
        return rho * hyper.tau_rho
    if s_norm > hyper.mu * r_norm:
        return rho / hyper.tau_rho
    return rho


def cc_slack(column_sum: float, p_cc: float, mu: float = 0.0, rho: float = 1.0,
             rule: str = "exact") -> float:
    """Column slack after a follower sweep. ``plain`` is max(0, P_CC - sum);
    ``exact`` minimizes the augmented Lagrangian in the slack, which adds
    the scaled dual mu/rho inside the max."""
    if rule == "plain":
        return max(0.0, p_cc - column_sum)
    return max(0.0, p_cc - column_sum + mu / rho)


# -- problem and state -----------------------------------------------------

@dataclass
class CouplingConstraint:
    c_base_kw: float
    s_min_kw: float = 0.0
    s_max_kw: float = 0.0
    s_leader_kw: float = 0.0
    raw_s_min_kw: float | None = None  # before clamping, for the record
    raw_s_max_kw: float | None = None

    def __post_init__(self) -> None:
        if not self.s_min_kw <= 0.0 <= self.s_max_kw:
            raise SessionError("slack bounds must satisfy s_min <= 0 <= s_max")

    @property
    def c_kw(self) -> float:
        return self.c_base_kw + self.s_leader_kw


@dataclass
class HorizonProblem:
    sessions: list[EvSession]  # Gauss-Seidel order (ascending id)
    coupling: CouplingConstraint
    column_limit_kw: dict[int, float]
    upper_kw: np.ndarray
    eta_cp: float
    dj_h: float
    max_incentive: float

    @property
    def columns(self) -> list[int]:
        return sorted(self.column_limit_kw)

    def column_index(self) -> np.ndarray:
        pos = {c: k for k, c in enumerate(self.columns)}
        return np.array([pos[s.column] for s in self.sessions], dtype=int)


def make_problem(sessions: Sequence[EvSession], c_base_kw: float, s_min_kw: float,
                 s_max_kw: float, cfg: StationConfig, dj_h: float,
                 max_incentive: float = 0.0) -> HorizonProblem:
    """Order the sessions, size the boxes and clamp ``C`` and the slack
    bounds to what the connected EVs can physically absorb."""
    order = sorted(sessions, key=lambda s: s.id)
    ids = [s.id for s in order]
    if len(set(ids)) != len(ids):
        raise SessionError("duplicate session ids")
    for s in order:
        if not 0 <= s.column < cfg.n_columns:
            raise SessionError(f"EV {s.id}: column {s.column} outside 0..{cfg.n_columns - 1}")
    per_col: dict[int, int] = {}
    for s in order:
        per_col[s.column] = per_col.get(s.column, 0) + 1
    for c, count in per_col.items():
        if count > cfg.cps_per_column:
            raise SessionError(f"column {c} has {count} EVs but {cfg.cps_per_column} plugs")
    ub = np.full(len(order), min(cfg.column_power_kw, cfg.cp_power_kw))
    limits = {c: cfg.column_power_kw for c in per_col}
    absorb = sum(min(limits[c], ub[[s.column == c for s in order]].sum()) for c in limits)
    cap = absorb / cfg.eta_cp
    c = float(np.clip(c_base_kw, 0.0, cap))
    s_max = float(min(max(s_max_kw, 0.0), cap - c))
    s_min = float(max(min(s_min_kw, 0.0), -c))
    coupling = CouplingConstraint(c, s_min, s_max, 0.0, float(s_min_kw), float(s_max_kw))
    return HorizonProblem(list(order), coupling, limits, ub, cfg.eta_cp, dj_h,
                          float(max_incentive))


@dataclass
class InnerCheck:
    converged: bool
    r_norm: float
    s_norm: float
    eps_primal: float
    eps_dual: float
    s_norm_aggregate: float = 0.0  # power part summed over EVs


@dataclass
class SgAdmmState:
    p: np.ndarray
    theta: np.ndarray
    lam: float
    mu: np.ndarray  # one per column, in problem.columns order
    s_cc: np.ndarray
    p_cc_aux: np.ndarray
    rho: float
    c_k: float
    t: int = 0
    k: int = -1
    r_hist: list[float] = field(default_factory=list)
    s_hist: list[float] = field(default_factory=list)
    eps_primal_hist: list[float] = field(default_factory=list)
    eps_dual_hist: list[float] = field(default_factory=list)
    s_aggregate_hist: list[float] = field(default_factory=list)

    def copy(self) -> "SgAdmmState":
        return dataclasses.replace(
            self, p=self.p.copy(), theta=self.theta.copy(), mu=self.mu.copy(),
            s_cc=self.s_cc.copy(), p_cc_aux=self.p_cc_aux.copy(),
            r_hist=list(self.r_hist), s_hist=list(self.s_hist),
            eps_primal_hist=list(self.eps_primal_hist), eps_dual_hist=list(self.eps_dual_hist),
            s_aggregate_hist=list(self.s_aggregate_hist))


def initial_state(problem: HorizonProblem, hyper: SgAdmmHyper,
                  theta: np.ndarray | None = None) -> SgAdmmState:
    """Followers start from their own optimum (the requested power)."""
    p = np.minimum([s.p_req_kw for s in problem.sessions], problem.upper_kw).astype(float)
    n_col = len(problem.columns)
    col = problem.column_index()
    limits = np.array([problem.column_limit_kw[c] for c in problem.columns])
    sums = np.bincount(col, weights=p, minlength=n_col) if len(p) else np.zeros(n_col)
    s_cc = np.maximum(0.0, limits - sums)
    th = np.zeros(len(p)) if theta is None else np.asarray(theta, dtype=float).copy()
    return SgAdmmState(p, th, 0.0, np.zeros(n_col), s_cc, sums + s_cc, hyper.rho0,
                       problem.coupling.c_kw)


# -- inner loop ------------------------------------------------------------

def follower_update(state: SgAdmmState, i: int, problem: HorizonProblem,
                    hyper: SgAdmmHyper, col: np.ndarray | None = None,
                    sums: list | None = None) -> float:
    """Gauss-Seidel minimization for follower ``i``; EVs before ``i`` in
    ``state.p`` already hold their iteration-(t+1) values.

    ``sums`` optionally carries ``[total, per-column totals]`` of
    ``state.p`` across a sweep and is kept current.
    """
    col = problem.column_index() if col is None else col
    s = problem.sessions[i]
    c = col[i]
    eta = problem.eta_cp
    p_cc = problem.column_limit_kw[problem.columns[c]]
    old = float(state.p[i])
    if sums is None:
        others = float(state.p.sum()) - old
        col_others = float(state.p[col == c].sum()) - old
    else:
        others = sums[0] - old
        col_others = sums[1][c] - old
    lam, mu_c, theta, rho = state.lam, float(state.mu[c]), float(state.theta[i]), state.rho
    c_k, s_cc, dj = state.c_k, float(state.s_cc[c]), problem.dj_h
    a, b, g = hyper.alpha, hyper.beta, hyper.gamma
    p_req = s.p_req_kw
    sf_req = s.stress(p_req)
    # optional proximal damping; zero at any fixed point of the sweep
    w = hyper.prox_scale * rho * (len(problem.sessions) - 1) / (eta * eta)

    def phi(p: float) -> float:
        if p <= p_req:
            f_hat = b * (p_req - p) ** 2
        else:
            f_hat = g * (s.stress(p) / sf_req - 1.0)
        cpl = (others + p) / eta - c_k
        cc = p + col_others + s_cc - p_cc
        return (a * abs(p - p_req) / p_req - lam * p / eta - mu_c * p + f_hat
                - theta * p * dj + 0.5 * rho * (cpl * cpl + cc * cc)
                + 0.5 * w * (p - old) ** 2)

    hi = float(problem.upper_kw[i])
    if hyper.follower_solver == "brent":
        x, fx = minimize_scalar(phi, 0.0, hi, tol=1e-10, breakpoints=(p_req,))
    else:
        # phi is A*p^2 + B*p + const on either side of p_req
        quad = 0.5 * rho * (1.0 / (eta * eta) + 1.0) + 0.5 * w
        lin = (rho * ((others / eta - c_k) / eta + col_others + s_cc - p_cc)
               - lam / eta - mu_c - theta * dj - w * old)
        left = (quad + b, lin - a / p_req - 2.0 * b * p_req, 0.0, min(p_req, hi))
        right = (quad, lin + a / p_req + g * s.cr_slope
                 / (s.capacity_kwh * s.cr_ref_per_h * sf_req), min(p_req, hi), hi)
        cands = [0.0, hi, min(p_req, hi)]
        for qa, qb, lo_, hi_ in (left, right):
            if hi_ > lo_:
                cands.append(min(max(-qb / (2.0 * qa), lo_), hi_))
        x, fx = min(((c_, phi(c_)) for c_ in cands), key=lambda t: t[1])
    if not math.isfinite(fx):
        raise FloatingPointError(f"follower {s.id}: non-finite cost at p={x}")
    state.p[i] = x
    if sums is not None:
        sums[0] = others + x
        sums[1][c] = col_others + x
    return x


def cc_slack_update(state: SgAdmmState, problem: HorizonProblem, hyper: SgAdmmHyper,
                    col: np.ndarray | None = None) -> np.ndarray:
    col = problem.column_index() if col is None else col
    for k, c in enumerate(problem.columns):
        total = float(state.p[col == k].sum())
        state.s_cc[k] = cc_slack(total, problem.column_limit_kw[c], float(state.mu[k]),
                                 state.rho, hyper.cc_slack_rule)
        state.p_cc_aux[k] = total + state.s_cc[k]
    return state.s_cc


def dual_update(state: SgAdmmState, problem: HorizonProblem) -> tuple[float, np.ndarray]:
    limits = np.array([problem.column_limit_kw[c] for c in problem.columns])
    state.lam = state.lam - state.rho * (state.p.sum() / problem.eta_cp - state.c_k)
    state.mu = state.mu - state.rho * (state.p_cc_aux - limits)
    return state.lam, state.mu


def residuals(state: SgAdmmState, problem: HorizonProblem, p_prev: np.ndarray,
              s_prev: np.ndarray, mode: str = "aggregate") -> tuple[np.ndarray, np.ndarray]:
    limits = np.array([problem.column_limit_kw[c] for c in problem.columns])
    eta = problem.eta_cp
    r = np.concatenate([[state.p.sum() / eta - state.c_k], state.p_cc_aux - limits])
    dp = (state.p - p_prev) / eta
    power = [dp.sum()] if mode == "aggregate" else np.concatenate([[dp.sum()], dp])
    s = state.rho * np.concatenate([power, state.s_cc - s_prev])
    return r, s


def inner_convergence(state: SgAdmmState, problem: HorizonProblem, hyper: SgAdmmHyper,
                      p_prev: np.ndarray, s_prev: np.ndarray) -> InnerCheck:
    r, s = residuals(state, problem, p_prev, s_prev, hyper.dual_residual)
    _, s_agg = residuals(state, problem, p_prev, s_prev, "aggregate")
    r_norm, s_norm = float(np.linalg.norm(r)), float(np.linalg.norm(s))
    eps_p = float(hyper.eps_abs + hyper.eps_rel * max(state.c_k, state.p.sum() / problem.eta_cp))
    eps_d = float(hyper.eps_abs + hyper.eps_rel * abs(state.lam))
    return InnerCheck(r_norm <= eps_p and s_norm <= eps_d, r_norm, s_norm, eps_p, eps_d,
                      float(np.linalg.norm(s_agg)))


def inner_iteration(state: SgAdmmState, problem: HorizonProblem, hyper: SgAdmmHyper,
                    col: np.ndarray | None = None) -> InnerCheck:
    col = problem.column_index() if col is None else col
    p_prev, s_prev = state.p.copy(), state.s_cc.copy()
    sums = [float(state.p.sum()),
            np.bincount(col, weights=state.p, minlength=len(problem.columns)).tolist()]
    for i in range(len(problem.sessions)):
        follower_update(state, i, problem, hyper, col, sums)
    cc_slack_update(state, problem, hyper, col)
    dual_update(state, problem)
    state.t += 1
    chk = inner_convergence(state, problem, hyper, p_prev, s_prev)
    state.r_hist.append(chk.r_norm)
    state.s_hist.append(chk.s_norm)
    state.eps_primal_hist.append(chk.eps_primal)
    state.eps_dual_hist.append(chk.eps_dual)
    state.s_aggregate_hist.append(chk.s_norm_aggregate)
    state.rho = penalty_update(state.rho, chk.r_norm, chk.s_norm, hyper)
    return chk


def inner_loop(state: SgAdmmState, problem: HorizonProblem,
               hyper: SgAdmmHyper) -> tuple[InnerCheck, int]:
    """Run ADMM sweeps until the residual test passes; ``t`` restarts at 0."""
    state.t = 0
    col = problem.column_index()
    chk = InnerCheck(False, math.inf, math.inf, 0.0, 0.0)
    while state.t < hyper.max_inner:
        chk = inner_iteration(state, problem, hyper, col)
        if chk.converged:
            break
    return chk, state.t


def solve_followers(problem: HorizonProblem, theta: np.ndarray, hyper: SgAdmmHyper,
                    c_kw: float | None = None) -> tuple[np.ndarray, InnerCheck, int]:
    """Inner ADMM alone with incentives and ``C + s_L`` frozen."""
    state = initial_state(problem, hyper, theta)
    state.c_k = problem.coupling.c_kw if c_kw is None else c_kw
    chk, iters = inner_loop(state, problem, hyper)
    return state.p.copy(), chk, iters


# -- outer loop ------------------------------------------------------------

def augmented_lagrangian(state: SgAdmmState, problem: HorizonProblem,
                         hyper: SgAdmmHyper) -> float:
    """Leader Lagrangian used by the outer stopping test."""
    col = problem.column_index()
    eta = problem.eta_cp
    limits = np.array([problem.column_limit_kw[c] for c in problem.columns])
    val = 0.0
    for i, s in enumerate(problem.sessions):
        p = state.p[i]
        val += leader_term(p, s, hyper.alpha) - state.lam * p / eta - state.mu[col[i]] * p
    val += state.lam * state.c_k + float(state.mu @ state.s_cc)
    sums = np.bincount(col, weights=state.p, minlength=len(limits)) if len(col) else 0.0
    val += 0.5 * state.rho * (state.p.sum() / eta - state.c_k) ** 2
    val += 0.5 * state.rho * float(np.sum((sums + state.s_cc - limits) ** 2))
    return float(val)


def outer_convergence(l_new: float, l_old: float | None, eps: float) -> bool:
    return l_old is not None and abs(l_new - l_old) <= eps


@dataclass(frozen=True)
class SlackBisection:
    """Leader-slack search state. Distances are measured along the active
    quadrant: ``u = direction * s >= 0``."""

    s: float = 0.0
    direction: int = 0  # +1 searches [0, s_max], -1 searches [s_min, 0]
    near: float = 0.0  # largest u known to give too little slack
    far: float = 0.0  # smallest u known to give enough (or too much)
    far_ok: bool = False  # far end itself acceptable
    acceptable: bool = False  # verdict on the slack just evaluated
    phase: str = "init"  # init, hold, quadrant, bisect, restore, settled, pinned
    flag: str = ""  # "", empty-quadrant, insufficient, no-acceptable


def leader_slack_step(bis: SlackBisection, theta_bar: float, cap: float, s_min: float,
                      s_max: float, tol: float = 1e-3) -> SlackBisection:
    """One outer-iteration update of the leader slack given the aggregate
    incentive ``theta_bar`` the followers returned for ``bis.s``."""
    ok = abs(theta_bar) <= cap * (1.0 + 1e-12)
    rep = dataclasses.replace
    if bis.phase in ("settled", "pinned"):
        return rep(bis, acceptable=ok)
    if bis.direction == 0:
        if ok or theta_bar == 0.0:
            return rep(bis, s=0.0, acceptable=True, phase="hold")
        direction = 1 if theta_bar < 0 else -1
        bound = s_max if direction > 0 else -s_min
        if bound <= tol:
            return rep(bis, s=0.0, direction=direction, acceptable=False, phase="pinned",
                       flag="empty-quadrant")
        return SlackBisection(direction * bound, direction, 0.0, bound, False, False,
                              "quadrant")

    u = bis.direction * bis.s
    short = (theta_bar < 0) == (bis.direction > 0)  # still on the insufficient side
    near, far, far_ok, phase = bis.near, bis.far, bis.far_ok, "bisect"
    if ok:
        far, far_ok = u, True
    elif short:
        near = u
        if u >= far - 1e-12:
            return rep(bis, near=u, acceptable=False, phase="settled", flag="insufficient")
    else:
        far, far_ok, phase = u, False, "restore"
    if far - near <= tol:
        if far_ok:
            return rep(bis, s=bis.direction * far, near=near, far=far, far_ok=True,
                       acceptable=ok, phase="settled")
        return rep(bis, s=bis.direction * far, near=near, far=far, far_ok=False,
                   acceptable=ok, phase="settled", flag="no-acceptable")
    nxt = 0.5 * (near + far)
    return SlackBisection(bis.direction * nxt, bis.direction, near, far, far_ok, ok, phase)


@dataclass
class OuterRecord:
    k: int
    p_kw: list[float]
    theta: list[float]  # incentives applied during this iteration
    s_leader_kw: float
    c_k_kw: float
    lagrangian: float
    inner_converged: bool
    inner_iterations: int
    r_norm: float
    s_norm: float
    eps_primal: float
    eps_dual: float
    theta_response: list[float]  # marginal-cost incentives computed from p_kw
    theta_bar: float
    acceptable: bool
    phase: str
    column_sums_kw: list[float]


@dataclass
class HorizonResult:
    ids: list[int]
    p_kw: np.ndarray
    theta: np.ndarray
    s_leader_kw: float
    coupling: CouplingConstraint
    column_limit_kw: dict[int, float]
    eta_cp: float
    max_incentive: float
    converged: bool
    outer_iterations: int
    records: list[OuterRecord]
    residual_trace: dict[str, list[float]]
    flag: str = ""
    chosen_k: int = -1  # index of the returned record, -1 when there is none

    @property
    def inner_iterations(self) -> list[int]:
        return [r.inner_iterations for r in self.records]

    def coupling_residual(self) -> float:
        return float(self.p_kw.sum() / self.eta_cp - (self.coupling.c_base_kw + self.s_leader_kw))

    def to_dict(self) -> dict[str, Any]:
        return {
            "ids": list(self.ids), "p_kw": self.p_kw.tolist(), "theta": self.theta.tolist(),
            "s_leader_kw": self.s_leader_kw, "c_base_kw": self.coupling.c_base_kw,
            "s_min_kw": self.coupling.s_min_kw, "s_max_kw": self.coupling.s_max_kw,
            "raw_s_min_kw": self.coupling.raw_s_min_kw,
            "raw_s_max_kw": self.coupling.raw_s_max_kw,
            "column_limit_kw": {str(k): v for k, v in self.column_limit_kw.items()},
            "max_incentive": self.max_incentive, "converged": self.converged,
            "outer_iterations": self.outer_iterations, "flag": self.flag,
            "chosen_k": self.chosen_k,
            "records": [dataclasses.asdict(r) for r in self.records],
            "residual_trace": self.residual_trace,
        }


def run_sg_admm(problem: HorizonProblem, hyper: SgAdmmHyper) -> HorizonResult:
    """Two-loop SG-ADMM on a prepared horizon problem."""
    n = len(problem.sessions)
    ids = [s.id for s in problem.sessions]
    cpl = problem.coupling
    if n == 0:
        return HorizonResult(ids, np.zeros(0), np.zeros(0), 0.0, cpl, problem.column_limit_kw,
                             problem.eta_cp, problem.max_incentive, True, 0, [],
                             {"r": [], "s": [], "s_aggregate": [], "eps_primal": [],
                              "eps_dual": []})
    state = initial_state(problem, hyper)
    col = problem.column_index()
    bis = SlackBisection()
    s_leader = 0.0
    records: list[OuterRecord] = []
    l_prev = None
    converged = False
    for k in range(hyper.max_outer):
        state.k = k
        state.c_k = cpl.c_base_kw + s_leader
        chk, iters = inner_loop(state, problem, hyper)
        lag = augmented_lagrangian(state, problem, hyper)
        response = incentive_update(state.p, problem.sessions, hyper)
        theta_bar = aggregate_incentive(response, hyper.incentive_aggregation)
        bis = leader_slack_step(bis, theta_bar, problem.max_incentive, cpl.s_min_kw,
                                cpl.s_max_kw, hyper.slack_tol_kw)
        sums = np.bincount(col, weights=state.p, minlength=len(problem.columns))
        records.append(OuterRecord(
            k, state.p.tolist(), state.theta.tolist(), s_leader, state.c_k, lag,
            chk.converged, iters, chk.r_norm, chk.s_norm, chk.eps_primal, chk.eps_dual,
            response.tolist(), theta_bar, bis.acceptable, bis.phase, sums.tolist()))
        stable = (not hyper.outer_requires_stable_slack
                  or (len(records) >= 2 and records[-2].s_leader_kw == s_leader == bis.s))
        if stable and outer_convergence(lag, l_prev, hyper.eps_outer):
            converged = True
            break
        l_prev = lag
        state.theta = response
        s_leader = bis.s

    if converged:
        chosen = records[-2]
    else:
        feasible = [r for r in records if r.inner_converged]
        chosen = feasible[-1] if feasible else records[-1]
    converged = converged and all(r.inner_converged for r in records[-2:])
    trace = {"r": state.r_hist, "s": state.s_hist, "s_aggregate": state.s_aggregate_hist,
             "eps_primal": state.eps_primal_hist, "eps_dual": state.eps_dual_hist}
    return HorizonResult(ids, np.array(chosen.p_kw), np.array(chosen.theta),
                         chosen.s_leader_kw, cpl, problem.column_limit_kw, problem.eta_cp,
                         problem.max_incentive, converged, len(records), records, trace,
                         bis.flag, chosen.k)


def coupling_base(budget: GridPowerBudget, j: int, pv_prev_kw: float,
                  cfg: StationConfig) -> float:
    """Power available to the EVs at short-term step ``j``: nominal grid
    budget plus the persistence PV measurement, net of the BESS setpoint."""
    return float(budget.p_nominal_kw[j] * cfg.eta_tr - budget.p_bess_ac_kw[j]
                 + pv_prev_kw * cfg.eta_pv)


def slack_bounds(budget: GridPowerBudget, j: int, pv_prev_kw: float,
                 cfg: StationConfig) -> tuple[float, float]:
    s_max = budget.s_plus_kw[j] / cfg.eta_cp + (pv_prev_kw - budget.pv_lo[j]) * cfg.eta_pv
    s_min = -budget.s_minus_kw[j] / cfg.eta_cp + (pv_prev_kw - budget.pv_hi[j]) * cfg.eta_pv
    return float(s_min), float(s_max)


def run_horizon_step(sessions: Sequence[EvSession], budget: GridPowerBudget, j: int,
                     pv_prev_kw: float, cfg: StationConfig) -> HorizonResult:
    c = coupling_base(budget, j, pv_prev_kw, cfg)
    s_min, s_max = slack_bounds(budget, j, pv_prev_kw, cfg)
    problem = make_problem(sessions, c, s_min, s_max, cfg, budget.dj_h, budget.max_incentive)
    return run_sg_admm(problem, cfg.realtime)
