"""Brute-force reference solvers.

Nothing here reuses the QP solver or the ADMM iteration: the centralized
real-time oracle is a lattice search on the coupled followers' problem,
and the day-ahead / intraday oracles enumerate discretized battery powers
(as a dynamic program over the resulting SoC lattice, which visits every
discretized power sequence implicitly).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .assets import throughput_cost_per_kwh
from .config import StationConfig


class OracleError(ValueError):
    pass


# -- centralized followers' problem ----------------------------------------

@dataclass
class OracleProblem:
    """Minimize sum_i cost_i(p_i) s.t. sum p_i / eta_cp = target,
    per-column sums <= column limit, 0 <= p_i <= upper_i.

    ``costs`` are vectorized callables (array in, array out).
    """

    costs: Sequence[Callable[[np.ndarray], np.ndarray]]
    target_kw: float
    eta_cp: float
    columns: Sequence[int]
    column_limit_kw: float | Sequence[float]
    upper_kw: Sequence[float]
    resolution_kw: float = 0.01
    max_points: int = 100_000_000

    def __post_init__(self) -> None:
        if self.resolution_kw <= 0:
            raise OracleError("resolution must be positive")
        if not math.isfinite(self.target_kw):
            raise OracleError("target must be finite")
        if not (len(self.costs) == len(self.columns) == len(self.upper_kw)):
            raise OracleError("costs, columns and upper bounds differ in length")

    def limits(self) -> dict[int, float]:
        cols = sorted(set(self.columns))
        if np.ndim(self.column_limit_kw) == 0:
            return {c: float(self.column_limit_kw) for c in cols}
        return {c: float(self.column_limit_kw[c]) for c in cols}


def _objective_on(problem: OracleProblem, P: np.ndarray) -> np.ndarray:
    """Total cost of candidate rows of ``P`` (shape (k, N)); inf if infeasible."""
    ub = np.asarray(problem.upper_kw, dtype=float)
    tol = 1e-9
    ok = np.all((P >= -tol) & (P <= ub + tol), axis=1)
    cols = np.asarray(problem.columns)
    for c, lim in problem.limits().items():
        ok &= P[:, cols == c].sum(axis=1) <= lim + tol
    val = np.zeros(len(P))
    for i, f in enumerate(problem.costs):
        val += f(np.clip(P[:, i], 0.0, ub[i]))
    return np.where(ok, val, np.inf)


def _complete(problem: OracleProblem, free: np.ndarray) -> np.ndarray:
    """Append the last power so the coupling equality holds exactly."""
    last = problem.target_kw * problem.eta_cp - free.sum(axis=1)
    return np.column_stack([free, last])


def centralized_solve(problem: OracleProblem, exhaustive: bool = False,
                      polish: bool = True, level_points: int = 41) -> np.ndarray:
    """Global lattice minimization of the coupled followers' problem.

    With ``exhaustive=True`` a single full lattice at ``resolution_kw`` is
    scanned (refused above ``max_points``). Otherwise a coarse lattice over
    the whole box locates the basin and successively finer lattices around
    the incumbent bring the pitch down to ``resolution_kw`` and, with
    ``polish``, three decades below it.
    """
    n = len(problem.costs)
    ub = np.asarray(problem.upper_kw, dtype=float)
    total = problem.target_kw * problem.eta_cp
    if total < -1e-9 or total > ub.sum() + 1e-9:
        raise OracleError("coupling target outside the power box")
    if n == 1:
        P = np.array([[total]])
        if not np.isfinite(_objective_on(problem, P)[0]):
            raise OracleError("single-EV problem infeasible")
        return P[0]
    d = n - 1
    h = problem.resolution_kw
    if exhaustive:
        counts = [int(math.floor(ub[i] / h)) + 1 for i in range(d)]
        if math.prod(counts) > problem.max_points:
            raise OracleError(f"lattice of {math.prod(counts):.3g} points exceeds "
                              f"{problem.max_points:.3g}; use a coarser resolution")
        axes = [np.minimum(np.arange(c) * h, ub[i]) for i, c in enumerate(counts)]
        best = _scan(problem, axes)
        if best is None:
            raise OracleError("no feasible lattice point; use a finer resolution")
        return best[0]

    per_dim = max(3, int(min(problem.max_points, 2_000_000) ** (1.0 / d)))
    pitch = max(h, float(ub[:d].max()) / (per_dim - 1))
    best = None
    while best is None:
        axes = [np.linspace(0.0, ub[i], int(round(ub[i] / pitch)) + 1) if ub[i] > 0
                else np.zeros(1) for i in range(d)]
        best = _scan(problem, axes)
        if best is None:
            if pitch <= h * 1e-3:
                raise OracleError("no feasible lattice point found")
            pitch /= 4.0
    x, _ = best
    final = h * 1e-3 if polish else h
    half = (level_points - 1) // 2
    while pitch > final:
        # window of +-2 pitches around the incumbent, 20 sub-steps per pitch
        new_pitch = max(2.0 * pitch / half, final)
        axes = [np.unique(np.clip(x[i] + np.arange(-half, half + 1) * new_pitch, 0.0, ub[i]))
                for i in range(d)]
        cand = _scan(problem, axes)
        if cand is not None and cand[1] <= _objective_on(problem, x[None, :])[0]:
            x = cand[0]
        pitch = new_pitch
    return x


def _scan(problem: OracleProblem, axes: list[np.ndarray]):
    best_val = np.inf
    best_x = None
    # chunk over the first axis to bound memory
    rest = axes[1:]
    grid_rest = (np.array(np.meshgrid(*rest, indexing="ij")).reshape(len(rest), -1).T
                 if rest else np.zeros((1, 0)))
    for v in axes[0]:
        free = np.column_stack([np.full(len(grid_rest), v), grid_rest])
        P = _complete(problem, free)
        vals = _objective_on(problem, P)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val = float(vals[k])
            best_x = P[k]
    if best_x is None or not np.isfinite(best_val):
        return None
    return best_x, best_val


def follower_cost(p_req: float, capacity_kwh: float, cr_ref: float, cr_slope: float,
                  theta: float, dj_h: float, alpha: float, beta: float,
                  gamma: float) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized incentive-adjusted cost of one EV, written out directly
    from its definition: tracking deviation, battery-side cost and the
    incentive credit."""
    sf = lambda x: 1.0 + cr_slope * (x / capacity_kwh / cr_ref - 1.0)  # noqa: E731
    sf_req = sf(p_req)

    def cost(x: np.ndarray) -> np.ndarray:
        below = beta * (p_req - x) ** 2
        above = gamma * (sf(x) / sf_req - 1.0)
        return alpha * np.abs(x - p_req) / p_req + np.where(x <= p_req, below, above) \
            - theta * x * dj_h
    return cost


def realtime_oracle(sessions, theta, target_kw: float, eta_cp: float,
                    column_limit_kw: dict[int, float], upper_kw, dj_h: float, alpha: float,
                    beta: float, gamma: float, resolution_kw: float = 0.01) -> OracleProblem:
    """Centralized problem with incentives and the leader slack frozen.

    ``sessions`` only needs ``p_req_kw``, ``capacity_kwh``, ``cr_ref_per_h``,
    ``cr_slope`` and ``column`` attributes."""
    costs = [follower_cost(s.p_req_kw, s.capacity_kwh, s.cr_ref_per_h, s.cr_slope, float(th),
                           dj_h, alpha, beta, gamma) for s, th in zip(sessions, theta)]
    cols = sorted(column_limit_kw)
    pos = {c: k for k, c in enumerate(cols)}
    return OracleProblem(costs, float(target_kw), eta_cp, [pos[s.column] for s in sessions],
                         [column_limit_kw[c] for c in cols], list(upper_kw), resolution_kw)


# -- day-ahead enumeration ---------------------------------------------------

@dataclass
class EnumerationResult:
    objective: float
    p_bess_batt_kw: np.ndarray
    p_ev_kw: np.ndarray
    p_dp_kw: np.ndarray
    soc_pct: np.ndarray
    extra: dict = field(default_factory=dict)


def _bess_grid(cfg: StationConfig, step_kw: float) -> np.ndarray:
    k = int(math.floor(cfg.bess.p_max_kw / step_kw + 1e-9))
    return np.arange(-k, k + 1) * step_kw


def _ac(p_b: np.ndarray, cfg: StationConfig) -> np.ndarray:
    b = cfg.bess
    return np.where(p_b >= 0, p_b / (b.eta_inv * b.eta_ch), p_b * b.eta_inv * b.eta_dh)


def _soc_lattice(cfg, soc0, energy_step_kwh):
    b = cfg.bess
    e0 = soc0 / 100.0 * b.capacity_kwh
    e_min = b.soc_min_pct / 100.0 * b.capacity_kwh
    e_max = b.soc_max_pct / 100.0 * b.capacity_kwh
    k_lo = int(math.ceil((e_min - e0) / energy_step_kwh - 1e-9))
    k_hi = int(math.floor((e_max - e0) / energy_step_kwh + 1e-9))
    return np.arange(k_lo, k_hi + 1), e0


def _dp(n, ks, e0, step_e, actions, stage_cost, terminal_ok, cfg):
    """Backward DP over SoC lattice indices ``ks``; ``actions`` are lattice
    increments. ``stage_cost(t, soc_start_pct, a_index)`` returns the
    stage cost (inf if infeasible) and the argmin details."""
    cap = cfg.bess.capacity_kwh
    idx = {k: i for i, k in enumerate(ks)}
    V = np.where([terminal_ok(k) for k in ks], 0.0, np.inf)
    policy = []
    for t in reversed(range(n)):
        Vt = np.full(len(ks), np.inf)
        pol = [None] * len(ks)
        for i, k in enumerate(ks):
            soc_start = (e0 + k * step_e) / cap * 100.0
            costs, details = stage_cost(t, soc_start)
            for a_i, a in enumerate(actions):
                j = idx.get(k + a)
                if j is None or not np.isfinite(V[j]) or not np.isfinite(costs[a_i]):
                    continue
                c = costs[a_i] + V[j]
                if c < Vt[i]:
                    Vt[i] = c
                    pol[i] = (a_i, details[a_i])
        V = Vt
        policy.append(pol)
    policy.reverse()
    return V, policy, idx


def enumerate_da(inputs, cfg: StationConfig, resolution_kw: float = 1.0,
                 max_periods: int = 4) -> EnumerationResult:
    """Exhaustive search of the day-ahead program over battery powers on a
    ``resolution_kw`` grid (EV power on the same grid plus its bounds)."""
    n, dt = inputs.n, inputs.dt_h
    if n > max_periods:
        raise OracleError(f"enumeration limited to {max_periods} periods")
    b = cfg.bess
    deg = throughput_cost_per_kwh(b, cfg.stress)
    p_grid = _bess_grid(cfg, resolution_kw)
    p_ac = _ac(p_grid, cfg)
    actions = np.arange(len(p_grid)) - (len(p_grid) - 1) // 2
    step_e = resolution_kw * dt
    ks, e0 = _soc_lattice(cfg, inputs.soc0_pct, step_e)
    k_spec = cfg.day_ahead.speculation_factor * b.capacity_kwh / (100.0 * dt)
    gc = cfg.grid_limit_kw
    r_s = np.maximum(inputs.r_short, 0.0)
    r_l = np.maximum(inputs.r_long, 0.0)

    def stage_cost(t, soc_start):
        ev_max = float(inputs.ev_lo[t])
        ev = np.unique(np.concatenate([np.arange(0.0, ev_max, resolution_kw), [ev_max]]))
        load = ev[None, :] / cfg.eta_cp + p_ac[:, None]  # (actions, ev)
        ok = (load <= inputs.pv_lo[t] * cfg.eta_pv + gc * cfg.eta_tr + 1e-9)
        ok &= (load >= inputs.pv_hi[t] * cfg.eta_pv - gc * cfg.eta_tr - 1e-9)
        pg = (load - inputs.pv_med[t] * cfg.eta_pv) / cfg.eta_tr
        lo = max(-gc, k_spec * (b.soc_min_pct - soc_start) - inputs.pv_med[t] * cfg.eta_pv)
        hi = min(gc, k_spec * (b.soc_max_pct - soc_start) + inputs.ev_med[t] / cfg.eta_cp)
        if lo > hi + 1e-9:
            return np.full(len(p_grid), np.inf), [None] * len(p_grid)
        best = np.full(pg.shape, np.inf)
        best_dp = np.zeros(pg.shape)
        for dp in (np.full(pg.shape, lo), np.full(pg.shape, hi), np.clip(pg, lo, hi)):
            c = (inputs.dam_price[t] * dp + r_s[t] * np.maximum(pg - dp, 0.0)
                 + r_l[t] * np.maximum(dp - pg, 0.0))
            better = c < best
            best = np.where(better, c, best)
            best_dp = np.where(better, dp, best_dp)
        total = dt * (best - inputs.tariff[t] * ev[None, :] + deg * np.abs(p_grid)[:, None])
        total = np.where(ok, total, np.inf)
        j = np.argmin(total, axis=1)
        rows = np.arange(len(p_grid))
        details = [(p_grid[a], ev[j[a]], best_dp[a, j[a]]) for a in rows]
        return total[rows, j], details

    k0 = 0
    terminal_ok = ((lambda k: k >= k0) if cfg.day_ahead.terminal_soc_at_least_initial
                   else (lambda k: True))
    V, policy, idx = _dp(n, ks, e0, step_e, actions, stage_cost, terminal_ok, cfg)
    i0 = idx.get(0)
    if i0 is None or not np.isfinite(V[i0]):
        raise OracleError("day-ahead toy infeasible on the lattice")
    pb, pev, pdp, soc = [], [], [], [inputs.soc0_pct]
    k = 0
    for t in range(n):
        a_i, (p, e, d) = policy[t][idx[k]]
        pb.append(p)
        pev.append(e)
        pdp.append(d)
        k += actions[a_i]
        soc.append((e0 + k * step_e) / b.capacity_kwh * 100.0)
    return EnumerationResult(float(V[i0]), np.array(pb), np.array(pev), np.array(pdp),
                             np.array(soc))


# -- intraday enumeration ----------------------------------------------------

def _best_slacks(a_p, b_p, a_m, b_m, lower_sum, n_u=801):
    """min (s+ + s-) + (s+ - s-)^2 over boxes s+ in [a_p, b_p], s- in [a_m, b_m]
    with s+ + s- >= lower_sum. Vectorized over leading dims; returns value
    and the (s+, s-) argmin. Exact in v = s+ - s- for each lattice value of
    u = s+ + s-."""
    u_lo = np.maximum(a_p + a_m, lower_sum)
    u_hi = b_p + b_m
    frac = np.linspace(0.0, 1.0, n_u)
    u = u_lo[..., None] + (u_hi - u_lo)[..., None] * frac
    v_lo = np.maximum(2 * a_p[..., None] - u, u - 2 * b_m[..., None])
    v_hi = np.minimum(2 * b_p[..., None] - u, u - 2 * a_m[..., None])
    v = np.clip(0.0, v_lo, v_hi)
    feas = (v_lo <= v_hi + 1e-9) & (u_hi >= u_lo - 1e-9)[..., None]
    g = np.where(feas, u + v * v, np.inf)
    j = np.argmin(g, axis=-1)
    val = np.take_along_axis(g, j[..., None], axis=-1)[..., 0]
    uu = np.take_along_axis(u, j[..., None], axis=-1)[..., 0]
    vv = np.take_along_axis(v, j[..., None], axis=-1)[..., 0]
    return val, 0.5 * (uu + vv), 0.5 * (uu - vv)


def enumerate_id(inputs, cfg: StationConfig, resolution_kw: float = 1.0,
                 ev_resolution_kw: float = 0.5, max_steps: int = 6) -> EnumerationResult:
    """Exhaustive search of the intraday program for windows whose step
    equals the balancing period (so imbalance is settled per step)."""
    n, dt = inputs.n, inputs.dt_h
    if n > max_steps:
        raise OracleError(f"enumeration limited to {max_steps} steps")
    if inputs.steps_per_period != 1:
        raise OracleError("intraday enumeration needs one step per balancing period")
    b = cfg.bess
    st = cfg.intraday
    deg = throughput_cost_per_kwh(b, cfg.stress)
    p_grid = _bess_grid(cfg, resolution_kw)
    p_ac = _ac(p_grid, cfg)
    actions = np.arange(len(p_grid)) - (len(p_grid) - 1) // 2
    step_e = resolution_kw * dt
    ks, e0 = _soc_lattice(cfg, inputs.soc0_pct, step_e)
    gc = cfg.grid_limit_kw
    eta_cp, eta_pv, eta_tr = cfg.eta_cp, cfg.eta_pv, cfg.eta_tr

    stage_cache = []
    for t in range(n):
        pmax, phat = float(inputs.ev_max[t]), float(inputs.ev_exp[t])
        ev = np.unique(np.concatenate([np.arange(0.0, pmax, ev_resolution_kw), [phat, pmax]]))
        PB, EV = np.meshgrid(p_ac, ev, indexing="ij")
        a_p = np.maximum(phat - EV, 0.0)
        b_p = np.minimum(pmax - EV,
                         eta_cp * (gc * eta_tr - PB + inputs.pv_lo[t] * eta_pv) - EV)
        a_m = np.maximum(EV - phat, 0.0)
        b_m = np.minimum(EV, EV + eta_cp * (gc * eta_tr + PB - inputs.pv_hi[t] * eta_pv))
        d_pv = (inputs.pv_hi[t] - inputs.pv_lo[t]) * eta_pv
        lower = eta_cp * (st.flexibility_ratio * (EV / eta_cp - inputs.pv_med[t] * eta_pv) - d_pv)
        g, sp, sm = _best_slacks(a_p, b_p, a_m, b_m, lower)
        pg = (EV / eta_cp + PB - inputs.pv_med[t] * eta_pv) / eta_tr
        e = (pg - inputs.p_dp_kw[t]) * dt
        imb = inputs.r_short[t] * np.maximum(e, 0.0) + inputs.r_long[t] * np.maximum(-e, 0.0)
        cost = (imb + st.slack_weight * g + deg * np.abs(p_grid)[:, None] * dt
                - EV * dt * inputs.tariff[t])
        j = np.argmin(cost, axis=1)
        rows = np.arange(len(p_grid))
        stage_cache.append((cost[rows, j], [(p_grid[a], ev[j[a]], sp[a, j[a]], sm[a, j[a]])
                                            for a in rows]))

    cap = b.capacity_kwh
    c_w = st.soc_tracking_weight
    first_end = inputs.steps_per_period - 1

    def stage_cost(t, soc_start):
        base, details = stage_cache[t]
        if t in (first_end, n - 1):
            soc_end = soc_start + 100.0 * p_grid * dt / cap
            extra = np.zeros(len(p_grid))
            if t == first_end:
                extra += c_w * (soc_end - inputs.soc_dp_first_pct) ** 2
            if t == n - 1:
                extra += c_w * (soc_end - inputs.soc_dp_end_pct) ** 2
            return base + extra, details
        return base, details

    V, policy, idx = _dp(n, ks, e0, step_e, actions, stage_cost, lambda k: True, cfg)
    i0 = idx.get(0)
    if i0 is None or not np.isfinite(V[i0]):
        raise OracleError("intraday toy infeasible on the lattice")
    pb, pev, sps, sms, soc = [], [], [], [], [inputs.soc0_pct]
    k = 0
    for t in range(n):
        a_i, (p, e, sp_, sm_) = policy[t][idx[k]]
        pb.append(p)
        pev.append(e)
        sps.append(sp_)
        sms.append(sm_)
        k += actions[a_i]
        soc.append((e0 + k * step_e) / cap * 100.0)
    return EnumerationResult(float(V[i0]), np.array(pb), np.array(pev), np.zeros(n),
                             np.array(soc), {"s_plus": np.array(sps), "s_minus": np.array(sms)})

