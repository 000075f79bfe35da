"""Intraday schedule refinement and the grid power budget.

Once per balancing period a window of ``window_periods`` periods is
re-optimized at the intraday step. The result fixes the BESS schedule and
the EV power band; the budget handed to the real-time layer is that band
mapped through the station power balance, optionally resampled on the
short-term PV quantiles.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .assets import throughput_cost_per_kwh
from .config import StationConfig
from .dayahead import InputError, SolveError, check_quantiles
from .solver import ProgramBuilder, QuadraticProgram, SolveReport, solve_qp


@dataclass(frozen=True)
class Window:
    """Half-open range of day-ahead periods ``[start, stop)``."""

    start: int
    stop: int

    @property
    def empty(self) -> bool:
        return self.stop <= self.start

    def __len__(self) -> int:
        return max(0, self.stop - self.start)


def shrink_horizon(window: Window, day_end: int) -> Window:
    """Clamp the window to the operating day; an empty window means there
    is nothing left to refine."""
    if window.start >= day_end:
        return Window(window.start, window.start)
    return Window(window.start, min(window.stop, day_end))


@dataclass
class IntradayInputs:
    dt_h: float  # intraday step
    steps_per_period: int  # balancing period / intraday step
    ev_max: np.ndarray  # booking maximum, per step
    ev_exp: np.ndarray  # expected demand, per step
    pv_lo: np.ndarray
    pv_med: np.ndarray
    pv_hi: np.ndarray
    r_short: np.ndarray  # per period, signed
    r_long: np.ndarray
    tariff: np.ndarray  # per step
    p_dp_kw: np.ndarray  # dispatch plan, per period
    soc0_pct: float
    soc_dp_first_pct: float  # planned SoC at the end of the first period
    soc_dp_end_pct: float  # planned SoC at the end of the window
    p_ev_dp_kw: np.ndarray | None = None  # planned EV power, per period

    def __post_init__(self) -> None:
        n = len(np.asarray(self.ev_max))
        if n == 0:
            raise InputError("intraday window is empty")
        if self.dt_h <= 0 or self.steps_per_period < 1:
            raise InputError("dt_h must be positive and steps_per_period >= 1")
        if n % self.steps_per_period:
            raise InputError("window must cover whole balancing periods")
        m = n // self.steps_per_period
        for name, size in (("ev_max", n), ("ev_exp", n), ("pv_lo", n), ("pv_med", n),
                           ("pv_hi", n), ("tariff", n), ("r_short", m), ("r_long", m),
                           ("p_dp_kw", m)):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (size,):
                raise InputError(f"{name} has length {arr.size}, expected {size}")
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} contains non-finite values")
            setattr(self, name, arr)
        if self.p_ev_dp_kw is None:
            self.p_ev_dp_kw = np.zeros(m)
        self.p_ev_dp_kw = np.asarray(self.p_ev_dp_kw, dtype=float)
        check_quantiles(self.pv_lo, self.pv_med, self.pv_hi, "intraday PV forecast")
        bad = np.flatnonzero((self.ev_exp > self.ev_max + 1e-9) | (self.ev_exp < 0))
        if bad.size:
            k = int(bad[0])
            raise InputError(f"expected EV demand outside [0, booking max] at step {k}")
        neg = np.flatnonzero(self.r_short + self.r_long < 0)
        if neg.size:
            raise InputError(f"r_short + r_long < 0 at period {int(neg[0])}: "
                             "the deviation energies would be unbounded")

    @property
    def n(self) -> int:
        return len(self.ev_max)

    @property
    def n_periods(self) -> int:
        return self.n // self.steps_per_period

    @property
    def period_h(self) -> float:
        return self.dt_h * self.steps_per_period


@dataclass
class RefinementResult:
    inputs: IntradayInputs = field(repr=False)
    p_bess_batt_kw: np.ndarray
    p_bess_ac_kw: np.ndarray
    p_ev_kw: np.ndarray
    s_plus_kw: np.ndarray
    s_minus_kw: np.ndarray
    p_grid_mean_kw: np.ndarray  # expected grid power at the median PV
    p_grid_lo_kw: np.ndarray
    p_grid_hi_kw: np.ndarray
    e_plus_kwh: np.ndarray  # per period
    e_minus_kwh: np.ndarray
    soc_pct: np.ndarray  # n+1 boundaries
    objective: float
    costs: dict[str, float]
    report: SolveReport = field(repr=False)

    def to_dict(self) -> dict[str, Any]:
        out = {k: getattr(self, k).tolist() for k in (
            "p_bess_batt_kw", "p_bess_ac_kw", "p_ev_kw", "s_plus_kw", "s_minus_kw",
            "p_grid_mean_kw", "p_grid_lo_kw", "p_grid_hi_kw", "e_plus_kwh", "e_minus_kwh",
            "soc_pct")}
        inp = self.inputs
        out["inputs"] = {k: getattr(inp, k).tolist() for k in (
            "ev_max", "ev_exp", "pv_lo", "pv_med", "pv_hi")}
        out.update(objective=self.objective, costs=dict(self.costs),
                   solver={"status": self.report.status, "iterations": self.report.iterations})
        return out


class FlexibilityInfeasible(SolveError):
    def __init__(self, message: str, step: int | None, report: SolveReport | None = None):
        super().__init__(message, report)
        self.step = step


def budget_bounds(p_ev, s_minus, s_plus, p_bess_ac, pv_lo, pv_hi, cfg: StationConfig):
    """Grid power interval of the station for a given EV band, BESS AC
    power and PV quantiles. Works element-wise on arrays."""
    p_ev, s_minus, s_plus, p_b = (np.asarray(a, dtype=float)
                                  for a in (p_ev, s_minus, s_plus, p_bess_ac))
    lo = (p_b + (p_ev - s_minus) / cfg.eta_cp - np.asarray(pv_hi) * cfg.eta_pv) / cfg.eta_tr
    hi = (p_b + (p_ev + s_plus) / cfg.eta_cp - np.asarray(pv_lo) * cfg.eta_pv) / cfg.eta_tr
    return lo, hi


def build_id_program(inputs: IntradayInputs, cfg: StationConfig,
                     flexibility_ratio: float | None = None) -> QuadraticProgram:
    n, dt, m = inputs.n, inputs.dt_h, inputs.steps_per_period
    bess, st = cfg.bess, cfg.intraday
    tau = st.flexibility_ratio if flexibility_ratio is None else flexibility_ratio
    a_ch = 1.0 / (bess.eta_inv * bess.eta_ch)
    a_dh = bess.eta_inv * bess.eta_dh
    deg = throughput_cost_per_kwh(bess, cfg.stress)
    gc = cfg.grid_limit_kw
    eta_cp, eta_pv, eta_tr = cfg.eta_cp, cfg.eta_pv, cfg.eta_tr
    cap = bess.capacity_kwh

    b = ProgramBuilder()
    p_ch = b.var("p_ch", n, 0.0, bess.p_max_kw)
    p_dh = b.var("p_dh", n, 0.0, bess.p_max_kw)
    p_ev = b.var("p_ev", n, 0.0, inputs.ev_max)
    s_p = b.var("s_plus", n, 0.0)
    s_m = b.var("s_minus", n, 0.0)
    soc = b.var("soc", n, bess.soc_min_pct, bess.soc_max_pct)
    e_p = b.var("e_plus", inputs.n_periods, 0.0)
    e_m = b.var("e_minus", inputs.n_periods, 0.0)

    for t in range(n):
        pb = {p_ch[t]: a_ch, p_dh[t]: -a_dh}
        # band chain 0 <= P_EV - s- <= P_exp <= P_EV + s+ <= P_max
        b.ge({p_ev[t]: 1.0, s_m[t]: -1.0}, 0.0)
        b.le({p_ev[t]: 1.0, s_m[t]: -1.0}, inputs.ev_exp[t])
        b.ge({p_ev[t]: 1.0, s_p[t]: 1.0}, inputs.ev_exp[t])
        b.le({p_ev[t]: 1.0, s_p[t]: 1.0}, inputs.ev_max[t])
        # budget inside the grid connection
        b.le({**pb, p_ev[t]: 1.0 / eta_cp, s_p[t]: 1.0 / eta_cp},
             gc * eta_tr + inputs.pv_lo[t] * eta_pv)
        b.ge({**pb, p_ev[t]: 1.0 / eta_cp, s_m[t]: -1.0 / eta_cp},
             -gc * eta_tr + inputs.pv_hi[t] * eta_pv)
        # flexibility width: (s+ + s-)/eta_cp + dPV*eta_pv >= tau*(P_G*eta_tr - P_B)
        d_pv = (inputs.pv_hi[t] - inputs.pv_lo[t]) * eta_pv
        b.ge({s_p[t]: 1.0 / eta_cp, s_m[t]: 1.0 / eta_cp, p_ev[t]: -tau / eta_cp},
             -tau * inputs.pv_med[t] * eta_pv - d_pv)
        terms = {soc[t]: 1.0, p_ch[t]: -100.0 * dt / cap, p_dh[t]: 100.0 * dt / cap}
        if t == 0:
            b.eq(terms, inputs.soc0_pct)
        else:
            terms[soc[t - 1]] = -1.0
            b.eq(terms, 0.0)
        b.linear(s_p[t], st.slack_weight)
        b.linear(s_m[t], st.slack_weight)
        b.square({s_p[t]: 1.0, s_m[t]: -1.0}, weight=st.slack_weight)
        b.linear(p_ch[t], deg * dt)
        b.linear(p_dh[t], deg * dt)
        b.linear(p_ev[t], -dt * inputs.tariff[t])

    for k in range(inputs.n_periods):
        # sum_t P_G dt - E+ + E- = P_dp * dT
        row = {e_p[k]: -1.0, e_m[k]: 1.0}
        pv = 0.0
        for t in range(k * m, (k + 1) * m):
            for idx, coef in ((p_ev[t], 1.0 / eta_cp), (p_ch[t], a_ch), (p_dh[t], -a_dh)):
                row[idx] = row.get(idx, 0.0) + coef * dt / eta_tr
            pv += inputs.pv_med[t] * eta_pv * dt / eta_tr
        b.eq(row, inputs.p_dp_kw[k] * inputs.period_h + pv)
        b.linear(e_p[k], inputs.r_short[k])
        b.linear(e_m[k], inputs.r_long[k])

    b.square({soc[m - 1]: 1.0}, -inputs.soc_dp_first_pct, st.soc_tracking_weight)
    b.square({soc[n - 1]: 1.0}, -inputs.soc_dp_end_pct, st.soc_tracking_weight)
    return b.build()


def _locate_infeasible_step(inputs: IntradayInputs, cfg: StationConfig) -> int | None:
    """First step whose own constraints (ignoring SoC coupling) cannot hold
    together with the flexibility width; None if every step is fine alone."""
    bess = cfg.bess
    p_ac_lo = -bess.p_max_kw * bess.eta_inv * bess.eta_dh
    p_ac_hi = bess.p_max_kw / (bess.eta_inv * bess.eta_ch)
    tau = cfg.intraday.flexibility_ratio
    eta_cp, eta_pv, eta_tr, gc = cfg.eta_cp, cfg.eta_pv, cfg.eta_tr, cfg.grid_limit_kw
    for t in range(inputs.n):
        pmax, phat = inputs.ev_max[t], inputs.ev_exp[t]
        d_pv = (inputs.pv_hi[t] - inputs.pv_lo[t]) * eta_pv
        ok = False
        # the constraints are linear; scanning P_EV and P_B on a fine lattice
        # with the widest admissible band is enough to localize the culprit
        for ev in np.linspace(0.0, pmax, 201):
            for pb in np.linspace(p_ac_lo, p_ac_hi, 41):
                sp_hi = min(pmax - ev, eta_cp * (gc * eta_tr + inputs.pv_lo[t] * eta_pv - pb) - ev)
                sm_hi = min(ev, ev + eta_cp * (gc * eta_tr + pb - inputs.pv_hi[t] * eta_pv))
                if sp_hi < max(phat - ev, 0.0) - 1e-9 or sm_hi < max(ev - phat, 0.0) - 1e-9:
                    continue
                width = (sp_hi + sm_hi) / eta_cp + d_pv
                if width >= tau * (ev / eta_cp - inputs.pv_med[t] * eta_pv) - 1e-9:
                    ok = True
                    break
            if ok:
                break
        if not ok:
            return t
    return None


def refine_window(inputs: IntradayInputs, cfg: StationConfig) -> RefinementResult:
    qp = build_id_program(inputs, cfg)
    s = cfg.solver
    rep = solve_qp(qp, s.eps_abs, s.eps_rel, s.max_iter)
    if rep.status == "infeasible":
        step = _locate_infeasible_step(inputs, cfg)
        where = f" (binding at step {step})" if step is not None else ""
        raise FlexibilityInfeasible(
            f"intraday program infeasible{where}; flexibility_ratio="
            f"{cfg.intraday.flexibility_ratio:g}", step, rep)
    if not rep.ok:
        raise SolveError(f"intraday program not solved: {rep.status}", rep)
    x, N = rep.x, qp.names
    bess = cfg.bess
    dt = inputs.dt_h
    p_ch = np.clip(x[N["p_ch"]], 0.0, None)
    p_dh = np.clip(x[N["p_dh"]], 0.0, None)
    p_b = p_ch - p_dh
    p_ac = p_ch / (bess.eta_inv * bess.eta_ch) - p_dh * bess.eta_inv * bess.eta_dh
    p_ev = x[N["p_ev"]]
    s_p = np.clip(x[N["s_plus"]], 0.0, None)
    s_m = np.clip(x[N["s_minus"]], 0.0, None)
    p_g = (p_ev / cfg.eta_cp + p_ac - inputs.pv_med * cfg.eta_pv) / cfg.eta_tr
    lo, hi = budget_bounds(p_ev, s_m, s_p, p_ac, inputs.pv_lo, inputs.pv_hi, cfg)
    e_p = np.clip(x[N["e_plus"]], 0.0, None)
    e_m = np.clip(x[N["e_minus"]], 0.0, None)
    soc = np.concatenate([[inputs.soc0_pct], x[N["soc"]]])
    st = cfg.intraday
    m = inputs.steps_per_period
    costs = {
        "imbalance": float(e_p @ inputs.r_short + e_m @ inputs.r_long),
        "slack": float(st.slack_weight * np.sum(s_p + s_m + (s_p - s_m) ** 2)),
        "degradation_linear": float(throughput_cost_per_kwh(bess, cfg.stress)
                                    * np.sum(np.abs(p_b)) * dt),
        "soc_tracking": float(st.soc_tracking_weight
                              * ((soc[m] - inputs.soc_dp_first_pct) ** 2
                                 + (soc[-1] - inputs.soc_dp_end_pct) ** 2)),
        "ev_revenue": float(np.sum(p_ev * inputs.tariff) * dt),
    }
    return RefinementResult(inputs, p_b, p_ac, p_ev, s_p, s_m, p_g, lo, hi, e_p, e_m, soc,
                            rep.objective, costs, rep)


def grid_power_budget(result: RefinementResult, cfg: StationConfig):
    """Per-step ``(lower, upper)`` grid power at the intraday resolution."""
    inp = result.inputs
    return budget_bounds(result.p_ev_kw, result.s_minus_kw, result.s_plus_kw,
                         result.p_bess_ac_kw, inp.pv_lo, inp.pv_hi, cfg)


def incentive_cap(ev_energy_kwh: float, p_ev_dp_kw: float, period_h: float, tariff: float,
                  e_plus_kwh: float, e_minus_kwh: float, r_short: float, r_long: float,
                  a: float) -> float:
    """Maximum incentive per unit of power over one balancing period."""
    floor = a * tariff
    if ev_energy_kwh <= 1e-12:
        return floor
    extra_revenue = (ev_energy_kwh - p_ev_dp_kw * period_h) * tariff
    bm_cost = e_plus_kwh * r_short + e_minus_kwh * r_long
    return max(floor, (extra_revenue - bm_cost) / (ev_energy_kwh / period_h))


def max_incentive(result: RefinementResult, p_ev_dp_kw: float, tariff: float,
                  a: float) -> float:
    """Cap D for the first (short-term) period of the window."""
    inp = result.inputs
    m = inp.steps_per_period
    return incentive_cap(float(np.sum(result.p_ev_kw[:m]) * inp.dt_h), p_ev_dp_kw,
                         inp.period_h, tariff, float(result.e_plus_kwh[0]),
                         float(result.e_minus_kwh[0]), float(inp.r_short[0]),
                         float(inp.r_long[0]), a)


@dataclass
class GridPowerBudget:
    """Real-time inputs for one balancing period at the short-term step."""

    dj_h: float
    p_lo_kw: np.ndarray  # upsampled interval per short-term step
    p_hi_kw: np.ndarray
    p_nominal_kw: np.ndarray  # at the short-term median PV
    p_bess_ac_kw: np.ndarray  # zero-order hold of the intraday setpoint
    p_ev_kw: np.ndarray
    s_plus_kw: np.ndarray
    s_minus_kw: np.ndarray
    pv_lo: np.ndarray
    pv_med: np.ndarray
    pv_hi: np.ndarray
    max_incentive: float
    long_lo_kw: np.ndarray = field(default_factory=lambda: np.zeros(0))
    long_hi_kw: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.p_lo_kw)

    def to_dict(self) -> dict[str, Any]:
        out = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
               for k, v in self.__dict__.items()}
        return out


def upsample_short_term(result: RefinementResult, pv_lo_j, pv_med_j, pv_hi_j,
                        cfg: StationConfig, max_incentive_value: float = 0.0) -> GridPowerBudget:
    """Resample the first balancing period of ``result`` on the short-term
    PV quantiles. The number of short-term steps per intraday step is
    inferred from the quantile length."""
    inp = result.inputs
    m = inp.steps_per_period
    pv_lo_j, pv_med_j, pv_hi_j = (np.asarray(a, dtype=float) for a in (pv_lo_j, pv_med_j, pv_hi_j))
    n_j = len(pv_med_j)
    if n_j == 0 or n_j % m:
        raise InputError(f"{n_j} short-term steps do not tile {m} intraday steps")
    check_quantiles(pv_lo_j, pv_med_j, pv_hi_j, "short-term PV forecast")
    r = n_j // m
    hold = lambda a: np.repeat(np.asarray(a[:m], dtype=float), r)  # noqa: E731
    p_ev, s_p, s_m, p_b = (hold(a) for a in (result.p_ev_kw, result.s_plus_kw,
                                             result.s_minus_kw, result.p_bess_ac_kw))
    lo, hi = budget_bounds(p_ev, s_m, s_p, p_b, pv_lo_j, pv_hi_j, cfg)
    nominal = (p_ev / cfg.eta_cp + p_b - pv_med_j * cfg.eta_pv) / cfg.eta_tr
    return GridPowerBudget(inp.dt_h / r, lo, hi, nominal, p_b, p_ev, s_p, s_m,
                           pv_lo_j, pv_med_j, pv_hi_j, float(max_incentive_value),
                           result.p_grid_lo_kw[m:].copy(), result.p_grid_hi_kw[m:].copy())
