"""Chance-constrained day-ahead dispatch.

The (.)+ imbalance terms are written with epigraph variables and the
battery power is split into non-negative charge/discharge parts, so the
whole day is one LP handed to :func:`solver.solve_qp`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .assets import degradation_cost, throughput_cost_per_kwh
from .config import StationConfig
from .solver import ProgramBuilder, QuadraticProgram, SolveReport, solve_qp


class InputError(ValueError):
    pass


class SolveError(RuntimeError):
    def __init__(self, message: str, report: SolveReport | None = None):
        super().__init__(message)
        self.report = report


def check_quantiles(lo, med, hi, label: str) -> None:
    lo, med, hi = (np.asarray(a, dtype=float) for a in (lo, med, hi))
    if not (lo.shape == med.shape == hi.shape):
        raise InputError(f"{label}: quantile arrays differ in length")
    bad = np.flatnonzero((lo > med + 1e-9) | (med > hi + 1e-9))
    if bad.size:
        k = int(bad[0])
        raise InputError(f"{label}: quantiles out of order at period {k} "
                         f"({lo[k]:g}, {med[k]:g}, {hi[k]:g})")


@dataclass
class DayAheadInputs:
    dt_h: float
    dam_price: np.ndarray  # currency/kWh
    r_short: np.ndarray
    r_long: np.ndarray
    pv_lo: np.ndarray
    pv_med: np.ndarray
    pv_hi: np.ndarray
    ev_lo: np.ndarray
    ev_med: np.ndarray
    ev_hi: np.ndarray
    tariff: np.ndarray
    soc0_pct: float

    def __post_init__(self) -> None:
        for name in ("dam_price", "r_short", "r_long", "pv_lo", "pv_med", "pv_hi",
                     "ev_lo", "ev_med", "ev_hi", "tariff"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (self.n,):
                raise InputError(f"{name} has length {arr.size}, expected {self.n}")
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} contains non-finite values")
            setattr(self, name, arr)
        if self.dt_h <= 0:
            raise InputError("dt_h must be positive")
        check_quantiles(self.pv_lo, self.pv_med, self.pv_hi, "PV forecast")
        check_quantiles(self.ev_lo, self.ev_med, self.ev_hi, "EV demand forecast")

    @property
    def n(self) -> int:
        return len(np.asarray(self.dam_price))


@dataclass
class DispatchPlan:
    dt_h: float
    p_dp_grid_kw: np.ndarray
    p_grid_internal_kw: np.ndarray
    p_ev_kw: np.ndarray
    p_bess_batt_kw: np.ndarray
    p_bess_ac_kw: np.ndarray
    soc_pct: np.ndarray  # length n+1, period boundaries
    objective: float
    costs: dict[str, float]
    report: SolveReport = field(repr=False)

    @property
    def p_ev_dp_kw(self) -> np.ndarray:
        return self.p_ev_kw

    def to_dict(self) -> dict[str, Any]:
        return {
            "dt_h": self.dt_h,
            "p_dp_grid_kw": self.p_dp_grid_kw.tolist(),
            "p_grid_internal_kw": self.p_grid_internal_kw.tolist(),
            "p_ev_kw": self.p_ev_kw.tolist(),
            "p_ev_dp_kw": self.p_ev_dp_kw.tolist(),
            "p_bess_batt_kw": self.p_bess_batt_kw.tolist(),
            "p_bess_ac_kw": self.p_bess_ac_kw.tolist(),
            "soc_pct": self.soc_pct.tolist(),
            "objective": self.objective,
            "costs": dict(self.costs),
            "solver": {"status": self.report.status, "iterations": self.report.iterations,
                       "primal_residual": self.report.primal_residual,
                       "dual_residual": self.report.dual_residual},
        }


def build_da_program(inputs: DayAheadInputs, cfg: StationConfig) -> QuadraticProgram:
    n, dt = inputs.n, inputs.dt_h
    bess = cfg.bess
    a_ch = 1.0 / (bess.eta_inv * bess.eta_ch)
    a_dh = bess.eta_inv * bess.eta_dh
    deg = throughput_cost_per_kwh(bess, cfg.stress)
    r_s = np.maximum(inputs.r_short, 0.0)
    r_l = np.maximum(inputs.r_long, 0.0)
    f_s = cfg.day_ahead.speculation_factor
    k_spec = f_s * bess.capacity_kwh / (100.0 * dt)  # %-span -> kW
    gc = cfg.grid_limit_kw

    b = ProgramBuilder()
    p_ev = b.var("p_ev", n, 0.0, inputs.ev_lo)
    p_ch = b.var("p_ch", n, 0.0, bess.p_max_kw)
    p_dh = b.var("p_dh", n, 0.0, bess.p_max_kw)
    p_dp = b.var("p_dp", n, -gc, gc)
    e_s = b.var("dev_short", n, 0.0)
    e_l = b.var("dev_long", n, 0.0)
    soc = b.var("soc", n, bess.soc_min_pct, bess.soc_max_pct)

    for t in range(n):
        # bus-side load excluding PV: p_ev/eta_cp + P_B^eta
        load = {p_ev[t]: 1.0 / cfg.eta_cp, p_ch[t]: a_ch, p_dh[t]: -a_dh}
        pv_med = inputs.pv_med[t] * cfg.eta_pv
        # internal schedule P_G = (load - pv)/eta_tr; e_s >= P_G - P_dp, e_l >= P_dp - P_G
        pg = {k: v / cfg.eta_tr for k, v in load.items()}
        b.ge({**{k: -v for k, v in pg.items()}, e_s[t]: 1.0, p_dp[t]: 1.0}, -pv_med / cfg.eta_tr)
        b.ge({**pg, e_l[t]: 1.0, p_dp[t]: -1.0}, pv_med / cfg.eta_tr)
        # chance-separated grid withdrawal / injection limits
        b.le(load, inputs.pv_lo[t] * cfg.eta_pv + gc * cfg.eta_tr)
        b.ge(load, inputs.pv_hi[t] * cfg.eta_pv - gc * cfg.eta_tr)
        # SoC dynamics
        terms = {soc[t]: 1.0, p_ch[t]: -100.0 * dt / bess.capacity_kwh,
                 p_dh[t]: 100.0 * dt / bess.capacity_kwh}
        if t == 0:
            b.eq(terms, inputs.soc0_pct)
        else:
            terms[soc[t - 1]] = -1.0
            b.eq(terms, 0.0)
        # speculation bounds, SoC at period start
        if t == 0:
            s_start = inputs.soc0_pct
            b.ge({p_dp[t]: 1.0}, k_spec * (bess.soc_min_pct - s_start) - pv_med)
            b.le({p_dp[t]: 1.0}, k_spec * (bess.soc_max_pct - s_start)
                 + inputs.ev_med[t] / cfg.eta_cp)
        else:
            b.ge({p_dp[t]: 1.0, soc[t - 1]: k_spec}, k_spec * bess.soc_min_pct - pv_med)
            b.le({p_dp[t]: 1.0, soc[t - 1]: k_spec},
                 k_spec * bess.soc_max_pct + inputs.ev_med[t] / cfg.eta_cp)

        b.linear(p_dp[t], dt * inputs.dam_price[t])
        b.linear(p_ev[t], -dt * inputs.tariff[t])
        b.linear(p_ch[t], dt * deg)
        b.linear(p_dh[t], dt * deg)
        b.linear(e_s[t], dt * r_s[t])
        b.linear(e_l[t], dt * r_l[t])
    if cfg.day_ahead.terminal_soc_at_least_initial:
        b.ge({soc[n - 1]: 1.0}, inputs.soc0_pct)
    return b.build()


def solve_day_ahead(inputs: DayAheadInputs, cfg: StationConfig) -> DispatchPlan:
    qp = build_da_program(inputs, cfg)
    s = cfg.solver
    rep = solve_qp(qp, s.eps_abs, s.eps_rel, s.max_iter)
    if not rep.ok:
        raise SolveError(f"day-ahead program not solved: {rep.status}", rep)
    x = rep.x
    N = qp.names
    bess = cfg.bess
    p_ev = np.clip(x[N["p_ev"]], 0.0, None)
    p_ch = np.clip(x[N["p_ch"]], 0.0, None)
    p_dh = np.clip(x[N["p_dh"]], 0.0, None)
    p_b = p_ch - p_dh
    p_ac = p_ch / (bess.eta_inv * bess.eta_ch) - p_dh * bess.eta_inv * bess.eta_dh
    p_dp = x[N["p_dp"]]
    p_g = (p_ev / cfg.eta_cp + p_ac - inputs.pv_med * cfg.eta_pv) / cfg.eta_tr
    soc = np.concatenate([[inputs.soc0_pct], x[N["soc"]]])
    dt = inputs.dt_h
    r_s = np.maximum(inputs.r_short, 0.0)
    r_l = np.maximum(inputs.r_long, 0.0)
    deg_lin = throughput_cost_per_kwh(bess, cfg.stress) * float(np.sum(np.abs(p_b))) * dt
    costs = {
        "dam_cost": float(np.sum(p_dp * inputs.dam_price) * dt),
        "bm_cost": float(np.sum(r_s * np.maximum(p_g - p_dp, 0.0)
                                + r_l * np.maximum(p_dp - p_g, 0.0)) * dt),
        "ev_revenue": float(np.sum(p_ev * inputs.tariff) * dt),
        "degradation_linear": deg_lin,
        "degradation_exact": degradation_cost([(float(p), dt) for p in p_b],
                                              soc.tolist(), cfg.stress, bess),
    }
    return DispatchPlan(dt, p_dp, p_g, p_ev, p_b, p_ac, soc, rep.objective, costs, rep)
