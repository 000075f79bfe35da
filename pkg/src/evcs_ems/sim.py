"""Day-level event loop: day-ahead once, intraday every balancing period,
real-time SG-ADMM every short-term step, then ex-post settlement.

The persisted step records are authoritative; KPIs are recomputed from
them by :func:`compute_kpis`.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .assets import (bess_ac_power, bess_batt_power, degradation_cost,
                     throughput_cost_per_kwh)
from .config import StationConfig, replace
from .dayahead import DayAheadInputs, InputError, SolveError, solve_day_ahead
from .forecast import block_mean, persistence, quantile_forecast
from .intraday import (IntradayInputs, Window, max_incentive, refine_window,
                       shrink_horizon, upsample_short_term)
from .realtime import (EvSession, HorizonResult, SessionError, make_problem,
                       run_horizon_step, run_sg_admm)
from .scenario import Scenario

log = logging.getLogger(__name__)

LAYER_ERRORS = (SolveError, InputError, SessionError, FloatingPointError)

CSV_COLUMNS = ("step", "t_h", "period", "n_ev", "sum_p_kw", "c_base_kw", "s_leader_kw",
               "s_min_kw", "s_max_kw", "coupling_residual_kw", "eps_primal", "pv_kw",
               "pv_prev_kw", "p_bess_ac_kw", "soc_pct", "p_grid_kw", "budget_lo_kw",
               "budget_hi_kw", "tariff_per_kwh", "ev_revenue", "converged", "flag",
               "outer_iterations", "inner_iterations")


@dataclass
class RunReport:
    scenario: str
    status: str  # "complete" or "partial"
    failure: dict[str, Any] | None
    day_ahead: dict[str, Any] | None
    intraday: list[dict[str, Any]]
    rt_steps: list[dict[str, Any]]
    settlement: list[dict[str, Any]]
    bess: dict[str, Any]
    kpis: dict[str, Any]
    # wall-clock is kept apart so two runs of the same input compare equal
    timing: dict[str, Any] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {"scenario": self.scenario, "status": self.status, "failure": self.failure,
                "day_ahead": self.day_ahead, "intraday": self.intraday,
                "rt_steps": self.rt_steps, "settlement": self.settlement, "bess": self.bess,
                "kpis": self.kpis}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "timing.json").write_text(json.dumps(self.timing, indent=1))
        with open(out / "rt_steps.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for rec in self.rt_steps:
                w.writerow([rec[c] for c in CSV_COLUMNS])
        with open(out / "settlement.csv", "w", newline="") as fh:
            if self.settlement:
                w = csv.DictWriter(fh, fieldnames=list(self.settlement[0]))
                w.writeheader()
                w.writerows(self.settlement)
        return out


@dataclass
class DayInputs:
    """Ground truth and forecasts on the three time grids."""

    pv_rt: np.ndarray
    ev_rt: np.ndarray
    booking_rt: np.ndarray
    tariff_rt: np.ndarray
    tariff_id: np.ndarray
    tariff_da: np.ndarray
    pv_id: np.ndarray
    ev_id: np.ndarray
    booking_id: np.ndarray
    pv_da: np.ndarray
    ev_da: np.ndarray


def day_inputs(sc: Scenario) -> DayInputs:
    r, big = sc.rt_per_id, sc.rt_per_period
    pv = np.asarray(sc.pv_truth_kw, dtype=float)
    ev = sc.ev_demand_rt()
    book = sc.booking_max_rt()
    tariff = sc.tariff_rt()
    return DayInputs(pv, ev, book, tariff, block_mean(tariff, r), block_mean(tariff, big),
                     block_mean(pv, r), block_mean(ev, r), block_mean(book, r),
                     block_mean(pv, big), block_mean(ev, big))


def day_ahead_inputs(sc: Scenario, d: DayInputs, rng: np.random.Generator) -> DayAheadInputs:
    if sc.pv_day_ahead_kw is not None:
        q = sc.pv_day_ahead_kw
        pv_lo, pv_med, pv_hi = (np.asarray(q[k], dtype=float) for k in ("lo", "med", "hi"))
    else:
        pv_lo, pv_med, pv_hi = quantile_forecast(d.pv_da, sc.pv_forecast["day_ahead"], rng)
    ev_lo, ev_med, ev_hi = quantile_forecast(d.ev_da, sc.ev_forecast["day_ahead"], rng)
    return DayAheadInputs(sc.period_h, np.asarray(sc.dam_price_per_kwh, dtype=float),
                          np.asarray(sc.r_short_per_kwh, dtype=float),
                          np.asarray(sc.r_long_per_kwh, dtype=float),
                          pv_lo, pv_med, pv_hi, ev_lo, ev_med, ev_hi, d.tariff_da, sc.soc0_pct)


def intraday_inputs(sc: Scenario, d: DayInputs, plan, window: Window, soc_pct: float,
                    cfg: StationConfig, rng: np.random.Generator) -> IntradayInputs:
    m = sc.id_per_period
    steps = slice(window.start * m, window.stop * m)
    periods = slice(window.start, window.stop)
    pv_lo, pv_med, pv_hi = quantile_forecast(d.pv_id[steps], sc.pv_forecast["intraday"], rng)
    _, ev_med, _ = quantile_forecast(d.ev_id[steps], sc.ev_forecast["intraday"], rng)
    ev_max = d.booking_id[steps]
    return IntradayInputs(
        sc.id_step_h, m, ev_max, np.clip(ev_med, 0.0, ev_max), pv_lo, pv_med, pv_hi,
        np.asarray(sc.r_short_per_kwh, dtype=float)[periods],
        np.asarray(sc.r_long_per_kwh, dtype=float)[periods], d.tariff_id[steps],
        plan.p_dp_grid_kw[periods], soc_pct, float(plan.soc_pct[window.start + 1]),
        float(plan.soc_pct[window.stop]), plan.p_ev_kw[periods])


def sessions_at(sc: Scenario, t_h: float, delivered: dict[int, float]) -> list[EvSession]:
    """EVs plugged in for the whole step starting at ``t_h``. Arrivals
    within a step wait for the next one; a session with an energy target
    asks for at most what it still needs."""
    dj = sc.rt_step_h
    out = []
    for a in sc.arrivals:
        if not (a.arrival_h <= t_h + 1e-9 and t_h + dj <= a.departure_h + 1e-9):
            continue
        p_req = a.p_req_kw
        if a.energy_kwh is not None:
            remaining = a.energy_kwh - delivered.get(a.id, 0.0)
            if remaining <= 1e-6:
                continue
            p_req = min(p_req, remaining / dj)
        out.append(EvSession(a.id, a.column, p_req, a.capacity_kwh, a.cr_ref_per_h,
                             a.cr_slope, a.arrival_h, a.departure_h))
    return out


def outer_summary(res: HorizonResult) -> list[dict[str, Any]]:
    keys = ("k", "s_leader_kw", "c_k_kw", "lagrangian", "inner_converged", "inner_iterations",
            "r_norm", "s_norm", "eps_primal", "eps_dual", "theta_bar", "acceptable", "phase")
    return [{k: getattr(r, k) for k in keys} for r in res.records]


def rt_record(sc: Scenario, J: int, T: int, res: HorizonResult, cfg: StationConfig) -> dict:
    chosen = res.records[res.chosen_k] if res.records else None
    cols: dict[str, float] = {}
    for i, s_id in enumerate(res.ids):
        c = str(next(a.column for a in sc.arrivals if a.id == s_id))
        cols[c] = cols.get(c, 0.0) + float(res.p_kw[i])
    return {
        "step": J, "t_h": J * sc.rt_step_h, "period": T, "ids": list(res.ids),
        "p_kw": res.p_kw.tolist(), "theta": res.theta.tolist(),
        "n_ev": len(res.ids), "sum_p_kw": float(res.p_kw.sum()),
        "c_base_kw": res.coupling.c_base_kw, "s_leader_kw": res.s_leader_kw,
        "s_min_kw": res.coupling.s_min_kw, "s_max_kw": res.coupling.s_max_kw,
        "raw_s_min_kw": res.coupling.raw_s_min_kw, "raw_s_max_kw": res.coupling.raw_s_max_kw,
        "column_sums_kw": cols,
        "column_limit_kw": {str(k): v for k, v in res.column_limit_kw.items()},
        "coupling_residual_kw": res.coupling_residual(),
        "eps_primal": chosen.eps_primal if chosen else 0.0,
        "converged": res.converged, "flag": res.flag, "chosen_k": res.chosen_k,
        "outer_iterations": res.outer_iterations,
        "inner_iterations": int(sum(res.inner_iterations)),
        "outer": outer_summary(res), "max_incentive": res.max_incentive,
    }


def settle_period(T: int, grid_kw: list[float], dj_h: float, p_dp_kw: float, period_h: float,
                  dam_price: float, r_short: float, r_long: float) -> dict[str, float]:
    energy = float(np.sum(grid_kw) * dj_h)
    dev = energy - p_dp_kw * period_h
    e_plus, e_minus = max(dev, 0.0), max(-dev, 0.0)
    return {"period": T, "grid_energy_kwh": energy, "p_dp_kw": p_dp_kw,
            "deviation_kwh": dev, "e_plus_kwh": e_plus, "e_minus_kwh": e_minus,
            "dam_cost": p_dp_kw * period_h * dam_price,
            "imbalance_cost": r_short * e_plus + r_long * e_minus}


def compute_kpis(rt_steps: list[dict], settlement: list[dict], bess: dict) -> dict[str, Any]:
    active = [r for r in rt_steps if r["n_ev"] > 0]
    thetas = [abs(th) for r in active for th in r["theta"]]
    col_viol = [s - r["column_limit_kw"][c] for r in active
                for c, s in r["column_sums_kw"].items()]
    ev_rev = float(sum(r["ev_revenue"] for r in rt_steps))
    dam = float(sum(s["dam_cost"] for s in settlement))
    imb = float(sum(s["imbalance_cost"] for s in settlement))
    deg = float(bess.get("degradation_exact", 0.0))
    return {
        "total_profit": ev_rev - dam - imb - deg,
        "ev_revenue": ev_rev, "dam_cost": dam, "imbalance_cost": imb,
        "degradation_exact": deg, "degradation_linear": float(bess.get("degradation_linear", 0.0)),
        "ev_energy_kwh": float(sum(r["sum_p_kw"] for r in rt_steps) * bess.get("dj_h", 0.0)),
        "mean_abs_theta": float(np.mean(thetas)) if thetas else 0.0,
        "coupling_violation_max_kw": max((abs(r["coupling_residual_kw"]) for r in active),
                                         default=0.0),
        "column_violation_max_kw": max(col_viol, default=0.0),
        "budget_violation_max_kw": max((max(r["budget_lo_kw"] - r["p_grid_kw"],
                                            r["p_grid_kw"] - r["budget_hi_kw"], 0.0)
                                        for r in rt_steps), default=0.0),
        "rt_steps": len(rt_steps), "active_rt_steps": len(active),
        "non_converged_steps": sum(1 for r in rt_steps if not r["converged"]),
        "flagged_steps": sum(1 for r in rt_steps if r["flag"]),
        "outer_iterations_mean": float(np.mean([r["outer_iterations"] for r in active]))
        if active else 0.0,
        "outer_iterations_max": max((r["outer_iterations"] for r in active), default=0),
        "inner_iterations_mean": float(np.mean([r["inner_iterations"] for r in active]))
        if active else 0.0,
        "inner_iterations_max": max((r["inner_iterations"] for r in active), default=0),
    }


def run_day(sc: Scenario, cfg: StationConfig, seed: int | None = None,
            progress: Callable[[str], None] | None = None) -> RunReport:
    sc.validate(cfg)
    rng = np.random.default_rng(sc.seed if seed is None else seed)
    d = day_inputs(sc)
    big, dj = sc.rt_per_period, sc.rt_step_h
    bess = cfg.bess
    intraday: list[dict] = []
    rt_steps: list[dict] = []
    settlement: list[dict] = []
    wall: list[float] = []
    failure = None
    plan_dict = None
    soc = sc.soc0_pct
    soc_path = [soc]
    batt: list[float] = []
    delivered: dict[int, float] = {}

    try:
        plan = solve_day_ahead(day_ahead_inputs(sc, d, rng), cfg)
    except LAYER_ERRORS as exc:
        failure = {"layer": "day_ahead", "period": 0, "step": None, "error": str(exc)}
        plan = None
    if plan is not None:
        plan_dict = plan.to_dict()

    for T in range(sc.n_periods if plan is not None else 0):
        window = shrink_horizon(Window(T, T + cfg.intraday.window_periods), sc.n_periods)
        try:
            id_in = intraday_inputs(sc, d, plan, window, soc, cfg, rng)
            res_id = refine_window(id_in, cfg)
            tariff_T = float(d.tariff_da[T])
            cap = max_incentive(res_id, float(plan.p_ev_kw[T]), tariff_T,
                                cfg.discount_cap_fraction)
            ticks = slice(T * big, (T + 1) * big)
            q = quantile_forecast(d.pv_rt[ticks], sc.pv_forecast["short_term"], rng)
            budget = upsample_short_term(res_id, *q, cfg, cap)
        except LAYER_ERRORS as exc:
            failure = {"layer": "intraday", "period": T, "step": None, "error": str(exc)}
            break
        intraday.append({"period": T, "window": [window.start, window.stop],
                         "result": res_id.to_dict(), "max_incentive": cap,
                         "budget": budget.to_dict()})
        grid: list[float] = []
        for j in range(big):
            J = T * big + j
            t = J * dj
            sessions = sessions_at(sc, t, delivered)
            pv_prev = persistence(d.pv_rt, J)
            t0 = time.perf_counter()
            try:
                res = run_horizon_step(sessions, budget, j, pv_prev, cfg)
            except LAYER_ERRORS as exc:
                failure = {"layer": "realtime", "period": T, "step": J, "error": str(exc)}
                break
            wall.append(time.perf_counter() - t0)
            rec = rt_record(sc, J, T, res, cfg)
            # BESS follows the held intraday setpoint inside its SoC limits
            p_b = bess_batt_power(float(budget.p_bess_ac_kw[j]), bess)
            room_up = (bess.soc_max_pct - soc) * bess.capacity_kwh / (100.0 * dj)
            room_dn = (soc - bess.soc_min_pct) * bess.capacity_kwh / (100.0 * dj)
            p_b = float(np.clip(p_b, -max(room_dn, 0.0), max(room_up, 0.0)))
            p_ac = bess_ac_power(p_b, bess)
            soc = soc + 100.0 * p_b * dj / bess.capacity_kwh
            batt.append(p_b)
            soc_path.append(soc)
            pv = float(d.pv_rt[J])
            p_grid = (rec["sum_p_kw"] / cfg.eta_cp + p_ac - pv * cfg.eta_pv) / cfg.eta_tr
            grid.append(p_grid)
            tariff = float(d.tariff_rt[J])
            disc_cap = min(res.max_incentive, cfg.discount_cap_fraction * tariff)
            disc = np.clip(res.theta, 0.0, disc_cap) if len(res.ids) else np.zeros(0)
            for s_id, p in zip(res.ids, res.p_kw):
                delivered[s_id] = delivered.get(s_id, 0.0) + float(p) * dj
            rec.update({
                "pv_kw": pv, "pv_prev_kw": pv_prev, "p_bess_ac_kw": p_ac, "p_bess_batt_kw": p_b,
                "soc_pct": soc, "p_grid_kw": p_grid,
                "budget_lo_kw": float(budget.p_lo_kw[j]), "budget_hi_kw": float(budget.p_hi_kw[j]),
                "tariff_per_kwh": tariff, "discount_per_kwh": disc.tolist(),
                "ev_revenue": float(np.sum(res.p_kw * (tariff - disc)) * dj),
            })
            rt_steps.append(rec)
            if not res.converged:
                log.warning("step %d: SG-ADMM not converged (%s)", J, res.flag or "max iterations")
        if failure is not None:
            break
        settlement.append(settle_period(T, grid, dj, float(plan.p_dp_grid_kw[T]), sc.period_h,
                                        float(sc.dam_price_per_kwh[T]),
                                        float(sc.r_short_per_kwh[T]),
                                        float(sc.r_long_per_kwh[T])))
        if progress is not None:
            progress(f"period {T}: soc {soc:.1f}%")

    profile = [(p, dj) for p in batt]
    bess_rec = {
        "dj_h": dj, "soc_path_pct": soc_path, "p_batt_kw": batt,
        "degradation_exact": degradation_cost(profile, soc_path, cfg.stress, bess) if batt else 0.0,
        "degradation_linear": throughput_cost_per_kwh(bess, cfg.stress)
        * float(np.sum(np.abs(batt)) * dj),
    }
    kpis = compute_kpis(rt_steps, settlement, bess_rec)
    timing = {"rt_step_s": wall,
              "rt_step_mean_s": float(np.mean(wall)) if wall else 0.0,
              "rt_step_max_s": float(np.max(wall)) if wall else 0.0}
    return RunReport(sc.name, "partial" if failure else "complete", failure, plan_dict,
                     intraday, rt_steps, settlement, bess_rec, kpis, timing)


def replicate_problem(n_ev: int, template: dict[str, float], cfg: StationConfig):
    """``n_ev`` identical EVs, two per column, with ``C`` and the slack
    bounds proportional to ``n_ev``."""
    n_col = (n_ev + 1) // 2
    cfg = replace(cfg, n_columns=n_col, cps_per_column=2)
    sessions = [EvSession(i, i // 2, template["p_req_kw"],
                          template.get("capacity_kwh", 60.0),
                          template.get("cr_ref_per_h", 1.0), template.get("cr_slope", 0.5))
                for i in range(n_ev)]
    problem = make_problem(sessions, n_ev * template["c_per_ev_kw"],
                           n_ev * template["s_min_per_ev_kw"], n_ev * template["s_max_per_ev_kw"],
                           cfg, template.get("dj_h", 1.0 / 60.0), template["max_incentive"])
    return problem, cfg


def scale_study(template: dict[str, Any], n_list, cfg: StationConfig) -> list[dict[str, Any]]:
    """One real-time step per fleet size; iterations, per-EV solution and
    wall-clock for each."""
    rows = []
    for n in n_list:
        problem, cfg_n = replicate_problem(int(n), template, cfg)
        t0 = time.perf_counter()
        res = run_sg_admm(problem, cfg_n.realtime)
        wall = time.perf_counter() - t0
        inner = res.inner_iterations
        rows.append({
            "n_ev": int(n), "converged": res.converged, "flag": res.flag,
            "outer_iterations": res.outer_iterations,
            "inner_mean": float(np.mean(inner)) if inner else 0.0,
            "inner_max": max(inner, default=0), "inner_total": int(sum(inner)),
            "all_inner_converged": all(r.inner_converged for r in res.records),
            "s_leader_per_ev_kw": res.s_leader_kw / n,
            "p_min_kw": float(res.p_kw.min()), "p_max_kw": float(res.p_kw.max()),
            "p_kw": res.p_kw.tolist(), "wall_s": wall,
        })
    return rows
