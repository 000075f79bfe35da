"""Acceptance criteria. Each test prints one ``CRITERION n ... PASS|FAIL``
line; the lines are repeated in the pytest terminal summary.

Run directly with ``python3 tests/test_acceptance.py`` for the lines alone.
"""
import functools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from evcs_ems.assets import (BessState, bess_ac_power, degradation_cost, profile_soc_path,
                             soc_step)
from evcs_ems.config import BessParams, StationConfig, StressCoefficients, replace
from evcs_ems.dayahead import DayAheadInputs, solve_day_ahead
from evcs_ems.intraday import IntradayInputs, refine_window
from evcs_ems.oracle import centralized_solve, enumerate_da, enumerate_id, realtime_oracle
from evcs_ems.realtime import (EvSession, SlackBisection, follower_objective, incentive_update,
                               initial_state, inner_iteration, leader_slack_step, make_problem,
                               penalty_update, run_sg_admm)
from evcs_ems.scenario import desk_scenario
from evcs_ems.sim import run_day, scale_study

ROOT = Path(__file__).resolve().parents[1]
LINES: list[str] = []


def criterion(n: int, title: str):
    """Record exactly one verdict line per criterion, also on errors."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                ok, detail = fn(*args, **kwargs)
            except Exception as exc:  # the line must appear whatever went wrong
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            line = f"CRITERION {n} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
            LINES.append(line)
            print(line)
            assert ok, line
        return run
    return wrap


def tight(cfg: StationConfig) -> StationConfig:
    # inner tolerances only: an outer tolerance below what the inner loop
    # resolves makes the Lagrangian test chase solver noise
    return replace(cfg, **{"realtime.eps_abs": 1e-6, "realtime.eps_rel": 1e-7,
                           "realtime.max_inner": 20000})


# -- 1 -----------------------------------------------------------------------

def random_instance(rng, n, cfg):
    sessions = [EvSession(i, i // 2, float(rng.uniform(20, 140)),
                          capacity_kwh=float(rng.uniform(40, 100)),
                          cr_slope=float(rng.uniform(0.0, 0.9))) for i in range(n)]
    absorb = sum(min(cfg.column_power_kw, cfg.cp_power_kw * sum(s.column == c for s in sessions))
                 for c in {s.column for s in sessions})
    c = float(rng.uniform(0.2, 0.9)) * absorb / cfg.eta_cp
    s_min, s_max = -float(rng.uniform(0, 0.3 * c)), float(rng.uniform(0, 0.3 * c))
    return make_problem(sessions, c, s_min, s_max, cfg, 1 / 60, float(rng.uniform(0.01, 0.1)))


@criterion(1, "oracle equivalence")
def test_c1_oracle_equivalence():
    cfg = tight(StationConfig())
    h = cfg.realtime
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, unconverged = 0.0, 0
    for trial in range(20):
        pr = random_instance(rng, 1 + trial % 4, cfg)
        res = run_sg_admm(pr, h)
        unconverged += not res.converged
        op = realtime_oracle(pr.sessions, res.theta, pr.coupling.c_base_kw + res.s_leader_kw,
                             pr.eta_cp, pr.column_limit_kw, pr.upper_kw, pr.dj_h, h.alpha,
                             h.beta, h.gamma, 0.01)
        worst = max(worst, float(np.max(np.abs(res.p_kw - centralized_solve(op)))))
    wall = time.perf_counter() - t0
    ok = worst <= 1e-3 and wall <= 60.0 and unconverged == 0
    return ok, f"20 instances, worst gap {worst:.2e} kW, {unconverged} unconverged, {wall:.1f} s"


# -- 2, 3 --------------------------------------------------------------------

@criterion(2, "convergence contract")
def test_c2_convergence_contract(desk_report):
    eps_outer = StationConfig().realtime.eps_outer
    bad = checked = 0
    for r in desk_report.rt_steps:
        if not (r["n_ev"] and r["converged"]):
            continue
        checked += 1
        o, k = r["outer"], r["chosen_k"]
        for rec in o[k:k + 2]:
            bad += not (rec["r_norm"] <= rec["eps_primal"] and rec["s_norm"] <= rec["eps_dual"])
        bad += abs(o[k + 1]["lagrangian"] - o[k]["lagrangian"]) > eps_outer
    return bad == 0 and checked > 0, f"{checked} converged steps, {bad} violations"


@criterion(3, "constraint satisfaction")
def test_c3_constraints(desk_report):
    bad = active = 0
    for r in desk_report.rt_steps:
        if not r["n_ev"]:
            continue
        active += 1
        eps = r["eps_primal"]
        bad += abs(r["coupling_residual_kw"]) > eps
        bad += any(s > r["column_limit_kw"][c] + eps for c, s in r["column_sums_kw"].items())
        bad += not r["s_min_kw"] <= r["s_leader_kw"] <= r["s_max_kw"]
        bad += any(not r["s_min_kw"] <= x["s_leader_kw"] <= r["s_max_kw"] for x in r["outer"])
    n_ev = len({i for r in desk_report.rt_steps for i in r["ids"]})
    ok = bad == 0 and active > 0 and len(desk_report.rt_steps) == 24 * 60 and n_ev == 8
    return ok, f"{active} active steps of {len(desk_report.rt_steps)}, {n_ev} EVs, {bad} violations"


# -- 4 -----------------------------------------------------------------------

def scripted_trace(response, cap, s_min, s_max, max_steps=60):
    bis, trace = SlackBisection(), []
    for _ in range(max_steps):
        s = bis.s
        bis = leader_slack_step(bis, response(s), cap, s_min, s_max)
        trace.append((s, bis.phase, bis.acceptable))
        if bis.phase in ("settled", "pinned", "hold"):
            break
    return bis, trace


@criterion(4, "incentive mechanism")
def test_c4_incentives(desk_report):
    h = StationConfig().realtime
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        s = EvSession(0, 0, float(rng.uniform(10, 120)), float(rng.uniform(40, 100)),
                      cr_slope=float(rng.uniform(0.1, 0.9)))
        p = float(rng.uniform(0.0, 150.0))
        if abs(p - s.p_req_kw) < 0.05:
            continue
        d = 1e-4 * max(1.0, p)
        fd = (follower_objective(p + d, s, h.beta, h.gamma)
              - follower_objective(p - d, s, h.beta, h.gamma)) / (2 * d)
        th = incentive_update([p], [s], h)[0]
        worst = max(worst, abs(th - h.delta * fd) / max(abs(fd), 1e-12))
    at_break = incentive_update([50.0], [EvSession(0, 0, 50.0)], h)[0]
    over_cap = sum(1 for r in desk_report.rt_steps for x in r["outer"]
                   if x["acceptable"] and abs(x["theta_bar"]) > r["max_incentive"] * (1 + 1e-12))
    # scripted response: more slack lowers the shortfall incentive linearly;
    # acceptable for s in [15, 25], the smallest acceptable slack is 15
    bis, trace = scripted_trace(lambda s: -0.2 + 0.01 * s, 0.05, -10.0, 40.0)
    phases = [p for _, p, _ in trace]
    three = (phases[0] == "quadrant" and trace[1][0] == 40.0 and "restore" in phases
             and "bisect" in phases and phases[-1] == "settled")
    minimal = bis.far_ok and abs(bis.s - 15.0) <= 1e-3
    hold, _ = scripted_trace(lambda s: -0.01, 0.05, -10.0, 40.0)
    ok = worst <= 1e-6 and at_break == 0.0 and over_cap == 0 and three and minimal \
        and hold.s == 0.0
    return ok, (f"fd rel err {worst:.1e}, theta(P_req)={at_break}, {over_cap} accepted over D, "
                f"trace {'->'.join(dict.fromkeys(phases))} ends at s_L={bis.s:.4f}")


# -- 5 -----------------------------------------------------------------------

SMALL = StationConfig(grid_limit_kw=200, bess=BessParams(capacity_kwh=100, c_rate_max_per_h=0.5))


def da_toy():
    a = np.array
    return DayAheadInputs(1.0, a([.1, .3, .2, .4]), a([.2, .2, .3, .2]), a([.05, .05, .1, .05]),
                          a([0, 10, 20, 0.]), a([5, 20, 30, 0.]), a([10, 30, 40, 0.]),
                          a([20, 40, 10, 30.]), a([30, 50, 20, 40.]), a([40, 60, 30, 50.]),
                          a([.4, .4, .5, .5]), 50.0)


def id_toy():
    a = np.array
    return IntradayInputs(1.0, 1, a([60, 80, 40, 50, 70, 30.]), a([40, 50, 20, 30, 50, 10.]),
                          a([0, 10, 30, 20, 5, 0.]), a([5, 20, 40, 30, 10, 0.]),
                          a([10, 30, 50, 40, 20, 0.]), a([0.3, 0.5, 0.2, 0.4, 0.6, 0.3]),
                          a([0.05, 0.02, 0.1, 0.05, 0.0, 0.05]), a([0.4, 0.4, 0.4, 0.6, 0.6, 0.4]),
                          a([30, 50, 0, 10, 60, 10.]), 50.0, 55.0, 50.0)


def id_invariants(res: dict, cfg: StationConfig, tol=1e-3) -> int:
    inp = {k: np.asarray(v) for k, v in res["inputs"].items()}
    p, sp, sm = (np.asarray(res[k]) for k in ("p_ev_kw", "s_plus_kw", "s_minus_kw"))
    bad = np.sum(p - sm < -tol) + np.sum(p - sm > inp["ev_exp"] + tol)
    bad += np.sum(p + sp < inp["ev_exp"] - tol) + np.sum(p + sp > inp["ev_max"] + tol)
    width = (sp + sm) / cfg.eta_cp + (inp["pv_hi"] - inp["pv_lo"]) * cfg.eta_pv
    need = cfg.intraday.flexibility_ratio * (np.asarray(res["p_grid_mean_kw"]) * cfg.eta_tr
                                             - np.asarray(res["p_bess_ac_kw"]))
    return int(bad + np.sum(width < need - tol))


@criterion(5, "DA/ID oracle gaps")
def test_c5_da_id(desk_report):
    da, da_ref = solve_day_ahead(da_toy(), SMALL), enumerate_da(da_toy(), SMALL)
    gap_da = abs(da.objective - da_ref.objective) / abs(da_ref.objective)
    idr, id_ref = refine_window(id_toy(), SMALL), enumerate_id(id_toy(), SMALL)
    gap_id = abs(idr.objective - id_ref.objective) / abs(id_ref.objective)
    cfg = StationConfig()
    tau = cfg.intraday.flexibility_ratio
    viol = id_invariants(idr.to_dict(), SMALL)
    viol += sum(id_invariants(w["result"], cfg) for w in desk_report.intraday)
    # speculation: free imbalance and alternating prices push the plan onto
    # k_spec*(SoC bound - SoC) at every period
    f_s = cfg.day_ahead.speculation_factor
    n = 4
    z = np.zeros(n)
    spec = solve_day_ahead(DayAheadInputs(1.0, np.array([-0.5, 0.9, -0.5, 0.9]), z, z, z, z, z,
                                          z, z, z, z, 50.0), cfg)
    k_spec = f_s * cfg.bess.capacity_kwh / 100.0
    soc = spec.soc_pct
    up = k_spec * (cfg.bess.soc_max_pct - soc[:n])
    dn = k_spec * (cfg.bess.soc_min_pct - soc[:n])
    want = np.where(np.array([-0.5, 0.9, -0.5, 0.9]) < 0, up, dn)
    active = bool(np.allclose(spec.p_dp_grid_kw, want, atol=1e-3))
    ok = gap_da <= 5e-3 and gap_id <= 5e-3 and viol == 0 and active and tau == 0.2 and f_s == 0.8
    return ok, (f"DA gap {gap_da:.1e}, ID gap {gap_id:.1e}, {len(desk_report.intraday) + 1} ID "
                f"outputs with {viol} chain/tau violations at tau={tau:g}, f_s={f_s:g} bounds "
                f"{'active' if active else 'NOT active'} on {n} periods")


# -- 6 -----------------------------------------------------------------------

@criterion(6, "scalability study")
def test_c6_scale():
    tpl = json.loads((ROOT / "scenarios" / "scale_template.json").read_text())
    cfg = replace(StationConfig(), **{f"realtime.{k}": v for k, v in tpl["realtime"].items()})
    rows = scale_study(tpl, [4, 8, 16, 32, 64, 128], cfg)
    flags = sum(1 for r in rows if not r["converged"] or r["flag"])
    p = np.concatenate([r["p_kw"] for r in rows])
    drift = float(p.max() - p.min())
    walls = ", ".join(f"N={r['n_ev']}: {r['wall_s']:.2f} s" for r in rows)
    return flags == 0 and drift <= 1e-3, (f"{flags} flagged, per-EV drift {drift:.1e} kW, "
                                          f"wall per RT step {walls}")


# -- 7 -----------------------------------------------------------------------

@criterion(7, "numerical hygiene")
def test_c7_hygiene(desk_report):
    cfg = StationConfig()
    h = cfg.realtime
    idem = penalty_update(1.7, 0.0, 0.0, h) == 1.7
    pr = make_problem([EvSession(0, 0, 50.0), EvSession(1, 1, 40.0)], 90.0 / cfg.eta_cp, 0.0,
                      0.0, cfg, 1 / 60)
    st = initial_state(pr, h)
    before = (st.rho, st.lam, st.mu.copy())
    chk = inner_iteration(st, pr, h)
    idem &= (chk.r_norm == 0.0 and chk.s_norm == 0.0 and st.rho == before[0]
             and st.lam == before[1] and np.array_equal(st.mu, before[2]))
    b = BessParams(eta_inv=0.95, eta_ch=0.97, eta_dh=0.97)
    units = abs(bess_ac_power(100.0, b) - 108.518) < 1e-3 and abs(bess_ac_power(-100.0, b)
                                                                 + 92.15) < 1e-9
    big = BessParams(capacity_kwh=500.0, soc_min_pct=0.0, soc_max_pct=100.0, c_rate_max_per_h=1.0)
    units &= abs(soc_step(BessState(50.0), 100.0, 0.25, big).state.soc_pct - 55.0) < 1e-12
    over = soc_step(BessState(98.0), 100.0, 0.25, big)
    units &= abs(over.state.soc_pct - 103.0) < 1e-12 and over.violation
    ref = StressCoefficients()
    units &= degradation_cost([(0.0, 1.0)] * 3, [50.0] * 4, ref, big) == 0.0
    one = degradation_cost([(500.0, 1.0)], profile_soc_path(0.0, [(500.0, 1.0)], big), ref, big)
    units &= abs(one - 0.5 * big.d_ref_pct_per_fec / big.d_eol_pct * 500.0 * big.price_per_kwh) \
        < 1e-9
    again = run_day(desk_scenario(), StationConfig())
    same = again.to_json() == desk_report.to_json()
    return idem and units and same, (f"penalty/dual fixed point {idem}, asset unit values "
                                     f"{units}, seeded reports byte-identical {same}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
