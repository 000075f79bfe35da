"""Command-line entry point. Exit status is 0 only for fully converged runs.

Log verbosity comes from ``EVCS_EMS_LOG`` (DEBUG, INFO, WARNING, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from .config import ConfigError, load_config, replace
from .dayahead import solve_day_ahead
from .forecast import persistence, quantile_forecast
from .intraday import Window, max_incentive, refine_window, shrink_horizon, upsample_short_term
from .oracle import centralized_solve, realtime_oracle
from .realtime import run_horizon_step, run_sg_admm
from .scenario import load_scenario
from .sim import (LAYER_ERRORS, day_ahead_inputs, day_inputs, intraday_inputs,
                  replicate_problem, rt_record, run_day, scale_study, sessions_at)

log = logging.getLogger("evcs_ems")


def _write(out: str | None, name: str, data: Any) -> None:
    text = json.dumps(data, indent=1, sort_keys=True)
    if out is None:
        print(text)
        return
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / name).write_text(text)
    log.info("wrote %s", path / name)


def _prepare(args):
    cfg = load_config(args.config)
    sc = load_scenario(args.scenario)
    sc.validate(cfg)
    rng = np.random.default_rng(sc.seed if getattr(args, "seed", None) is None else args.seed)
    d = day_inputs(sc)
    plan = solve_day_ahead(day_ahead_inputs(sc, d, rng), cfg)
    return cfg, sc, rng, d, plan


def _intraday(cfg, sc, rng, d, plan, period: int):
    if not 0 <= period < sc.n_periods:
        raise SystemExit(f"--at {period} outside 0..{sc.n_periods - 1}")
    window = shrink_horizon(Window(period, period + cfg.intraday.window_periods), sc.n_periods)
    res = refine_window(intraday_inputs(sc, d, plan, window, float(plan.soc_pct[period]), cfg,
                                        rng), cfg)
    cap = max_incentive(res, float(plan.p_ev_kw[period]), float(d.tariff_da[period]),
                        cfg.discount_cap_fraction)
    big = sc.rt_per_period
    q = quantile_forecast(d.pv_rt[period * big:(period + 1) * big],
                          sc.pv_forecast["short_term"], rng)
    return window, res, upsample_short_term(res, *q, cfg, cap)


def cmd_da_plan(args) -> int:
    _, _, _, _, plan = _prepare(args)
    _write(args.out, "day_ahead.json", plan.to_dict())
    return 0 if plan.report.ok else 1


def cmd_id_refine(args) -> int:
    cfg, sc, rng, d, plan = _prepare(args)
    window, res, budget = _intraday(cfg, sc, rng, d, plan, args.at)
    _write(args.out, f"intraday_{args.at}.json",
           {"period": args.at, "window": [window.start, window.stop], "result": res.to_dict(),
            "budget": budget.to_dict()})
    return 0 if res.report.ok else 1


def cmd_rt_step(args) -> int:
    cfg, sc, rng, d, plan = _prepare(args)
    big = sc.rt_per_period
    if not 0 <= args.at < sc.n_rt:
        raise SystemExit(f"--at {args.at} outside 0..{sc.n_rt - 1}")
    period, j = divmod(args.at, big)
    _, _, budget = _intraday(cfg, sc, rng, d, plan, period)
    sessions = sessions_at(sc, args.at * sc.rt_step_h, {})
    res = run_horizon_step(sessions, budget, j, persistence(d.pv_rt, args.at), cfg)
    _write(args.out, f"rt_step_{args.at}.json", rt_record(sc, args.at, period, res, cfg))
    return 0 if res.converged else 1


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sc = load_scenario(args.scenario)
    rep = run_day(sc, cfg, seed=args.seed, progress=log.info)
    out = rep.save(args.out)
    k = rep.kpis
    print(f"{rep.status}: profit {k['total_profit']:.2f}, imbalance {k['imbalance_cost']:.2f}, "
          f"mean |theta| {k['mean_abs_theta']:.4f}, non-converged steps "
          f"{k['non_converged_steps']}, RT step {rep.timing['rt_step_mean_s'] * 1e3:.1f} ms mean "
          f"-> {out}")
    return 0 if rep.status == "complete" and k["non_converged_steps"] == 0 else 1


def _template(path: str) -> dict[str, Any]:
    data = json.loads(Path(path).read_text())
    if "p_req_kw" not in data:
        raise ConfigError("template needs at least p_req_kw, c_per_ev_kw, s_min_per_ev_kw, "
                          "s_max_per_ev_kw and max_incentive")
    return data


def _template_cfg(args, tpl: dict[str, Any]):
    cfg = load_config(args.config)
    hyper = {f"realtime.{k}": v for k, v in tpl.get("realtime", {}).items()}
    return replace(cfg, **hyper) if hyper else cfg


def cmd_scale_study(args) -> int:
    tpl = _template(args.template)
    cfg = _template_cfg(args, tpl)
    rows = scale_study(tpl, [int(x) for x in args.n.split(",")], cfg)
    print(f"{'N':>5} {'conv':>5} {'outer':>5} {'inner mean':>10} {'inner max':>9} "
          f"{'p/EV kW':>20} {'wall s':>8}")
    for r in rows:
        print(f"{r['n_ev']:>5} {str(r['converged']):>5} {r['outer_iterations']:>5} "
              f"{r['inner_mean']:>10.1f} {r['inner_max']:>9} "
              f"{r['p_min_kw']:>9.4f}..{r['p_max_kw']:<9.4f} {r['wall_s']:>8.3f}")
    if args.out:
        _write(args.out, "scale_study.json", rows)
    return 0 if all(r["converged"] and not r["flag"] for r in rows) else 1


def cmd_oracle(args) -> int:
    tpl = _template(args.template)
    cfg = _template_cfg(args, tpl)
    problem, cfg_n = replicate_problem(args.n, tpl, cfg)
    res = run_sg_admm(problem, cfg_n.realtime)
    h = cfg_n.realtime
    op = realtime_oracle(problem.sessions, res.theta,
                         problem.coupling.c_base_kw + res.s_leader_kw, problem.eta_cp,
                         problem.column_limit_kw, problem.upper_kw, problem.dj_h, h.alpha,
                         h.beta, h.gamma, args.resolution)
    ref = centralized_solve(op)
    gap = float(np.max(np.abs(res.p_kw - ref)))
    _write(args.out, "oracle.json", {"admm_kw": res.p_kw.tolist(), "oracle_kw": ref.tolist(),
                                     "max_gap_kw": gap, "converged": res.converged})
    return 0 if res.converged and gap <= args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evcs-ems", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("--scenario", required=True)
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("da-plan", help="day-ahead dispatch plan")
    scenario_args(p)
    p.set_defaults(func=cmd_da_plan)
    p = sub.add_parser("id-refine", help="intraday refinement at a balancing period")
    scenario_args(p)
    p.add_argument("--at", type=int, required=True, help="balancing period index")
    p.set_defaults(func=cmd_id_refine)
    p = sub.add_parser("rt-step", help="one real-time SG-ADMM step")
    scenario_args(p)
    p.add_argument("--at", type=int, required=True, help="real-time step index")
    p.set_defaults(func=cmd_rt_step)
    p = sub.add_parser("simulate", help="full day run")
    p.add_argument("--scenario", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("scale-study", help="iterations and wall-clock versus fleet size")
    p.add_argument("--template", required=True)
    p.add_argument("--config")
    p.add_argument("--n", default="4,8,16,32,64,128")
    p.add_argument("--out")
    p.set_defaults(func=cmd_scale_study)
    p = sub.add_parser("oracle", help="compare SG-ADMM with the centralized oracle")
    p.add_argument("--template", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--resolution", type=float, default=0.01)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("EVCS_EMS_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, *LAYER_ERRORS) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
