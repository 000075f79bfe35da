import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evcs_ems.config import BessParams, StationConfig, replace
from evcs_ems.dayahead import InputError
from evcs_ems.intraday import (FlexibilityInfeasible, IntradayInputs, Window, budget_bounds,
                               grid_power_budget, incentive_cap, max_incentive, refine_window,
                               shrink_horizon, upsample_short_term)
from evcs_ems.oracle import enumerate_id

SMALL = StationConfig(grid_limit_kw=200, bess=BessParams(capacity_kwh=100, c_rate_max_per_h=0.5))


def toy(**kw):
    base = dict(
        dt_h=1.0, steps_per_period=1,
        ev_max=np.array([60, 80, 40, 50, 70, 30.]), ev_exp=np.array([40, 50, 20, 30, 50, 10.]),
        pv_lo=np.array([0, 10, 30, 20, 5, 0.]), pv_med=np.array([5, 20, 40, 30, 10, 0.]),
        pv_hi=np.array([10, 30, 50, 40, 20, 0.]),
        r_short=np.array([0.3, 0.5, 0.2, 0.4, 0.6, 0.3]),
        r_long=np.array([0.05, 0.02, 0.1, 0.05, 0.0, 0.05]),
        tariff=np.array([0.4, 0.4, 0.4, 0.6, 0.6, 0.4]), p_dp_kw=np.array([30, 50, 0, 10, 60, 10.]),
        soc0_pct=50.0, soc_dp_first_pct=55.0, soc_dp_end_pct=50.0)
    base.update(kw)
    return IntradayInputs(**base)


def quarter_toy():
    """Two balancing periods at four intraday steps each."""
    rep = lambda a: np.repeat(np.asarray(a, float), 4)  # noqa: E731
    return IntradayInputs(0.25, 4, rep([60, 80]), rep([40, 50]), rep([0, 10]), rep([5, 20]),
                          rep([10, 30]), np.array([0.3, 0.5]), np.array([0.05, 0.02]),
                          rep([0.4, 0.4]), np.array([30, 50.]), 50.0, 52.0, 50.0)


def test_budget_example():
    cfg = StationConfig()
    lo, hi = budget_bounds(100.0, 10.0, 20.0, -50.0, 30.0, 60.0, cfg)
    # (-50 + 90/0.95 - 60*0.97)/0.98 evaluates to -13.738
    assert float(lo) == pytest.approx(-13.7379, abs=1e-3)
    assert float(hi) == pytest.approx(48.17, abs=1e-2)


def test_degenerate_band_has_zero_slacks():
    cfg = replace(SMALL, **{"intraday.flexibility_ratio": 0.0})
    res = refine_window(toy(), cfg)
    np.testing.assert_allclose(res.s_plus_kw, 0.0, atol=1e-4)
    np.testing.assert_allclose(res.s_minus_kw, 0.0, atol=1e-4)


@pytest.mark.parametrize("tau", [0.1, 0.2, 0.4])
def test_slack_chain_and_width(tau):
    cfg = replace(SMALL, **{"intraday.flexibility_ratio": tau})
    inp = toy()
    r = refine_window(inp, cfg)
    tol = 1e-3
    assert np.all(r.p_ev_kw - r.s_minus_kw >= -tol)
    assert np.all(r.p_ev_kw - r.s_minus_kw <= inp.ev_exp + tol)
    assert np.all(r.p_ev_kw + r.s_plus_kw >= inp.ev_exp - tol)
    assert np.all(r.p_ev_kw + r.s_plus_kw <= inp.ev_max + tol)
    width = ((r.s_plus_kw + r.s_minus_kw) / cfg.eta_cp
             + (inp.pv_hi - inp.pv_lo) * cfg.eta_pv)
    need = tau * (r.p_grid_mean_kw * cfg.eta_tr - r.p_bess_ac_kw)
    assert np.all(width >= need - tol)
    assert np.all(r.p_grid_lo_kw >= -cfg.grid_limit_kw - tol)
    assert np.all(r.p_grid_hi_kw <= cfg.grid_limit_kw + tol)


def test_slack_weight_read_from_config():
    inp = toy()
    a = refine_window(inp, replace(SMALL, **{"intraday.slack_weight": 1.0}))
    b = refine_window(inp, replace(SMALL, **{"intraday.slack_weight": 3.0}))
    for r, w in ((a, 1.0), (b, 3.0)):
        s = r.s_plus_kw + r.s_minus_kw + (r.s_plus_kw - r.s_minus_kw) ** 2
        assert r.costs["slack"] == pytest.approx(w * s.sum(), rel=1e-9)


def test_energy_balance_per_period():
    cfg = SMALL
    inp = quarter_toy()
    r = refine_window(inp, cfg)
    for k in range(inp.n_periods):
        sl = slice(4 * k, 4 * k + 4)
        e = np.sum(r.p_grid_mean_kw[sl]) * inp.dt_h - r.e_plus_kwh[k] + r.e_minus_kwh[k]
        assert e == pytest.approx(inp.p_dp_kw[k] * inp.period_h, abs=1e-3)


def test_matches_enumeration():
    inp = toy()
    r = refine_window(inp, SMALL)
    ref = enumerate_id(inp, SMALL)
    assert r.objective <= ref.objective + 1e-6
    assert abs(r.objective - ref.objective) <= 5e-3 * abs(ref.objective)


def test_infeasible_names_step():
    # a 1 kW connection cannot absorb the charging demand at any step
    inp = toy(ev_max=np.array([60, 80, 0, 50, 70, 30.]), ev_exp=np.array([40, 50, 0, 30, 50, 10.]),
              pv_lo=np.array([0, 10, 0, 20, 5, 0.]), pv_med=np.array([5, 20, 0, 30, 10, 0.]),
              pv_hi=np.array([10, 30, 0, 40, 20, 0.]))
    cfg = replace(SMALL, grid_limit_kw=1.0)
    with pytest.raises(FlexibilityInfeasible) as exc:
        refine_window(inp, cfg)
    assert exc.value.step is not None
    assert f"step {exc.value.step}" in str(exc.value)


def test_rejects_negative_bm_sum():
    with pytest.raises(InputError, match="period 1"):
        toy(r_short=np.array([0.3, -0.5, 0.2, 0.4, 0.6, 0.3]))


@given(st.floats(0.0, 50.0), st.floats(0.0, 50.0))
def test_budget_width_grows_with_pv_band(w1, extra):
    cfg = StationConfig()
    lo1, hi1 = budget_bounds(80.0, 5.0, 5.0, 10.0, 40.0 - w1, 40.0 + w1, cfg)
    lo2, hi2 = budget_bounds(80.0, 5.0, 5.0, 10.0, 40.0 - w1 - extra, 40.0 + w1 + extra, cfg)
    assert hi2 - lo2 >= hi1 - lo1 - 1e-9


def test_upsample_with_identical_quantiles_repeats_budget():
    cfg = SMALL
    inp = quarter_toy()
    r = refine_window(inp, cfg)
    lo, hi = grid_power_budget(r, cfg)
    rep = 15
    q = [np.repeat(a[:4], rep) for a in (inp.pv_lo, inp.pv_med, inp.pv_hi)]
    b = upsample_short_term(r, *q, cfg)
    assert b.dj_h == pytest.approx(inp.dt_h / rep)
    np.testing.assert_allclose(b.p_lo_kw, np.repeat(lo[:4], rep), atol=1e-12)
    np.testing.assert_allclose(b.p_hi_kw, np.repeat(hi[:4], rep), atol=1e-12)
    np.testing.assert_allclose(b.long_lo_kw, lo[4:], atol=1e-12)


def test_upsample_at_intraday_step_is_identity():
    cfg = SMALL
    inp = quarter_toy()
    r = refine_window(inp, cfg)
    lo, hi = grid_power_budget(r, cfg)
    b = upsample_short_term(r, inp.pv_lo[:4], inp.pv_med[:4], inp.pv_hi[:4], cfg)
    np.testing.assert_array_equal(b.p_lo_kw, lo[:4])
    np.testing.assert_array_equal(b.p_hi_kw, hi[:4])


def test_upsample_rejects_untiled_length():
    r = refine_window(quarter_toy(), SMALL)
    with pytest.raises(InputError):
        upsample_short_term(r, np.zeros(7), np.zeros(7), np.zeros(7), SMALL)


def test_incentive_cap_example():
    assert incentive_cap(100.0, 80.0, 1.0, 0.5, 10.0, 0.0, 0.2, 0.05, 0.1) == pytest.approx(0.08)


def test_incentive_cap_floor_and_zero_energy():
    assert incentive_cap(100.0, 120.0, 1.0, 0.5, 0.0, 0.0, 0.2, 0.05, 0.0) == 0.0
    assert incentive_cap(0.0, 80.0, 1.0, 0.5, 10.0, 0.0, 0.2, 0.05, 0.1) == pytest.approx(0.05)


def test_max_incentive_uses_first_period():
    r = refine_window(quarter_toy(), SMALL)
    inp = r.inputs
    e = float(np.sum(r.p_ev_kw[:4]) * inp.dt_h)
    expect = incentive_cap(e, 35.0, 1.0, 0.4, float(r.e_plus_kwh[0]), float(r.e_minus_kwh[0]),
                           0.3, 0.05, 0.1)
    assert max_incentive(r, 35.0, 0.4, 0.1) == pytest.approx(expect)


def test_shrink_horizon():
    assert shrink_horizon(Window(20, 28), 24) == Window(20, 24)
    assert shrink_horizon(Window(3, 11), 24) == Window(3, 11)
    w = shrink_horizon(Window(24, 32), 24)
    assert w.empty and len(w) == 0
