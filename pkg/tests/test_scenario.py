import json
from pathlib import Path

import numpy as np
import pytest

from evcs_ems.config import StationConfig, load_config
from evcs_ems.scenario import (Booking, EvArrival, ScenarioError, desk_scenario, load_scenario,
                               save_scenario, scenario_from_dict)

ROOT = Path(__file__).resolve().parents[1]


def minimal(**kw):
    data = {"dam_price_per_kwh": [0.1] * 24, "r_short_per_kwh": [0.15] * 24,
            "r_long_per_kwh": [0.05] * 24}
    data.update(kw)
    return scenario_from_dict(data)


def test_minimal_file_loads_with_defaults():
    sc = load_scenario(ROOT / "scenarios" / "minimal.json")
    assert sc.n_periods == 24 and sc.n_rt == 24 * 60 and sc.n_id == 96
    assert np.all(np.asarray(sc.pv_truth_kw) == 0.0)
    assert sc.arrivals == [] and sc.seed == 0
    sc.validate(StationConfig())


def test_shipped_files_validate():
    cfg = load_config(ROOT / "scenarios" / "station.json")
    load_scenario(ROOT / "scenarios" / "desk.json").validate(cfg)


def test_round_trip(tmp_path):
    sc = desk_scenario(n_ev=4)
    save_scenario(sc, tmp_path / "s.json")
    back = load_scenario(tmp_path / "s.json")
    assert back.to_dict() == sc.to_dict()


def test_bm_rates_required():
    with pytest.raises(ScenarioError):
        scenario_from_dict({"dam_price_per_kwh": [0.1] * 24})


def test_rejects_unordered_quantiles_naming_period():
    q = {"lo": [0.0] * 24, "med": [1.0] * 24, "hi": [2.0] * 24}
    q["lo"][5] = 3.0
    with pytest.raises(ScenarioError, match="period 5"):
        minimal(pv_day_ahead_kw=q).validate()


def test_unknown_key_rejected():
    with pytest.raises(ScenarioError, match="unknown"):
        minimal(pv_truth=[0.0])


def test_bad_json_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"dam_price_per_kwh": [0.1,\n ]}')
    with pytest.raises(ScenarioError, match=r"bad\.json:2:"):
        load_scenario(p)


def test_session_without_booking_rejected():
    with pytest.raises(ScenarioError, match="no booking"):
        minimal(arrivals=[{"id": 1, "column": 0, "arrival_h": 1.0, "departure_h": 2.0,
                           "p_req_kw": 50.0}]).validate()


def test_over_subscribed_column():
    arr = [EvArrival(i, 0, 1.0, 2.0, 50.0) for i in range(3)]
    book = [Booking(i, 1.0, 2.0, 60.0) for i in range(3)]
    sc = minimal()
    sc.arrivals, sc.bookings = arr, book
    with pytest.raises(ScenarioError, match="over-subscribed"):
        sc.validate(StationConfig())


def test_time_grids_must_tile():
    with pytest.raises(ScenarioError):
        minimal(id_step_h=0.3)


def test_tariff_peak_window():
    sc = minimal()
    assert sc.tariff_at(9.0) == sc.tariff_peak_per_kwh
    assert sc.tariff_at(3.0) == sc.tariff_offpeak_per_kwh


def test_desk_scenario_deterministic():
    assert json.dumps(desk_scenario().to_dict()) == json.dumps(desk_scenario().to_dict())
