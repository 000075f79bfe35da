import json
from pathlib import Path

import pytest

from evcs_ems.cli import main

ROOT = Path(__file__).resolve().parents[1]
SC = ROOT / "scenarios"


def test_da_plan_prints_json(capsys):
    assert main(["da-plan", "--scenario", str(SC / "minimal.json")]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert len(plan["p_dp_grid_kw"]) == 24


def test_id_refine_and_rt_step_write_files(tmp_path):
    args = ["--scenario", str(SC / "desk.json"), "--config", str(SC / "station.json"),
            "--out", str(tmp_path)]
    assert main(["id-refine", "--at", "12", *args]) == 0
    rec = json.loads((tmp_path / "intraday_12.json").read_text())
    assert rec["period"] == 12 and "budget" in rec
    assert main(["rt-step", "--at", "700", *args]) in (0, 1)
    step = json.loads((tmp_path / "rt_step_700.json").read_text())
    assert step["step"] == 700


def test_simulate_writes_report(tmp_path, capsys):
    code = main(["simulate", "--scenario", str(SC / "minimal.json"), "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "report.json").exists() and (tmp_path / "settlement.csv").exists()
    assert capsys.readouterr().out.startswith("complete")


def test_oracle_command(tmp_path):
    code = main(["oracle", "--template", str(SC / "scale_template.json"), "--n", "2",
                 "--out", str(tmp_path)])
    out = json.loads((tmp_path / "oracle.json").read_text())
    assert code == 0 and out["max_gap_kw"] <= 1e-3


def test_scale_study_command(capsys):
    assert main(["scale-study", "--template", str(SC / "scale_template.json"), "--n", "2,4"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 3


def test_bad_scenario_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["da-plan", "--scenario", str(bad)]) == 2


def test_out_of_range_step():
    with pytest.raises(SystemExit):
        main(["rt-step", "--scenario", str(SC / "minimal.json"), "--at", "99999"])
