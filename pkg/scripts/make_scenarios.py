"""Regenerate the JSON inputs under scenarios/."""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from evcs_ems.config import StationConfig, save_config
from evcs_ems.scenario import desk_scenario, save_scenario

ETA_CP = StationConfig().eta_cp

# identical EVs asking for 50 kW while the station offers 40 kW each; the
# bisection has to open slack until the marginal cost fits under D
SCALE_TEMPLATE = {
    "p_req_kw": 50.0,
    "c_per_ev_kw": 40.0 / ETA_CP,
    "s_min_per_ev_kw": -10.0 / ETA_CP,
    "s_max_per_ev_kw": 20.0 / ETA_CP,
    "max_incentive": 0.05,
    "dj_h": 1.0 / 60.0,
    # replication drift is only visible through the stopping tolerances
    "realtime": {"eps_abs": 1e-6, "eps_rel": 1e-6, "eps_outer": 1e-6, "max_inner": 20000},
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="scenarios")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_scenario(desk_scenario(args.seed), out / "desk.json")
    save_config(StationConfig(), out / "station.json")
    (out / "scale_template.json").write_text(json.dumps(SCALE_TEMPLATE, indent=1))
    (out / "minimal.json").write_text(json.dumps({"dam_price_per_kwh": [0.1] * 24,
                                                       "r_short_per_kwh": [0.15] * 24,
                                                       "r_long_per_kwh": [0.05] * 24}))
    print(f"wrote {sorted(p.name for p in out.iterdir())}")


if __name__ == "__main__":
    main()
