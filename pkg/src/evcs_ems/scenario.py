"""Scenario files: market data, PV ground truth, EV arrivals and bookings.

All series are explicit in the file. Per-period series have one entry per
balancing period, ``pv_truth_kw`` has one entry per real-time step.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config import ConfigError, StationConfig
from .dayahead import InputError, check_quantiles
from .forecast import ForecastParams

PV_LAYERS = ("day_ahead", "intraday", "short_term")
EV_LAYERS = ("day_ahead", "intraday")


class ScenarioError(ConfigError):
    pass


@dataclass(frozen=True)
class EvArrival:
    id: int
    column: int
    arrival_h: float
    departure_h: float
    p_req_kw: float
    energy_kwh: float | None = None  # session ends once delivered; None = until departure
    capacity_kwh: float = 60.0
    cr_ref_per_h: float = 1.0
    cr_slope: float = 0.5


@dataclass(frozen=True)
class Booking:
    id: int
    start_h: float
    end_h: float
    p_max_kw: float


@dataclass
class Scenario:
    dam_price_per_kwh: list[float]
    # signed balancing rates; positive values are costs for short/long energy
    r_short_per_kwh: list[float]
    r_long_per_kwh: list[float]
    pv_truth_kw: list[float] | None = None
    name: str = "scenario"
    period_h: float = 1.0
    id_step_h: float = 0.25
    rt_step_h: float = 1.0 / 60.0
    tariff_peak_per_kwh: float = 0.45
    tariff_offpeak_per_kwh: float = 0.30
    peak_hours: list[list[float]] = field(default_factory=lambda: [[8.0, 20.0]])
    pv_forecast: dict[str, ForecastParams] = field(default_factory=dict)
    ev_forecast: dict[str, ForecastParams] = field(default_factory=dict)
    # explicit day-ahead PV quantiles {"lo", "med", "hi"}; overrides the stub
    pv_day_ahead_kw: dict[str, list[float]] | None = None
    arrivals: list[EvArrival] = field(default_factory=list)
    bookings: list[Booking] = field(default_factory=list)
    soc0_pct: float = 50.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_periods == 0:
            raise ScenarioError("dam_price_per_kwh is empty")
        for key in PV_LAYERS:
            self.pv_forecast.setdefault(key, ForecastParams())
        for key in EV_LAYERS:
            self.ev_forecast.setdefault(key, ForecastParams())
        self.validate()
        if self.pv_truth_kw is None:
            self.pv_truth_kw = [0.0] * self.n_rt

    # -- geometry ----------------------------------------------------------

    @property
    def n_periods(self) -> int:
        return len(self.dam_price_per_kwh)

    @property
    def id_per_period(self) -> int:
        return _ratio(self.period_h, self.id_step_h, "period_h / id_step_h")

    @property
    def rt_per_id(self) -> int:
        return _ratio(self.id_step_h, self.rt_step_h, "id_step_h / rt_step_h")

    @property
    def rt_per_period(self) -> int:
        return self.id_per_period * self.rt_per_id

    @property
    def n_id(self) -> int:
        return self.n_periods * self.id_per_period

    @property
    def n_rt(self) -> int:
        return self.n_periods * self.rt_per_period

    @property
    def day_h(self) -> float:
        return self.n_periods * self.period_h

    def rt_times_h(self) -> np.ndarray:
        return np.arange(self.n_rt) * self.rt_step_h

    # -- derived series ----------------------------------------------------

    def tariff_at(self, t_h: float) -> float:
        peak = any(lo <= t_h % 24.0 < hi for lo, hi in self.peak_hours)
        return self.tariff_peak_per_kwh if peak else self.tariff_offpeak_per_kwh

    def tariff_rt(self) -> np.ndarray:
        return np.array([self.tariff_at(t) for t in self.rt_times_h()])

    def ev_demand_rt(self) -> np.ndarray:
        """Requested EV power at each real-time step (ground truth)."""
        t = self.rt_times_h()
        out = np.zeros(self.n_rt)
        for a in self.arrivals:
            out[(t >= a.arrival_h) & (t < a.departure_h)] += a.p_req_kw
        return out

    def booking_max_rt(self) -> np.ndarray:
        t = self.rt_times_h()
        out = np.zeros(self.n_rt)
        for b in self.bookings:
            out[(t >= b.start_h) & (t < b.end_h)] += b.p_max_kw
        return out

    # -- validation --------------------------------------------------------

    def validate(self, cfg: StationConfig | None = None) -> None:
        n = self.n_periods
        for name in ("period_h", "id_step_h", "rt_step_h"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"{name} must be positive")
        self.rt_per_period  # noqa: B018 - raises on non-integer ratios
        for name in ("dam_price_per_kwh", "r_short_per_kwh", "r_long_per_kwh"):
            _series(getattr(self, name), n, name)
        if self.pv_truth_kw is not None:
            pv = _series(self.pv_truth_kw, self.n_rt, "pv_truth_kw")
            bad = np.flatnonzero(pv < 0)
            if bad.size:
                raise ScenarioError(f"pv_truth_kw[{int(bad[0])}] is negative")
        if self.pv_day_ahead_kw is not None:
            q = self.pv_day_ahead_kw
            if set(q) != {"lo", "med", "hi"}:
                raise ScenarioError("pv_day_ahead_kw needs exactly the keys lo, med, hi")
            arrs = [_series(q[k], n, f"pv_day_ahead_kw.{k}") for k in ("lo", "med", "hi")]
            try:
                check_quantiles(*arrs, "pv_day_ahead_kw")
            except InputError as exc:
                raise ScenarioError(str(exc)) from exc
        for lo, hi in self.peak_hours:
            if not 0.0 <= lo < hi <= 24.0:
                raise ScenarioError(f"peak window [{lo}, {hi}] outside a day")
        if not 0.0 <= self.soc0_pct <= 100.0:
            raise ScenarioError("soc0_pct outside [0, 100]")
        ids = [a.id for a in self.arrivals]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate arrival ids")
        books = {b.id: b for b in self.bookings}
        for k, a in enumerate(self.arrivals):
            where = f"arrivals[{k}] (EV {a.id})"
            if not 0.0 <= a.arrival_h < a.departure_h <= self.day_h:
                raise ScenarioError(f"{where}: need 0 <= arrival < departure <= {self.day_h}")
            if not a.p_req_kw > 0 or a.column < 0:
                raise ScenarioError(f"{where}: p_req_kw must be positive and column >= 0")
            if a.energy_kwh is not None and a.energy_kwh <= 0:
                raise ScenarioError(f"{where}: energy_kwh must be positive")
            b = books.get(a.id)
            if b is None:
                raise ScenarioError(f"{where}: no booking")
            if b.start_h > a.arrival_h or b.end_h < a.departure_h or b.p_max_kw < a.p_req_kw:
                raise ScenarioError(f"{where}: booking does not cover the session")
        if cfg is not None:
            self.check_station(cfg)

    def check_station(self, cfg: StationConfig) -> None:
        """Columns exist and never host more EVs than plugs."""
        for a in self.arrivals:
            if a.column >= cfg.n_columns:
                raise ScenarioError(f"EV {a.id}: column {a.column} but station has "
                                    f"{cfg.n_columns}")
        for c in range(cfg.n_columns):
            events = sorted([(a.arrival_h, 1) for a in self.arrivals if a.column == c]
                            + [(a.departure_h, -1) for a in self.arrivals if a.column == c])
            busy = 0
            for t, d in events:
                busy += d
                if busy > cfg.cps_per_column:
                    raise ScenarioError(f"column {c} over-subscribed at t={t:g} h")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        return out


def _ratio(a: float, b: float, label: str) -> int:
    r = a / b
    k = int(round(r))
    if k < 1 or not math.isclose(r, k, rel_tol=1e-9):
        raise ScenarioError(f"{label} = {r:g} is not a positive integer")
    return k


def _series(values, n: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (n,):
        raise ScenarioError(f"{name} has {arr.size} entries, expected {n}")
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise ScenarioError(f"{name}[{int(bad[0])}] is not finite")
    return arr


def scenario_from_dict(data: dict[str, Any]) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    names = {f.name for f in dataclasses.fields(Scenario)}
    unknown = set(data) - names
    if unknown:
        raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")
    kw = dict(data)
    try:
        kw["arrivals"] = [EvArrival(**a) for a in data.get("arrivals", [])]
        kw["bookings"] = [Booking(**b) for b in data.get("bookings", [])]
        kw["pv_forecast"] = {k: ForecastParams(**v) for k, v in data.get("pv_forecast", {}).items()}
        kw["ev_forecast"] = {k: ForecastParams(**v) for k, v in data.get("ev_forecast", {}).items()}
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc
    for key, layers in (("pv_forecast", PV_LAYERS), ("ev_forecast", EV_LAYERS)):
        extra = set(kw[key]) - set(layers)
        if extra:
            raise ScenarioError(f"{key}: unknown layers {sorted(extra)}")
    if "peak_hours" in kw:
        kw["peak_hours"] = [list(map(float, w)) for w in kw["peak_hours"]]
    try:
        return Scenario(**kw)
    except TypeError as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario(path: str | Path) -> Scenario:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return scenario_from_dict(data)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def save_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(sc.to_dict(), indent=1))


def desk_scenario(seed: int = 7, n_ev: int = 8, n_columns: int = 2) -> Scenario:
    """24 h station day with a midday PV hump and ``n_ev`` short sessions
    spread over ``n_columns`` columns with two plugs each."""
    rng = np.random.default_rng(seed)
    n_periods, rt_step = 24, 1.0 / 60.0
    hours = np.arange(n_periods)
    dam = 0.12 + 0.06 * np.sin((hours - 6) / 24 * 2 * np.pi) + 0.05 * ((hours >= 17) & (hours < 21))
    r_short = 1.3 * dam + 0.02
    r_long = 0.6 * dam
    t = np.arange(n_periods * 60) * rt_step
    clear = np.clip(np.sin((t - 6.0) / 14.0 * np.pi), 0.0, None) * 120.0
    clouds = 1.0 - 0.25 * np.clip(np.convolve(rng.standard_normal(t.size), np.ones(30) / 30,
                                               mode="same") * 3.0, 0.0, 1.0)
    pv = np.round(clear * clouds, 3)
    arrivals, bookings = [], []
    slots = [[0.0, 0.0] for _ in range(n_columns)]  # plug free-times per column
    starts = np.sort(rng.uniform(6.0, 21.0, n_ev))
    for i, start in enumerate(starts):
        col = i % n_columns
        plug = int(np.argmin(slots[col]))
        arrival = float(np.round(max(start, slots[col][plug]), 2))
        duration = float(np.round(rng.uniform(0.5, 1.5), 2))
        departure = min(arrival + duration, 24.0)
        p_req = float(np.round(rng.uniform(40.0, 110.0), 1))
        slots[col][plug] = departure
        arrivals.append(EvArrival(i, col, arrival, departure, p_req,
                                  capacity_kwh=float(rng.choice([50.0, 60.0, 80.0]))))
        bookings.append(Booking(i, arrival, departure, min(150.0, p_req * 1.2)))
    return Scenario(
        dam_price_per_kwh=np.round(dam, 5).tolist(), r_short_per_kwh=np.round(r_short, 5).tolist(),
        r_long_per_kwh=np.round(r_long, 5).tolist(), pv_truth_kw=pv.tolist(), name="desk",
        rt_step_h=rt_step,
        pv_forecast={"day_ahead": ForecastParams(0.05, 0.3), "intraday": ForecastParams(0.02, 0.15),
                     "short_term": ForecastParams(0.0, 0.05)},
        ev_forecast={"day_ahead": ForecastParams(0.0, 0.3), "intraday": ForecastParams(0.0, 0.1)},
        arrivals=arrivals, bookings=bookings, seed=seed)
