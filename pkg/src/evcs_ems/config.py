"""Station configuration and hyperparameters.

Every section is a frozen dataclass. Files are JSON with units in field
names; :func:`load_config` fills missing keys with the defaults below and
rejects unknown keys.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised when a config or scenario file violates its schema."""


@dataclass(frozen=True)
class StressCoefficients:
    """Parameters of the four multiplicative stress-factor curves.

    The curve families are placeholders for the empirical fits of the
    cycling-aging literature: SoC exponential, temperature Arrhenius,
    DoD quadratic in DoD/DoD_ref, C-rate linear in Cr/Cr_ref. Each curve
    is exactly 1 at its reference point; the defaults make all of them
    identically 1.
    """

    soc_ref_pct: float = 50.0
    soc_k_per_pct: float = 0.0
    temp_ref_c: float = 25.0
    temp_activation_k: float = 0.0  # Ea/R in kelvin
    temp_c: float = 25.0  # operating temperature, held constant
    dod_ref_pct: float = 100.0
    dod_lin: float = 0.0
    dod_quad: float = 0.0
    cr_ref_per_h: float = 1.0
    cr_slope: float = 0.0
    cr_max_per_h: float = 10.0

    def __post_init__(self) -> None:
        if self.dod_ref_pct <= 0 or self.cr_ref_per_h <= 0 or self.cr_max_per_h <= 0:
            raise ConfigError("stress reference points must be positive")
        # DoD and C-rate curves are polynomials; check positivity on the domain.
        x_max = 100.0 / self.dod_ref_pct
        xs = [0.0, x_max]
        if self.dod_quad != 0.0:
            xv = -self.dod_lin / (2.0 * self.dod_quad)
            if 0.0 < xv < x_max:
                xs.append(xv)
        for x in xs:
            if 1.0 + self.dod_lin * (x - 1.0) + self.dod_quad * (x * x - 1.0) <= 0.0:
                raise ConfigError(f"SF_DoD is not positive at DoD={x * self.dod_ref_pct:g}%")
        for cr in (0.0, self.cr_max_per_h):
            if 1.0 + self.cr_slope * (cr / self.cr_ref_per_h - 1.0) <= 0.0:
                raise ConfigError(f"SF_Cr is not positive at C-rate={cr:g}/h")


@dataclass(frozen=True)
class BessParams:
    capacity_kwh: float = 500.0
    eta_inv: float = 0.98
    eta_ch: float = 0.97
    eta_dh: float = 0.97
    soc_min_pct: float = 10.0
    soc_max_pct: float = 90.0
    c_rate_max_per_h: float = 0.5
    d_ref_pct_per_fec: float = 0.01
    d_eol_pct: float = 20.0
    price_per_kwh: float = 250.0

    def __post_init__(self) -> None:
        for name in ("eta_inv", "eta_ch", "eta_dh"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name}={v} outside (0, 1]")
        if not 0.0 <= self.soc_min_pct < self.soc_max_pct <= 100.0:
            raise ConfigError("need 0 <= soc_min_pct < soc_max_pct <= 100")
        if self.capacity_kwh <= 0 or self.d_eol_pct <= 0 or self.c_rate_max_per_h <= 0:
            raise ConfigError("capacity_kwh, d_eol_pct and c_rate_max_per_h must be positive")

    @property
    def p_max_kw(self) -> float:
        return self.capacity_kwh * self.c_rate_max_per_h


@dataclass(frozen=True)
class SolverSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-4
    max_iter: int = 50_000


@dataclass(frozen=True)
class DayAheadSettings:
    speculation_factor: float = 0.8
    # End-of-day SoC must not fall below the initial SoC (otherwise the
    # plan would sell the battery content for free).
    terminal_soc_at_least_initial: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.speculation_factor <= 1.0:
            raise ConfigError("speculation_factor must lie in (0, 1]")


@dataclass(frozen=True)
class IntradaySettings:
    slack_weight: float = 1.0  # b
    soc_tracking_weight: float = 0.01  # c
    flexibility_ratio: float = 0.2  # tau
    window_periods: int = 8

    def __post_init__(self) -> None:
        if not 0.0 <= self.flexibility_ratio <= 1.0:
            raise ConfigError("flexibility_ratio (tau) must lie in [0, 1]")
        if self.window_periods < 1:
            raise ConfigError("window_periods must be >= 1")


@dataclass(frozen=True)
class SgAdmmHyper:
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 1.0
    delta: float = 1.0
    rho0: float = 1.0
    tau_rho: float = 2.0
    mu: float = 10.0
    eps_abs: float = 1e-4
    eps_rel: float = 1e-3
    eps_outer: float = 1e-3
    max_inner: int = 500
    max_outer: int = 30
    incentive_aggregation: str = "mean"  # "mean" | "max"
    slack_tol_kw: float = 1e-3
    # "exact" minimizes the augmented Lagrangian over s_CC (keeps mu/rho);
    # "plain" is max(0, P_CC - sum p) regardless of mu.
    cc_slack_rule: str = "exact"
    # "aggregate" uses rho*sum(dp)/eta_cp as the power part of the dual
    # residual; "per_ev" appends rho*dp_i/eta_cp for every EV, which also
    # catches power shifting between EVs at a constant total. The aggregate
    # vector is a sub-vector of the per-EV one, so passing the per-EV test
    # implies passing the aggregate one.
    dual_residual: str = "per_ev"
    # "analytic" minimizes each quadratic piece of the follower cost in
    # closed form; "brent" runs the generic bracketed scalar search.
    follower_solver: str = "analytic"
    # weight of (w/2)(p_i - p_i(t))^2 in the follower update, in units of
    # rho*(N-1)/eta_cp^2; 0 gives the plain sequential update, which
    # cycles on large fleets whose costs are linear above P_req
    prox_scale: float = 0.5
    # also require the leader slack to have stopped moving before the
    # Lagrangian test may end the outer loop
    outer_requires_stable_slack: bool = True

    def __post_init__(self) -> None:
        if self.tau_rho <= 1.0 or self.mu <= 1.0:
            raise ConfigError("tau_rho and mu must exceed 1")
        if min(self.eps_abs, self.eps_rel, self.eps_outer, self.rho0) <= 0.0:
            raise ConfigError("tolerances and rho0 must be positive")
        if self.incentive_aggregation not in ("mean", "max"):
            raise ConfigError("incentive_aggregation must be 'mean' or 'max'")
        if self.cc_slack_rule not in ("exact", "plain"):
            raise ConfigError("cc_slack_rule must be 'exact' or 'plain'")
        if self.dual_residual not in ("aggregate", "per_ev"):
            raise ConfigError("dual_residual must be 'aggregate' or 'per_ev'")
        if self.follower_solver not in ("analytic", "brent"):
            raise ConfigError("follower_solver must be 'analytic' or 'brent'")
        if self.prox_scale < 0.0:
            raise ConfigError("prox_scale must be non-negative")


@dataclass(frozen=True)
class StationConfig:
    grid_limit_kw: float = 400.0
    eta_tr: float = 0.98
    eta_pv: float = 0.97
    eta_cp: float = 0.95
    n_columns: int = 2
    column_power_kw: float = 150.0
    cps_per_column: int = 2
    cp_power_kw: float = 150.0
    discount_cap_fraction: float = 0.1  # a
    bess: BessParams = field(default_factory=BessParams)
    stress: StressCoefficients = field(default_factory=StressCoefficients)
    solver: SolverSettings = field(default_factory=SolverSettings)
    day_ahead: DayAheadSettings = field(default_factory=DayAheadSettings)
    intraday: IntradaySettings = field(default_factory=IntradaySettings)
    realtime: SgAdmmHyper = field(default_factory=SgAdmmHyper)

    def __post_init__(self) -> None:
        for name in ("eta_tr", "eta_pv", "eta_cp"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name}={v} outside (0, 1]")
        if self.grid_limit_kw <= 0 or self.column_power_kw <= 0 or self.cp_power_kw <= 0:
            raise ConfigError("grid_limit_kw, column_power_kw and cp_power_kw must be positive")
        if not 0.0 <= self.discount_cap_fraction <= 1.0:
            raise ConfigError("discount_cap_fraction must lie in [0, 1]")


def from_dict(cls: type, data: dict[str, Any], where: str = "") -> Any:
    """Build a (possibly nested) dataclass from plain JSON data."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = from_dict(tp, value, f"{where}.{key}" if where else key)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def to_dict(obj: Any) -> dict[str, Any]:
    return dataclasses.asdict(obj)


def load_config(path: str | Path | None) -> StationConfig:
    if path is None:
        return StationConfig()
    with open(path) as fh:
        data = json.load(fh)
    return from_dict(StationConfig, data)


def save_config(cfg: StationConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2))


def replace(obj: Any, **changes: Any) -> Any:
    """``dataclasses.replace`` that also accepts dotted keys, e.g. ``realtime.beta``."""
    nested: dict[str, dict[str, Any]] = {}
    flat = {}
    for key, value in changes.items():
        head, _, rest = key.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            flat[key] = value
    for head, sub in nested.items():
        flat[head] = replace(getattr(obj, head), **sub)
    return dataclasses.replace(obj, **flat)
