"""Battery models: lossy-bucket power conversion, SoC dynamics and
stress-factor cycling degradation.

Sign convention everywhere: battery-side power is positive when charging.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .config import BessParams, StressCoefficients


class StressDomainError(ValueError):
    pass


@dataclass(frozen=True)
class BessState:
    soc_pct: float
    fec_accum: float = 0.0


@dataclass(frozen=True)
class SocStep:
    state: BessState
    violation: bool


def bess_ac_power(p_batt_kw: float, params: BessParams) -> float:
    """AC-bus power drawn (positive) or delivered (negative) for a given
    battery-side power."""
    if p_batt_kw >= 0.0:
        return p_batt_kw / (params.eta_inv * params.eta_ch)
    return p_batt_kw * params.eta_inv * params.eta_dh


def bess_batt_power(p_ac_kw: float, params: BessParams) -> float:
    """Inverse of :func:`bess_ac_power`."""
    if p_ac_kw >= 0.0:
        return p_ac_kw * params.eta_inv * params.eta_ch
    return p_ac_kw / (params.eta_inv * params.eta_dh)


def soc_step(state: BessState, p_batt_kw: float, dt_h: float, params: BessParams) -> SocStep:
    if dt_h <= 0.0:
        raise ValueError("dt_h must be positive")
    soc = state.soc_pct + 100.0 * p_batt_kw * dt_h / params.capacity_kwh
    fec = state.fec_accum + abs(p_batt_kw) * dt_h / (2.0 * params.capacity_kwh)
    violation = soc < params.soc_min_pct - 1e-9 or soc > params.soc_max_pct + 1e-9
    return SocStep(BessState(soc, fec), violation)


# -- stress factors ---------------------------------------------------------

def sf_soc(soc_pct: float, c: StressCoefficients) -> float:
    return math.exp(c.soc_k_per_pct * (soc_pct - c.soc_ref_pct))


def sf_temp(temp_c: float, c: StressCoefficients) -> float:
    t, t_ref = temp_c + 273.15, c.temp_ref_c + 273.15
    return math.exp(-c.temp_activation_k * (1.0 / t - 1.0 / t_ref))


def sf_dod(dod_pct: float, c: StressCoefficients) -> float:
    x = dod_pct / c.dod_ref_pct
    return 1.0 + c.dod_lin * (x - 1.0) + c.dod_quad * (x * x - 1.0)


def sf_cr(c_rate: float, c: StressCoefficients) -> float:
    return 1.0 + c.cr_slope * (c_rate / c.cr_ref_per_h - 1.0)


def stress_factor(soc_avg: float, temp: float, dod: float, c_rate: float,
                  coeffs: StressCoefficients) -> float:
    if not 0.0 <= soc_avg <= 100.0:
        raise StressDomainError(f"SoC {soc_avg}% outside [0, 100]")
    if not 0.0 <= dod <= 100.0:
        raise StressDomainError(f"DoD {dod}% outside [0, 100]")
    if not 0.0 <= c_rate <= coeffs.cr_max_per_h:
        raise StressDomainError(f"C-rate {c_rate}/h outside [0, {coeffs.cr_max_per_h}]")
    if not -40.0 <= temp <= 80.0:
        raise StressDomainError(f"temperature {temp} C outside [-40, 80]")
    return (sf_soc(soc_avg, coeffs) * sf_temp(temp, coeffs)
            * sf_dod(dod, coeffs) * sf_cr(c_rate, coeffs))


def degradation_cost(p_profile: Sequence[tuple[float, float]], soc_path: Sequence[float],
                     coeffs: StressCoefficients, params: BessParams) -> float:
    """Cycling-degradation cost of a power profile.

    ``p_profile`` holds ``(p_batt_kw, dt_h)`` pairs and ``soc_path`` the SoC
    at the step boundaries (one more entry than the profile). The stress
    variables are averaged per step (mean SoC, SoC swing as DoD, |p|/C_B as
    C-rate) so the cost of a profile is the sum of its per-step costs.
    """
    if len(p_profile) == 0:
        return 0.0
    if len(soc_path) != len(p_profile) + 1:
        raise ValueError("soc_path must have one entry per step boundary")
    cap = params.capacity_kwh
    per_fec = params.d_ref_pct_per_fec / params.d_eol_pct * cap * params.price_per_kwh
    total = 0.0
    for (p, dt), s0, s1 in zip(p_profile, soc_path[:-1], soc_path[1:]):
        if p == 0.0:
            continue
        n_fec = abs(p) * dt / (2.0 * cap)
        sf = stress_factor(0.5 * (s0 + s1), coeffs.temp_c, abs(s1 - s0), abs(p) / cap, coeffs)
        total += per_fec * sf * n_fec
    return total


def profile_soc_path(soc0: float, p_profile: Iterable[tuple[float, float]],
                     params: BessParams) -> list[float]:
    path = [soc0]
    for p, dt in p_profile:
        path.append(path[-1] + 100.0 * p * dt / params.capacity_kwh)
    return path


def throughput_cost_per_kwh(params: BessParams, coeffs: StressCoefficients) -> float:
    """Linearized degradation cost per kWh of battery-side throughput.

    Uses the stress factor at the reference operating point, which is what
    the convex day-ahead and intraday programs price |P_B|*dt with.
    """
    sf_nominal = (sf_soc(coeffs.soc_ref_pct, coeffs) * sf_temp(coeffs.temp_c, coeffs)
                  * sf_dod(coeffs.dod_ref_pct, coeffs) * sf_cr(coeffs.cr_ref_per_h, coeffs))
    return (params.d_ref_pct_per_fec * sf_nominal / (2.0 * params.d_eol_pct)
            * params.price_per_kwh)
