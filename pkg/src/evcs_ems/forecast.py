"""Stub forecasters.

Real forecasters are out of scope; these produce quantile bands from the
ground truth so that forecast error is a controlled scenario parameter.
"""
from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

_Z_REF = NormalDist().inv_cdf(0.95)  # two-sided 90 % band


@dataclass(frozen=True)
class ForecastParams:
    bias: float = 0.0  # fractional shift of the median
    width: float = 0.0  # full band width as a fraction of the median, at level 0.9
    level: float = 0.9
    noise: float = 0.0  # std of multiplicative median noise, drawn from the scenario RNG

    def __post_init__(self) -> None:
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if self.width < 0.0 or self.noise < 0.0:
            raise ValueError("width and noise must be non-negative")


def band_scale(level: float) -> float:
    """Half-width multiplier relative to the reference 90 % band."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    return NormalDist().inv_cdf(0.5 + 0.5 * level) / _Z_REF


def quantile_forecast(truth, params: ForecastParams, rng: np.random.Generator | None = None,
                      nonneg: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(lower, median, upper)`` around a shifted truth.

    With ``width = w`` at the reference level the band is
    ``median * (1 -/+ w/2)``; other levels scale the half-width with the
    normal quantile ratio.
    """
    truth = np.asarray(truth, dtype=float)
    med = truth * (1.0 + params.bias)
    if params.noise > 0.0 and rng is not None:
        med = med * (1.0 + params.noise * rng.standard_normal(truth.shape))
    if nonneg:
        med = np.maximum(med, 0.0)
    half = 0.5 * params.width * np.abs(med) * band_scale(params.level)
    lo, hi = med - half, med + half
    if nonneg:
        lo = np.maximum(lo, 0.0)
    return lo, med, hi


def persistence(series, j: int) -> float:
    """Last measurement before step ``j``; the first step reuses step 0."""
    series = np.asarray(series, dtype=float)
    if not 0 <= j < len(series):
        raise IndexError(f"step {j} outside series of length {len(series)}")
    return float(series[max(j - 1, 0)])


def block_mean(series, factor: int) -> np.ndarray:
    """Average consecutive blocks of ``factor`` samples."""
    series = np.asarray(series, dtype=float)
    if factor < 1 or len(series) % factor:
        raise ValueError(f"length {len(series)} is not a multiple of {factor}")
    return series.reshape(-1, factor).mean(axis=1)
