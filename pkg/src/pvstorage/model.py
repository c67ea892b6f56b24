"""Domain parameters and the deterministic seasonal formulas.

Time is measured in hours throughout the package (horizon ``T = 24``).
Rates quoted per day are converted on ingestion with :func:`per_day` and
:func:`per_sqrt_day`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DegenerateParameters

HOURS_PER_DAY = 24.0


def per_day(rate: float) -> float:
    """Convert a mean-reversion speed from 1/day to 1/hour."""
    return rate / HOURS_PER_DAY


def per_sqrt_day(vol: float) -> float:
    """Convert a volatility from 1/sqrt(day) to 1/sqrt(hour)."""
    return vol / math.sqrt(HOURS_PER_DAY)


@dataclass(frozen=True)
class SeasonalSpec:
    """Exponential-harmonic daily profile ``exp(c + sum a_i sin + b_i cos)``.

    ``harmonics`` holds ``(frequency [1/h], sine amplitude, cosine amplitude)``
    triples.
    """

    intercept: float = 0.0
    harmonics: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self):
        freqs = [h[0] for h in self.harmonics]
        if any(not f > 0 for f in freqs):
            raise ValueError("harmonic frequencies must be strictly positive")
        if len(set(freqs)) != len(freqs):
            raise ValueError("harmonic frequencies must be distinct")
        object.__setattr__(
            self, "harmonics", tuple(tuple(float(v) for v in h) for h in self.harmonics)
        )

    @property
    def frequencies(self) -> tuple[float, ...]:
        return tuple(h[0] for h in self.harmonics)

    def log_curve(self, t):
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, float(self.intercept))
        for freq, a, b in self.harmonics:
            w = 2.0 * np.pi * freq * t
            out = out + a * np.sin(w) + b * np.cos(w)
        return out

    def with_intercept(self, intercept: float) -> "SeasonalSpec":
        return replace(self, intercept=float(intercept))


@dataclass(frozen=True)
class PvSeasonalSpec:
    amplitude: float
    frequency: float = 1.0 / 24.0
    phase: float = 18.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("PV amplitude must be non-negative")
        if not self.frequency > 0:
            raise ValueError("PV frequency must be positive")


@dataclass(frozen=True)
class OuParams:
    xi: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.xi < 0 or self.sigma < 0:
            raise ValueError("OU mean reversion and volatility must be >= 0")


@dataclass(frozen=True)
class BatterySpec:
    eta_c: float
    eta_d: float
    max_charge: float
    max_discharge: float
    soc_min: float
    soc_max: float

    def __post_init__(self):
        if not (0 < self.eta_c <= 1 and 0 < self.eta_d <= 1):
            raise ValueError("efficiencies must lie in (0, 1]")
        if not (self.max_charge > 0 and self.max_discharge > 0):
            raise ValueError("power limits must be positive")
        if not self.soc_min < self.soc_max:
            raise ValueError("soc_min must be below soc_max")

    def parallel(self, count: int) -> "BatterySpec":
        """``count`` identical units wired in parallel act as one larger unit."""
        if count < 1:
            raise ValueError("count must be >= 1")
        return replace(
            self,
            max_charge=self.max_charge * count,
            max_discharge=self.max_discharge * count,
            soc_min=self.soc_min * count,
            soc_max=self.soc_max * count,
        )


def _identity3() -> tuple[tuple[float, ...], ...]:
    return ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


@dataclass(frozen=True)
class ModelConfig:
    """Every parameter of the control problem.

    Component order for the stochastic factors is (price, demand, pv)
    everywhere, including ``noise_correlation`` (a lower-triangular factor
    ``L``; the instantaneous noise covariance is ``diag(sigma) L L^T diag(sigma)``).
    """

    price_seasonal: SeasonalSpec
    demand_seasonal: SeasonalSpec
    pv_seasonal: PvSeasonalSpec
    battery: BatterySpec
    price_ou: OuParams = OuParams()
    demand_ou: OuParams = OuParams()
    pv_ou: OuParams = OuParams()
    noise_correlation: tuple[tuple[float, ...], ...] = field(default_factory=_identity3)
    incentive: float = 0.0
    discount: float = 0.0
    fixed_log_price: float = 0.0
    fixed_log_demand: float = 0.0
    horizon: float = HOURS_PER_DAY
    start: float = 0.0

    def __post_init__(self):
        if self.incentive < 0:
            raise ValueError("incentive Z must be >= 0")
        if self.discount < 0:
            raise ValueError("discount rate must be >= 0")
        if not self.horizon > self.start:
            raise ValueError("horizon must exceed start time")
        L = np.asarray(self.noise_correlation, dtype=float)
        if L.shape != (3, 3) or not np.all(np.isfinite(L)):
            raise ValueError("noise_correlation must be a finite 3x3 matrix")
        if np.any(np.triu(L, 1) != 0):
            raise ValueError("noise_correlation must be lower triangular")
        object.__setattr__(
            self, "noise_correlation", tuple(tuple(float(v) for v in row) for row in L)
        )

    @property
    def ou_params(self) -> tuple[OuParams, OuParams, OuParams]:
        return (self.price_ou, self.demand_ou, self.pv_ou)

    @property
    def is_two_state(self) -> bool:
        """True when price and demand are deterministic (only PV and SoC evolve)."""
        return all(o.xi == 0 and o.sigma == 0 for o in (self.price_ou, self.demand_ou))

    def price(self, t, x=None):
        x = self.fixed_log_price if x is None else x
        return seasonal_eval(self.price_seasonal, t) * np.exp(x)

    def demand(self, t, d=None):
        d = self.fixed_log_demand if d is None else d
        return seasonal_eval(self.demand_seasonal, t) * np.exp(d)

    def pv(self, t, p):
        return pv_seasonal_eval(self.pv_seasonal, t) * np.exp(p)

    def discount_factor(self, t):
        return np.exp(-self.discount * np.asarray(t, dtype=float))


def seasonal_eval(spec: SeasonalSpec, t):
    """Strictly positive seasonal level at time ``t`` (hours)."""
    out = np.exp(spec.log_curve(t))
    return float(out) if np.ndim(out) == 0 else out


def pv_seasonal_eval(spec: PvSeasonalSpec, t):
    """Clamped-sine PV profile ``A * max(sin(2 pi psi (t + phi)), 0)``."""
    t = np.asarray(t, dtype=float)
    out = spec.amplitude * np.maximum(
        np.sin(2.0 * np.pi * spec.frequency * (t + spec.phase)), 0.0
    )
    return float(out) if np.ndim(out) == 0 else out


def expected_pv(spec: PvSeasonalSpec, ou: OuParams, t0: float, p0: float, u):
    """Mean of ``f_p(u) exp(U_p(u))`` given ``U_p(t0) = p0``."""
    if ou.xi <= 0:
        raise DegenerateParameters("expected_pv needs a positive mean-reversion speed")
    u = np.asarray(u, dtype=float)
    if np.any(u < t0):
        raise ValueError("u must not precede t0")
    lag = u - t0
    decay = np.exp(-ou.xi * lag)
    var_half = ou.sigma**2 / (4.0 * ou.xi) * (1.0 - decay**2)
    out = pv_seasonal_eval(spec, u) * np.exp(p0 * decay + var_half)
    return float(out) if np.ndim(out) == 0 else out


def stationary_pv_peak(spec: PvSeasonalSpec, ou: OuParams) -> float:
    """Long-run average production at the daily peak, ``A exp(sigma^2 / 4 xi)``."""
    if ou.xi <= 0:
        raise DegenerateParameters("needs a positive mean-reversion speed")
    return spec.amplitude * math.exp(ou.sigma**2 / (4.0 * ou.xi))


def intercept_for_minimum(
    harmonics: Sequence[tuple[float, float, float]], target_min: float, resolution: int = 86400
) -> float:
    """Intercept that puts the daily minimum of the profile at ``target_min``.

    The minimum of the harmonic part is located on a fine grid over one day
    and then polished with a bounded scalar search.
    """
    from scipy.optimize import minimize_scalar

    shape = SeasonalSpec(0.0, tuple(harmonics))
    t = np.linspace(0.0, HOURS_PER_DAY, resolution, endpoint=False)
    g = shape.log_curve(t)
    i = int(np.argmin(g))
    step = HOURS_PER_DAY / resolution
    res = minimize_scalar(
        lambda s: float(shape.log_curve(s)),
        bounds=(t[i] - step, t[i] + step),
        method="bounded",
        options={"xatol": 1e-10},
    )
    return math.log(target_min) - min(float(res.fun), float(g[i]))


# Reference daily-profile parameters (log scale, frequencies in 1/h).
PRICE_HARMONICS: tuple[tuple[float, float, float], ...] = (
    (1.0 / 24.0, -0.30068, -0.09365),
    (1.0 / 12.0, -0.21155, 0.09567),
    (1.0 / 8.0, 0.07929, 0.07220),
)
DEMAND_HARMONICS: tuple[tuple[float, float, float], ...] = (
    (1.0 / 24.0, -0.21109, -0.10399),
    (1.0 / 12.0, -0.12501, 0.0),
    (1.0 / 8.0, 0.02541, 0.0),
)
DEMAND_MIN_MW = 0.1418
PV_AMPLITUDE_MW = 0.5
PV_PHASE_HOURS = 18.0
PV_OU = OuParams(xi=per_day(2.0), sigma=per_sqrt_day(0.3))
REFERENCE_BATTERY = BatterySpec(
    eta_c=0.99, eta_d=0.97, max_charge=0.01, max_discharge=0.028, soc_min=0.0, soc_max=0.03
)


def reference_config(
    *,
    price_intercept: float,
    incentive: float,
    n_batteries: int = 2,
    discount: float = 0.0,
    demand_intercept: float | None = None,
) -> ModelConfig:
    """Two-state configuration built from the reference parameter tables.

    The price level and the incentive are not part of the reference tables
    and must be supplied.
    """
    if demand_intercept is None:
        demand_intercept = intercept_for_minimum(DEMAND_HARMONICS, DEMAND_MIN_MW)
    return ModelConfig(
        price_seasonal=SeasonalSpec(price_intercept, PRICE_HARMONICS),
        demand_seasonal=SeasonalSpec(demand_intercept, DEMAND_HARMONICS),
        pv_seasonal=PvSeasonalSpec(PV_AMPLITUDE_MW, 1.0 / 24.0, PV_PHASE_HOURS),
        battery=REFERENCE_BATTERY.parallel(n_batteries),
        pv_ou=PV_OU,
        incentive=incentive,
        discount=discount,
    )
