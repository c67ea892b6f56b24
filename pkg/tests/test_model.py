import math

import numpy as np
import pytest

from pvstorage.errors import DegenerateParameters
from pvstorage.model import (
    DEMAND_HARMONICS,
    DEMAND_MIN_MW,
    PV_OU,
    PRICE_HARMONICS,
    REFERENCE_BATTERY,
    BatterySpec,
    ModelConfig,
    OuParams,
    PvSeasonalSpec,
    SeasonalSpec,
    expected_pv,
    intercept_for_minimum,
    per_day,
    per_sqrt_day,
    pv_seasonal_eval,
    seasonal_eval,
    stationary_pv_peak,
)

PV = PvSeasonalSpec(0.5, 1 / 24, 18.0)
FINE = np.linspace(0.0, 24.0, 240001)[:-1]


def test_unit_conversions():
    assert per_day(2.0) == pytest.approx(2.0 / 24.0)
    assert per_sqrt_day(0.3) == pytest.approx(0.3 / math.sqrt(24.0))


def test_flat_profile_is_one():
    assert seasonal_eval(SeasonalSpec(), np.array([0.0, 5.3, 17.0])) == pytest.approx(1.0)


def test_single_harmonic_hand_value():
    spec = SeasonalSpec(0.0, ((1 / 24, 1.0, 0.0),))
    assert seasonal_eval(spec, 6.0) == pytest.approx(math.e, rel=1e-12)


def test_daily_periodicity():
    spec = SeasonalSpec(0.3, PRICE_HARMONICS)
    t = np.linspace(0, 24, 97)
    assert np.allclose(seasonal_eval(spec, t), seasonal_eval(spec, t + 24.0), rtol=1e-12)


@pytest.mark.parametrize("bad", [((0.0, 1.0, 0.0),), ((1 / 24, 1, 0), (1 / 24, 0, 1))])
def test_seasonal_spec_rejects_bad_frequencies(bad):
    with pytest.raises(ValueError):
        SeasonalSpec(0.0, bad)


def test_demand_extrema_times_are_intercept_free():
    # frozen from an independent 1e-4 h grid search of the demand log-curve
    for icpt in (-3.0, 0.0, 2.0):
        f = seasonal_eval(SeasonalSpec(icpt, DEMAND_HARMONICS), FINE)
        assert FINE[np.argmin(f)] == pytest.approx(3.808, abs=2e-3)
        assert FINE[np.argmax(f)] == pytest.approx(19.049, abs=2e-3)


def test_demand_intercept_reproduces_minimum():
    icpt = intercept_for_minimum(DEMAND_HARMONICS, DEMAND_MIN_MW)
    assert icpt == pytest.approx(-1.60944, abs=1e-4)
    f = seasonal_eval(SeasonalSpec(icpt, DEMAND_HARMONICS), FINE)
    assert f.min() == pytest.approx(DEMAND_MIN_MW, abs=1e-9)
    assert f.max() == pytest.approx(0.25874, abs=1e-4)


@pytest.mark.parametrize("t,expected", [(0.0, 0.0), (6.0, 0.0), (12.0, 0.5), (18.0, 0.0), (9.0, 0.5 * math.sin(math.pi * 27 / 12))])
def test_pv_profile_hand_values(t, expected):
    assert pv_seasonal_eval(PV, t) == pytest.approx(expected, abs=1e-12)


def test_pv_profile_zero_half_the_day():
    f = pv_seasonal_eval(PV, FINE)
    assert np.all((f >= 0) & (f <= 0.5))
    assert np.mean(f == 0) == pytest.approx(0.5, abs=1e-4)


def test_expected_pv_zero_elapsed():
    assert expected_pv(PV, PV_OU, 10.0, 0.3, 10.0) == pytest.approx(pv_seasonal_eval(PV, 10.0) * math.exp(0.3))


def test_expected_pv_without_noise_is_mean_decay():
    ou = OuParams(PV_OU.xi, 0.0)
    u = 14.0
    want = pv_seasonal_eval(PV, u) * math.exp(0.4 * math.exp(-ou.xi * 4.0))
    assert expected_pv(PV, ou, 10.0, 0.4, u) == pytest.approx(want, rel=1e-12)


def test_expected_pv_stationary_limit():
    t0 = 0.0
    u = t0 + 20.0 / PV_OU.xi + 12.0 - (20.0 / PV_OU.xi) % 24.0  # noon, far away
    want = pv_seasonal_eval(PV, u) * math.exp(PV_OU.sigma ** 2 / (4 * PV_OU.xi))
    assert expected_pv(PV, PV_OU, t0, 0.7, u) == pytest.approx(want, rel=1e-8)


def test_expected_pv_requires_mean_reversion():
    with pytest.raises(DegenerateParameters):
        expected_pv(PV, OuParams(0.0, 0.1), 0.0, 0.0, 5.0)


def test_stationary_peak_matches_reported_capacity():
    # A e^{sigma^2/(4 xi)} with the hourly-converted reference PV parameters
    assert stationary_pv_peak(PV, PV_OU) == pytest.approx(0.5057, abs=5e-5)


def test_battery_parallel_scaling():
    two = REFERENCE_BATTERY.parallel(2)
    assert (two.max_charge, two.max_discharge, two.soc_max) == pytest.approx((0.02, 0.056, 0.06))
    assert (two.eta_c, two.eta_d) == (0.99, 0.97)


@pytest.mark.parametrize("kw", [dict(eta_c=0.0), dict(eta_d=1.2), dict(max_discharge=0.0), dict(soc_min=0.05)])
def test_battery_spec_invariants(kw):
    base = dict(eta_c=0.99, eta_d=0.97, max_charge=0.01, max_discharge=0.028, soc_min=0.0, soc_max=0.03)
    base.update(kw)
    with pytest.raises(ValueError):
        BatterySpec(**base)


def test_model_config_invariants():
    ok = dict(price_seasonal=SeasonalSpec(), demand_seasonal=SeasonalSpec(),
              pv_seasonal=PV, battery=REFERENCE_BATTERY)
    with pytest.raises(ValueError):
        ModelConfig(**ok, incentive=-1.0)
    with pytest.raises(ValueError):
        ModelConfig(**ok, discount=-0.1)
    with pytest.raises(ValueError):
        ModelConfig(**ok, noise_correlation=((1, 0.5, 0), (0, 1, 0), (0, 0, 1)))
    cfg = ModelConfig(**ok)
    assert cfg.is_two_state
    assert not ModelConfig(**ok, price_ou=OuParams(0.1, 0.1)).is_two_state


def test_config_accessors():
    cfg = ModelConfig(SeasonalSpec(math.log(100.0)), SeasonalSpec(math.log(0.2)), PV, REFERENCE_BATTERY,
                      discount=0.01, fixed_log_demand=0.0)
    assert cfg.price(3.0) == pytest.approx(100.0)
    assert cfg.demand(3.0) == pytest.approx(0.2)
    assert cfg.pv(12.0, math.log(2.0)) == pytest.approx(1.0)
    assert cfg.discount_factor(10.0) == pytest.approx(math.exp(-0.1))
