import math

import numpy as np
import pytest

from pvstorage.errors import InvalidFrequencies, NonMeanRevertingResiduals, SeriesParseError
from pvstorage.model import (
    PV_OU,
    REFERENCE_BATTERY,
    ModelConfig,
    OuParams,
    PvSeasonalSpec,
    SeasonalSpec,
    expected_pv,
    pv_seasonal_eval,
)
from pvstorage.stochastic import (
    BLOCK_SIZE,
    SeriesSample,
    TimeGrid,
    fit_harmonic,
    fit_ou,
    fit_pv_profile,
    ou_step_exact,
    read_series_csv,
    simulate_paths,
    write_series_csv,
)
from synth import PRICE_SPEC, ou_path, pv_series

IDENT = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
ZERO = OuParams(0.0, 0.0)
PV = PvSeasonalSpec(0.5, 1 / 24, 18.0)


def pv_config(ou=PV_OU, corr=IDENT):
    return ModelConfig(SeasonalSpec(), SeasonalSpec(), PV, REFERENCE_BATTERY, pv_ou=ou, noise_correlation=corr)


def test_time_grid_spanning():
    g = TimeGrid.spanning(0.0, 24.0, 0.024)
    assert g.count == 1001
    assert g.stop == pytest.approx(24.0)
    with pytest.raises(ValueError):
        TimeGrid.spanning(0.0, 1.0, 0.3)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 0.0, 5)


def test_ou_step_degenerate_is_identity():
    u = np.array([0.3, -0.2, 1.1])
    out = ou_step_exact(u, (ZERO, ZERO, ZERO), IDENT, 1.0, np.array([1.0, -2.0, 0.5]))
    assert np.array_equal(out, u)


def test_ou_step_mean_decay_one_day():
    out = ou_step_exact(np.array([0.0, 0.0, 1.0]), (ZERO, ZERO, PV_OU), IDENT, 24.0, np.zeros(3))
    assert out[2] == pytest.approx(math.exp(-2.0), rel=1e-12)


@pytest.mark.parametrize("dt", [0.5, 24.0])
def test_ou_step_conditional_moments(dt):
    n = 100_000
    z = np.random.default_rng(3).standard_normal((n, 3))
    u0 = np.array([0.0, 0.0, 0.4])
    out = ou_step_exact(np.broadcast_to(u0, (n, 3)), (ZERO, ZERO, PV_OU), IDENT, dt, z)[:, 2]
    mean = 0.4 * math.exp(-PV_OU.xi * dt)
    var = PV_OU.sigma ** 2 * -math.expm1(-2 * PV_OU.xi * dt) / (2 * PV_OU.xi)
    assert abs(out.mean() - mean) <= 3 * math.sqrt(var / n)
    assert abs(out.var(ddof=1) - var) <= 3 * var * math.sqrt(2 / (n - 1))


def test_correlated_noise_covariance():
    ou = OuParams(0.1, 0.2)
    corr = ((1.0, 0.0, 0.0), (0.6, 0.8, 0.0), (0.0, 0.0, 1.0))
    z = np.random.default_rng(5).standard_normal((200_000, 3))
    out = ou_step_exact(np.zeros((200_000, 3)), (ou, ou, ou), corr, 1.0, z)
    r = np.corrcoef(out[:, 0], out[:, 1])[0, 1]
    assert r == pytest.approx(0.6, abs=0.01)


def test_simulate_constant_path():
    cfg = ModelConfig(SeasonalSpec(), SeasonalSpec(), PV, REFERENCE_BATTERY, pv_ou=ZERO)
    s = simulate_paths(cfg, TimeGrid(0.0, 1.0, 6), 1, seed=0, initial=(0.2, 0.1, -0.3))
    assert np.array_equal(s.paths[0], np.tile([0.2, 0.1, -0.3], (6, 1)))


def test_simulate_is_deterministic():
    g = TimeGrid(0.0, 0.5, 10)
    a = simulate_paths(pv_config(), g, 50, seed=9)
    b = simulate_paths(pv_config(), g, 50, seed=9)
    c = simulate_paths(pv_config(), g, 50, seed=10)
    assert np.array_equal(a.paths, b.paths)
    assert not np.array_equal(a.paths, c.paths)


def test_simulate_block_independence():
    # the first block of paths does not depend on how many blocks follow
    g = TimeGrid(0.0, 0.5, 5)
    small = simulate_paths(pv_config(), g, BLOCK_SIZE, seed=4)
    large = simulate_paths(pv_config(), g, 3 * BLOCK_SIZE + 7, seed=4)
    assert np.array_equal(small.paths, large.paths[:BLOCK_SIZE])


def test_simulated_pv_mean_matches_expected_pv():
    n = 100_000
    g = TimeGrid(0.0, 12.0, 2)
    s = simulate_paths(pv_config(), g, n, seed=21)
    vals = pv_seasonal_eval(PV, 12.0) * np.exp(s.paths[:, 1, 2])
    se = vals.std(ddof=1) / math.sqrt(n)
    assert abs(vals.mean() - expected_pv(PV, PV_OU, 0.0, 0.0, 12.0)) <= 3 * se


def test_fit_harmonic_synthetic_roundtrip():
    t = np.arange(28 * 24, dtype=float)
    fit = fit_harmonic(SeriesSample(t, np.exp(0.3 * np.sin(2 * np.pi * t / 24))), [1 / 24])
    (_, a, b), = fit.spec.harmonics
    assert a == pytest.approx(0.3, abs=1e-8)
    assert b == pytest.approx(0.0, abs=1e-8)
    assert fit.spec.intercept == pytest.approx(0.0, abs=1e-8)
    assert abs(fit.residuals.mean()) < 1e-12


def test_fit_harmonic_constant_series():
    t = np.arange(100, dtype=float)
    fit = fit_harmonic(SeriesSample(t, np.full(100, 2.0)), [1 / 24, 1 / 12])
    assert fit.spec.intercept == pytest.approx(math.log(2.0), abs=1e-12)
    assert all(abs(a) < 1e-12 and abs(b) < 1e-12 for _, a, b in fit.spec.harmonics)


@pytest.mark.parametrize("freqs", [[1 / 24, 1 / 24], [1.0], [0.0]])
def test_fit_harmonic_rejects_bad_frequencies(freqs):
    # 1/h sampled hourly aliases to the constant column
    t = np.arange(200, dtype=float)
    with pytest.raises(InvalidFrequencies):
        fit_harmonic(SeriesSample(t, np.exp(np.sin(t))), freqs)


def test_fit_harmonic_reference_shapes_within_two_se():
    t = np.arange(31 * 24, dtype=float)
    from pvstorage.model import seasonal_eval

    y = seasonal_eval(PRICE_SPEC, t) * np.exp(ou_path(PV_OU, t.size, 1.0, seed=77))
    fit = fit_harmonic(SeriesSample(t, y), [1 / 24, 1 / 12, 1 / 8])
    for (_, a, b), (_, ah, bh), sa, sb in zip(PRICE_SPEC.harmonics, fit.spec.harmonics, fit.sin_se, fit.cos_se):
        assert abs(ah - a) <= 2 * sa
        assert abs(bh - b) <= 2 * sb


def test_fit_ou_roundtrip_five_minute_month():
    dt = 1 / 12
    u = ou_path(PV_OU, 31 * 24 * 12, dt, seed=2024)
    fit = fit_ou(u, dt)
    assert abs(fit.xi - PV_OU.xi) <= 2 * fit.xi_se
    assert abs(fit.sigma - PV_OU.sigma) <= 2 * fit.sigma_se


def test_fit_ou_alternating_residuals_rejected():
    eps = 0.01 * (-1.0) ** np.arange(50)
    with pytest.raises(NonMeanRevertingResiduals):
        fit_ou(eps, 1.0)


def test_fit_ou_scale_equivariance():
    u = ou_path(PV_OU, 2000, 0.5, seed=8)
    one, two = fit_ou(u, 0.5), fit_ou(2 * u, 0.5)
    assert two.xi == pytest.approx(one.xi, rel=1e-12)
    assert two.sigma == pytest.approx(2 * one.sigma, rel=1e-12)


def test_fit_ou_needs_three_residuals():
    with pytest.raises(ValueError):
        fit_ou([0.1, 0.05], 1.0)


def test_fit_pv_profile_recovers_shape():
    fit = fit_pv_profile(pv_series(seed=31))
    assert abs(fit.spec.amplitude - 0.5) <= 3 * fit.amplitude_se
    assert abs(fit.spec.phase - 18.0) <= 3 * fit.phase_se
    # night samples carry no residual
    assert np.all(np.isnan(fit.residuals[pv_seasonal_eval(PV, pv_series(31).timestamps) == 0]))


def test_fit_pv_profile_noise_free_is_exact():
    t = np.arange(3 * 24 * 12) / 12
    fit = fit_pv_profile(SeriesSample(t, pv_seasonal_eval(PV, t)))
    assert fit.spec.amplitude == pytest.approx(0.5, abs=1e-8)
    assert fit.spec.phase == pytest.approx(18.0, abs=1e-7)


def test_series_csv_roundtrip(tmp_path):
    s = SeriesSample(np.arange(5) / 3, np.array([1 / 7, 2.5, math.pi, 1e-9, 3.0]))
    path = tmp_path / "x.csv"
    write_series_csv(path, s)
    back = read_series_csv(path)
    assert np.array_equal(back.timestamps, s.timestamps)
    assert np.array_equal(back.values, s.values)


@pytest.mark.parametrize(
    "body,needle",
    [
        ("", "empty"),
        ("time,value\n0,1\n", "header"),
        ("timestamp_hours,value\n0,1\n1,x\n2,1\n", ":3:"),
        ("timestamp_hours,value\n0,1\n1,0\n2,1\n", ":3:"),
        ("timestamp_hours,value\n0,1\n", "at least 3"),
        ("timestamp_hours,value\n0,1\n1,1\n3,1\n", "uniformly"),
    ],
)
def test_series_csv_errors_name_the_file(tmp_path, body, needle):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(SeriesParseError, match="bad.csv") as info:
        read_series_csv(path)
    assert needle in str(info.value)


def test_series_csv_zero_allowed_for_pv(tmp_path):
    path = tmp_path / "pv.csv"
    path.write_text("timestamp_hours,value\n0,0\n1,0.2\n2,0\n")
    assert read_series_csv(path, allow_zero=True).values[0] == 0.0
