"""Exponential Ornstein-Uhlenbeck factors: exact simulation and calibration.

Factor order is (price, demand, pv) in every array.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidFrequencies, NonMeanRevertingResiduals, SeriesParseError
from .model import ModelConfig, OuParams, PvSeasonalSpec, SeasonalSpec

# Paths are drawn in fixed-size blocks, each with its own counter-derived
# stream, so results do not depend on how blocks are scheduled.
BLOCK_SIZE = 1024


@dataclass(frozen=True)
class TimeGrid:
    start: float
    step: float
    count: int

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("time step must be positive")
        if self.count < 2:
            raise ValueError("a time grid needs at least two nodes")

    @classmethod
    def spanning(cls, start: float, stop: float, step: float) -> "TimeGrid":
        n = (stop - start) / step
        steps = int(round(n))
        if steps < 1 or abs(n - steps) > 1e-9 * max(1.0, n):
            raise ValueError("step must divide the interval into whole steps")
        return cls(float(start), float(step), steps + 1)

    @property
    def times(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.count)

    @property
    def stop(self) -> float:
        return self.start + self.step * (self.count - 1)


@dataclass
class SamplePathSet:
    grid: TimeGrid
    paths: np.ndarray  # (n_paths, count, 3) log-levels
    seed: int

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]


@dataclass
class SeriesSample:
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.timestamps.shape != self.values.shape or self.timestamps.ndim != 1:
            raise ValueError("timestamps and values must be 1-d and equally long")
        if len(self.timestamps) >= 2:
            gaps = np.diff(self.timestamps)
            if np.any(gaps <= 0):
                raise ValueError("timestamps must be strictly increasing")
            if not np.allclose(gaps, gaps[0], rtol=1e-9, atol=1e-9):
                raise ValueError("timestamps must be uniformly spaced")

    @property
    def step(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0])


def read_series_csv(path, allow_zero: bool = False) -> SeriesSample:
    """Read a ``timestamp_hours,value`` CSV with a header row."""
    path = Path(path)
    ts, vals = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SeriesParseError(f"{path}: empty file")
        if [h.strip() for h in header] != ["timestamp_hours", "value"]:
            raise SeriesParseError(f"{path}:1: expected header 'timestamp_hours,value'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise SeriesParseError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                t, v = float(row[0]), float(row[1])
            except ValueError:
                raise SeriesParseError(f"{path}:{lineno}: not a number: {row!r}") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise SeriesParseError(f"{path}:{lineno}: non-finite value")
            if v < 0 or (v == 0 and not allow_zero):
                raise SeriesParseError(f"{path}:{lineno}: value must be positive, got {v}")
            ts.append(t)
            vals.append(v)
    if len(ts) < 3:
        raise SeriesParseError(f"{path}: need at least 3 data rows, found {len(ts)}")
    try:
        return SeriesSample(np.array(ts), np.array(vals))
    except ValueError as exc:
        raise SeriesParseError(f"{path}: {exc}") from None


def write_series_csv(path, sample: SeriesSample) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp_hours", "value"])
        for t, v in zip(sample.timestamps, sample.values):
            w.writerow([format(t, ".17g"), format(v, ".17g")])


# --------------------------------------------------------------------------
# exact transitions


def _transition(params: Sequence[OuParams], corr, dt: float):
    """Per-component decay factors and a square-root factor of the exact
    conditional covariance over a step ``dt``."""
    xi = np.array([p.xi for p in params], dtype=float)
    sig = np.array([p.sigma for p in params], dtype=float)
    L = np.asarray(corr, dtype=float)
    q = (sig[:, None] * L) @ (sig[:, None] * L).T  # instantaneous covariance
    k = xi[:, None] + xi[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        weight = np.where(k > 0, -np.expm1(-k * dt) / np.where(k > 0, k, 1.0), dt)
    cov = q * weight
    factor = np.zeros_like(cov)
    live = np.diag(cov) > 0
    if live.any():
        sub = cov[np.ix_(live, live)]
        try:
            chol = np.linalg.cholesky(sub)
        except np.linalg.LinAlgError:
            w, v = np.linalg.eigh(sub)
            chol = v * np.sqrt(np.clip(w, 0.0, None))
        factor[np.ix_(live, live)] = chol
    return np.exp(-xi * dt), factor


def ou_step_exact(u, params: Sequence[OuParams], corr, dt: float, z) -> np.ndarray:
    """Advance log-levels ``u`` (shape (..., 3)) by ``dt`` using the exact
    Gaussian transition and standard normal draws ``z`` of the same shape."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    decay, factor = _transition(params, corr, dt)
    u = np.asarray(u, dtype=float)
    z = np.asarray(z, dtype=float)
    return u * decay + z @ factor.T


class _NormalStream:
    """Standard normals for ``n_paths`` paths, one counter-keyed generator per block."""

    def __init__(self, seed: int, n_paths: int, dim: int = 3):
        if n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        self.n_paths = n_paths
        self.dim = dim
        n_blocks = -(-n_paths // BLOCK_SIZE)
        self._gens = [
            np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), b])))
            for b in range(n_blocks)
        ]
        self._sizes = [min(BLOCK_SIZE, n_paths - b * BLOCK_SIZE) for b in range(n_blocks)]

    def draw(self) -> np.ndarray:
        return np.concatenate(
            [g.standard_normal((m, self.dim)) for g, m in zip(self._gens, self._sizes)]
        )


def iter_states(
    config: ModelConfig, grid: TimeGrid, n_paths: int, seed: int, initial=None
) -> Iterator[np.ndarray]:
    """Yield the (n_paths, 3) log-level array at every node of ``grid``."""
    if initial is None:
        initial = (config.fixed_log_price, config.fixed_log_demand, 0.0)
    u = np.broadcast_to(np.asarray(initial, dtype=float), (n_paths, 3)).copy()
    stream = _NormalStream(seed, n_paths)
    decay, factor = _transition(config.ou_params, config.noise_correlation, grid.step)
    yield u
    for _ in range(grid.count - 1):
        u = u * decay + stream.draw() @ factor.T
        yield u


def simulate_paths(
    config: ModelConfig, grid: TimeGrid, n_paths: int, seed: int, initial=None
) -> SamplePathSet:
    """Exact-transition OU paths; deterministic in ``(seed, config, grid)``."""
    paths = np.empty((n_paths, grid.count, 3))
    for j, u in enumerate(iter_states(config, grid, n_paths, seed, initial)):
        paths[:, j, :] = u
    return SamplePathSet(grid, paths, int(seed))


# --------------------------------------------------------------------------
# calibration


def _ar1_coefficient(resid: np.ndarray, pairs: np.ndarray) -> float:
    x0, x1 = resid[:-1][pairs], resid[1:][pairs]
    den = float(np.dot(x0, x0))
    return float(np.dot(x1, x0) / den) if den > 0 else 0.0


def _ar1_sandwich(design: np.ndarray, times: np.ndarray, dt: float, a: float, var: float):
    """``design^T Omega design`` for AR(1) errors observed at ``times``.

    Omega[i, j] = var * a ** (|t_i - t_j| / dt); evaluated with one forward and
    one backward recursion, which also handles gaps in ``times``.
    """
    a = min(max(a, 0.0), 0.999999)
    n = design.shape[0]
    if a == 0.0:
        return var * design.T @ design
    rho = a ** (np.diff(times) / dt)
    fwd = np.empty_like(design)
    bwd = np.empty_like(design)
    fwd[0] = design[0]
    for i in range(1, n):
        fwd[i] = design[i] + rho[i - 1] * fwd[i - 1]
    bwd[-1] = design[-1]
    for i in range(n - 2, -1, -1):
        bwd[i] = design[i] + rho[i] * bwd[i + 1]
    omega_x = var * (fwd + bwd - design)
    return design.T @ omega_x


@dataclass
class HarmonicFit:
    spec: SeasonalSpec
    residuals: np.ndarray
    intercept_se: float
    sin_se: np.ndarray
    cos_se: np.ndarray


def fit_harmonic(sample: SeriesSample, frequencies: Sequence[float]) -> HarmonicFit:
    """Least squares of ``log(values)`` on ``{1, sin(2 pi f t), cos(2 pi f t)}``.

    Standard errors use a sandwich covariance with AR(1) residual dependence,
    since the residuals are an OU process sampled on a fine grid.
    """
    freqs = [float(f) for f in frequencies]
    if len(set(freqs)) != len(freqs) or any(not f > 0 for f in freqs):
        raise InvalidFrequencies(f"frequencies must be positive and distinct: {freqs}")
    if np.any(sample.values <= 0):
        raise ValueError("harmonic fit needs strictly positive values")
    t = sample.timestamps
    y = np.log(sample.values)
    cols = [np.ones_like(t)]
    for f in freqs:
        cols += [np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t)]
    X = np.column_stack(cols)
    beta, _, rank, sv = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1] or sv[-1] < 1e-8 * sv[0]:
        raise InvalidFrequencies(
            f"design matrix is singular for frequencies {freqs} (aliased or duplicate)"
        )
    resid = y - X @ beta
    spec = SeasonalSpec(
        float(beta[0]), tuple((f, float(beta[1 + 2 * i]), float(beta[2 + 2 * i])) for i, f in enumerate(freqs))
    )
    n, k = X.shape
    pairs = np.ones(n - 1, dtype=bool)
    a = _ar1_coefficient(resid, pairs)
    var = float(resid @ resid) / max(n - k, 1)
    bread = np.linalg.inv(X.T @ X)
    cov = bread @ _ar1_sandwich(X, t, sample.step, a, var) @ bread
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return HarmonicFit(spec, resid, float(se[0]), se[1::2].copy(), se[2::2].copy())


@dataclass
class OuFit:
    xi: float
    sigma: float
    xi_se: float
    sigma_se: float
    ar_coefficient: float
    n_pairs: int

    @property
    def params(self) -> OuParams:
        return OuParams(self.xi, self.sigma)


def fit_ou(residuals, dt: float, valid=None) -> OuFit:
    """AR(1) maximum likelihood for a zero-mean OU sampled every ``dt``.

    ``valid`` optionally masks samples (e.g. night-time PV); only consecutive
    pairs with both ends valid enter the estimate.
    """
    u = np.asarray(residuals, dtype=float)
    if valid is None:
        valid = np.isfinite(u)
    valid = np.asarray(valid, dtype=bool) & np.isfinite(u)
    if u.size < 3 or valid.sum() < 3:
        raise ValueError("need at least 3 residuals")
    if not dt > 0:
        raise ValueError("dt must be positive")
    pairs = valid[:-1] & valid[1:]
    n = int(pairs.sum())
    if n < 2:
        raise ValueError("need at least 2 consecutive valid pairs")
    u = np.where(valid, u, 0.0)
    a = _ar1_coefficient(u, pairs)
    if not 0.0 < a < 1.0:
        raise NonMeanRevertingResiduals(
            f"lag-one coefficient {a:.6g} is outside (0, 1); residuals are not mean-reverting"
        )
    innov = u[1:][pairs] - a * u[:-1][pairs]
    v = float(innov @ innov) / n
    xi = -math.log(a) / dt
    g = 2.0 * xi / (1.0 - a * a)
    sigma = math.sqrt(v * g)
    var_a = (1.0 - a * a) / n
    xi_se = math.sqrt(var_a) / (a * dt)
    dg = (-2.0 / dt) * ((1.0 - a * a) / a + 2.0 * a * math.log(a)) / (1.0 - a * a) ** 2
    var_s2 = g * g * 2.0 * v * v / n + v * v * dg * dg * var_a
    sigma_se = math.sqrt(var_s2) / (2.0 * sigma) if sigma > 0 else 0.0
    return OuFit(xi, sigma, xi_se, sigma_se, a, n)


@dataclass
class PvFit:
    spec: PvSeasonalSpec
    residuals: np.ndarray  # NaN where the sample is not usable (night)
    valid: np.ndarray
    amplitude_se: float
    phase_se: float


def fit_pv_profile(
    sample: SeriesSample,
    frequency: float = 1.0 / 24.0,
    threshold: float = 1e-6,
    edge_floor: float = 0.05,
) -> PvFit:
    """Fit ``A max(sin(2 pi f (t + phi)), 0)`` to PV data in log space.

    Only samples with production above ``threshold`` MW are used; the phase is
    started from the production-weighted circular mean of the time of day.

    Residuals are reported wherever the fitted profile exceeds ``threshold``,
    but ``valid`` (the mask for the OU fit and for the residual autocorrelation
    behind the standard errors) also drops samples where the profile is below
    ``edge_floor * A``. Next to sunrise and sunset ``log sin`` is so steep that
    a tiny phase error dominates the residual increments.
    """
    from scipy.optimize import least_squares

    t, p = sample.timestamps, sample.values
    day = p > threshold
    if day.sum() < 3:
        raise ValueError("too few daylight samples to fit a PV profile")
    w = 2 * np.pi * frequency
    period = 1.0 / frequency
    logp = np.log(np.where(day, p, 1.0))

    def solve(mask, x0):
        tm, y = t[mask], logp[mask]

        def resid(theta):
            s = np.sin(w * (tm + theta[1]))
            return np.where(s > 0, y - theta[0] - np.log(np.where(s > 0, s, 1.0)), 50.0)

        sol = least_squares(resid, x0=x0, method="lm", xtol=1e-12, ftol=1e-12)
        return float(sol.x[0]), float(sol.x[1])

    angle = np.angle(np.sum(p[day] * np.exp(1j * w * t[day])))
    phi0 = ((np.pi / 2 - angle) / w) % period
    s0 = np.sin(w * (t[day] + phi0))
    loga0 = float(np.mean(logp[day][s0 > 0] - np.log(s0[s0 > 0]))) if np.any(s0 > 0) else 0.0
    log_a, phi = solve(day, [loga0, phi0])
    # refit away from sunrise/sunset, where the log-profile is too steep for
    # the linearised standard errors to hold
    core = day & (np.sin(w * (t + phi)) > edge_floor)
    if core.sum() >= 3:
        log_a, phi = solve(core, [log_a, phi])
    phi %= period
    spec = PvSeasonalSpec(math.exp(log_a), frequency, phi)

    fp = spec.amplitude * np.maximum(np.sin(w * (t + phi)), 0.0)
    usable = day & (fp > threshold)
    residuals = np.full_like(t, np.nan)
    residuals[usable] = np.log(p[usable] / fp[usable])
    valid = usable & (fp > edge_floor * spec.amplitude)
    if valid.sum() < 3:
        valid = usable

    tv = t[valid]
    jac = np.column_stack([np.ones_like(tv), w / np.tan(w * (tv + phi))])
    dt = sample.step
    # residual covariance from the OU fit of the increments, which pins the
    # autocorrelation far better than the sample moments of a month of days
    try:
        ou = fit_ou(residuals, dt, valid=valid)
        a = ou.ar_coefficient
        var = ou.sigma ** 2 / (2.0 * ou.xi)
    except (NonMeanRevertingResiduals, ValueError):
        core_r = residuals[valid]
        a = 0.0
        var = float(core_r @ core_r) / max(core_r.size - 2, 1)
    bread = np.linalg.inv(jac.T @ jac)
    cov = bread @ _ar1_sandwich(jac, tv, dt, a, var) @ bread
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return PvFit(spec, residuals, valid, float(spec.amplitude * se[0]), float(se[1]))
