"""Semi-implicit finite-difference solver for the two-state HJB equation.

Backward in time on the lattice (t_i, p_n, s_k): the control term is explicit
and upwinded in the state of charge, the PV log-level operator (drift and
diffusion) is implicit and solved as one banded system per SoC level.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded

from .errors import BadStencil, ConfigMismatch, ExtrapolationRefused, UnstableGrid
from .model import ModelConfig
from .policy import REGIMES, marginal_gauges, select_candidate, upwind_hamiltonian

UPWIND = "upwind"
FORWARD = "forward"
LATTICE = "lattice"
REGIME_NAMES = REGIMES + (LATTICE,)

_CHECKPOINT_MAGIC = b"PVSTORAGE-VALUE-V1\n"


def _whole(span: float, step: float, what: str) -> int:
    n = span / step
    k = int(round(n))
    if abs(n - k) > 1e-9 * max(1.0, abs(n)):
        raise ValueError(f"{what}: step {step} does not divide span {span} (ratio {n})")
    return k


@dataclass(frozen=True)
class SolverGrid:
    tau: float
    p_min: float
    p_max: float
    p_step: float
    s_step: float
    t_start: float
    t_end: float
    s_min: float
    s_max: float

    def __post_init__(self):
        if not (self.tau > 0 and self.p_step > 0 and self.s_step > 0):
            raise ValueError("grid steps must be positive")
        _whole(self.t_end - self.t_start, self.tau, "time")
        if self.n_p < 5:
            raise ValueError("need at least 5 PV nodes for the boundary stencils")
        if self.n_s < 3:
            raise ValueError("need at least 3 SoC nodes")

    @classmethod
    def for_config(
        cls,
        config: ModelConfig,
        tau: float = 0.024,
        p_step: float = 0.04,
        s_step: float = 0.005,
        p_min: float = -0.6,
        p_max: float = 0.6,
    ) -> "SolverGrid":
        bat = config.battery
        return cls(tau, p_min, p_max, p_step, s_step, config.start, config.horizon, bat.soc_min, bat.soc_max)

    @property
    def n_t(self) -> int:
        """Number of time steps (there are ``n_t + 1`` time nodes)."""
        return _whole(self.t_end - self.t_start, self.tau, "time")

    @property
    def n_p(self) -> int:
        return _whole(self.p_max - self.p_min, self.p_step, "pv log-level") + 1

    @property
    def n_s(self) -> int:
        return _whole(self.s_max - self.s_min, self.s_step, "state of charge") + 1

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.tau * np.arange(self.n_t + 1)

    @property
    def p_nodes(self) -> np.ndarray:
        return self.p_min + self.p_step * np.arange(self.n_p)

    @property
    def s_nodes(self) -> np.ndarray:
        return self.s_min + self.s_step * np.arange(self.n_s)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_t + 1, self.n_p, self.n_s)

    def time_index(self, t: float) -> int:
        """Index of the last node at or before ``t`` (nodes within 1e-9 h snap)."""
        x = (t - self.t_start) / self.tau
        j = int(np.floor(x + 1e-9))
        return min(max(j, 0), self.n_t)


@dataclass
class ValueField:
    values: np.ndarray  # (n_t + 1, n_p, n_s)
    grid: SolverGrid

    def slice_at(self, t: float) -> np.ndarray:
        return self.values[self.grid.time_index(t)]


@dataclass
class PolicyField:
    a: np.ndarray
    c: np.ndarray
    regime: np.ndarray  # int8 codes into REGIME_NAMES
    grid: SolverGrid

    def regime_names(self, i: int) -> np.ndarray:
        return np.asarray(REGIME_NAMES, dtype=object)[self.regime[i]]


def p_operator(config: ModelConfig, grid: SolverGrid, stencil: str = UPWIND) -> np.ndarray:
    """Banded storage (2 sub-, 2 super-diagonals) of the implicit PV operator

        U/tau + xi_p p D_p U - (sigma_p^2 / 2) D_pp U,

    with one-sided second differences on the first and last rows.
    """
    n = grid.n_p
    h = grid.p_step
    p = grid.p_nodes
    b = config.pv_ou.xi * p
    diff = 0.5 * config.pv_ou.sigma ** 2 / h ** 2
    A = np.zeros((n, n))
    idx = np.arange(n)
    A[idx, idx] = 1.0 / grid.tau

    if stencil == UPWIND:
        forward = b <= 0
    elif stencil == FORWARD:
        forward = np.ones(n, dtype=bool)
    else:
        raise ValueError(f"unknown stencil {stencil!r}")
    forward[0] = True
    forward[-1] = False
    for i in range(n):
        if forward[i]:
            A[i, i] -= b[i] / h
            A[i, i + 1] += b[i] / h
        else:
            A[i, i] += b[i] / h
            A[i, i - 1] -= b[i] / h

    for i in range(1, n - 1):
        A[i, i - 1] -= diff
        A[i, i] += 2 * diff
        A[i, i + 1] -= diff
    A[0, 0] -= diff
    A[0, 1] += 2 * diff
    A[0, 2] -= diff
    A[-1, -1] -= diff
    A[-1, -2] += 2 * diff
    A[-1, -3] -= diff

    ab = np.zeros((5, n))
    for i in range(n):
        for j in range(max(0, i - 2), min(n, i + 3)):
            ab[2 + i - j, j] = A[i, j]
    return ab


def banded_to_dense(ab: np.ndarray) -> np.ndarray:
    n = ab.shape[1]
    A = np.zeros((n, n))
    for i in range(n):
        for j in range(max(0, i - 2), min(n, i + 3)):
            A[i, j] = ab[2 + i - j, j]
    return A


def _s_slopes(U: np.ndarray, ds: float):
    """Forward and backward SoC differences; NaN where the neighbour is missing."""
    fwd = np.full_like(U, np.nan)
    bwd = np.full_like(U, np.nan)
    d = np.diff(U, axis=-1) / ds
    fwd[..., :-1] = d
    bwd[..., 1:] = d
    return fwd, bwd


def _node_data(config: ModelConfig, grid: SolverGrid, t: float):
    P = config.pv(t, grid.p_nodes)[:, None]
    return P, float(config.demand(t)), float(config.price(t))


def _explicit_candidates(config, grid, t, U):
    fwd, bwd = _s_slopes(U, grid.s_step)
    P, D, X = _node_data(config, grid, t)
    k = np.arange(grid.n_s)[None, :]
    can_charge = k < grid.n_s - 1
    can_discharge = k > 0
    code, a, c, H = select_candidate(
        t, P, D, X, np.nan_to_num(fwd), np.nan_to_num(bwd), config, can_charge, can_discharge
    )
    return code.astype(np.int8), a, c, H


def _explicit_lattice(config, grid, t, U, n_controls: int):
    bat = config.battery
    fwd, bwd = _s_slopes(U, grid.s_step)
    fwd, bwd = np.nan_to_num(fwd), np.nan_to_num(bwd)
    P, D, X = _node_data(config, grid, t)
    P = np.broadcast_to(P, U.shape)
    cap = np.where(P > 0, np.minimum(1.0, bat.max_charge / np.where(P > 0, P, 1.0)), 0.0)
    k = np.arange(grid.n_s)[None, :]
    a_hi = np.where(k < grid.n_s - 1, cap, 0.0)
    c_hi = np.broadcast_to(np.where(k > 0, bat.max_discharge, 0.0), U.shape)
    u = np.linspace(0.0, 1.0, n_controls)
    best = np.full(U.shape, np.inf)
    best_a = np.zeros(U.shape)
    best_c = np.zeros(U.shape)
    for fa in u:
        a = fa * a_hi
        for fc in u:
            c = fc * c_hi
            H = upwind_hamiltonian(a, c, t, P, D, X, fwd, bwd, config)
            better = H < best
            best = np.where(better, H, best)
            best_a = np.where(better, a, best_a)
            best_c = np.where(better, c, best_c)
    code = np.full(U.shape, REGIME_NAMES.index(LATTICE), dtype=np.int8)
    code[(best_a == 0) & (best_c == 0)] = 0
    return code, best_a, best_c, best


def solve(
    config: ModelConfig,
    grid: SolverGrid,
    dense_controls: int | None = None,
    stencil: str = UPWIND,
) -> tuple[ValueField, PolicyField]:
    """Backward induction from the zero terminal slice.

    ``dense_controls=N`` replaces the five-candidate control search by an
    ``N x N`` lattice over the admissible box (verification mode).
    """
    if not config.is_two_state:
        raise ValueError("the solver needs deterministic price and demand (zero OU parameters)")
    if dense_controls is not None and dense_controls < 2:
        raise ValueError("dense_controls must be >= 2")
    bat = config.battery
    cfl = max(bat.eta_c * bat.max_charge, bat.max_discharge / bat.eta_d) * grid.tau / grid.s_step
    if cfl > 1:
        warnings.warn(f"SoC CFL number {cfl:.3g} > 1: the explicit step can skip cells", RuntimeWarning)

    shape = grid.shape
    V = np.zeros(shape)
    A = np.zeros(shape)
    C = np.zeros(shape)
    R = np.zeros(shape, dtype=np.int8)
    ab = p_operator(config, grid, stencil)
    times = grid.times

    def control_step(i):
        if dense_controls is None:
            return _explicit_candidates(config, grid, times[i], V[i])
        return _explicit_lattice(config, grid, times[i], V[i], dense_controls)

    for i in range(grid.n_t, 0, -1):
        code, a, c, H = control_step(i)
        R[i], A[i], C[i] = code, a, c
        rhs = V[i] / grid.tau + H
        try:
            V[i - 1] = solve_banded((2, 2), ab, rhs, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise BadStencil(f"singular PV operator at step {i}: {exc}") from exc
        if not np.all(np.isfinite(V[i - 1])):
            raise UnstableGrid(f"non-finite values at t={times[i - 1]:.6g} (step {i})")
    R[0], A[0], C[0], _ = control_step(0)
    return ValueField(V, grid), PolicyField(A, C, R, grid)


def value_slope_s(field: ValueField, i: int, n: int, k: int, direction: str = "central") -> float:
    """SoC slope of the value at node (i, n, k).

    ``forward`` and ``backward`` match the stencils used for charging and
    discharging candidates; ``central`` is for reporting and falls back to a
    one-sided difference at the ends.
    """
    U = field.values[i, n]
    ds = field.grid.s_step
    last = U.shape[0] - 1
    if direction == "forward":
        k0 = min(k, last - 1)
        return float((U[k0 + 1] - U[k0]) / ds)
    if direction == "backward":
        k0 = max(k, 1)
        return float((U[k0] - U[k0 - 1]) / ds)
    if direction != "central":
        raise ValueError(f"unknown direction {direction!r}")
    if k == 0:
        return float((U[1] - U[0]) / ds)
    if k == last:
        return float((U[last] - U[last - 1]) / ds)
    return float((U[k + 1] - U[k - 1]) / (2 * ds))


@dataclass
class ShapeReport:
    s_monotone: np.ndarray  # max(D_s V) per slice, positive means violation
    s_convex: np.ndarray  # max(-D_ss V) per slice
    p_monotone: np.ndarray  # max(D_p V) per slice
    value_range: np.ndarray
    tolerance: float = 0.0

    def relative(self) -> dict:
        """Worst violation of each property divided by the slice's value range."""
        rng = np.where(self.value_range > 0, self.value_range, 1.0)
        out = {}
        for name in ("s_monotone", "s_convex", "p_monotone"):
            v = np.clip(getattr(self, name), 0.0, None)
            ratio = np.where(self.value_range > 0, v / rng, np.where(v > 0, np.inf, 0.0))
            out[name] = float(ratio.max())
        return out

    def passes(self, rel_tol: float) -> bool:
        return all(v <= rel_tol for v in self.relative().values())

    def summary(self) -> dict:
        return {
            "max_violation_eur": {
                "s_monotone": float(np.clip(self.s_monotone, 0, None).max()),
                "s_convex": float(np.clip(self.s_convex, 0, None).max()),
                "p_monotone": float(np.clip(self.p_monotone, 0, None).max()),
            },
            "relative_to_slice_range": self.relative(),
            "tolerance_eur": self.tolerance,
        }


def check_shape(field: ValueField | np.ndarray, tolerance: float = 0.0) -> ShapeReport:
    """Per-slice violations of: non-increase in s, convexity in s, non-increase in p.

    Each entry is the largest offending difference (EUR); values at or below
    ``tolerance`` count as satisfied.
    """
    V = field.values if isinstance(field, ValueField) else np.asarray(field, dtype=float)
    if V.ndim == 2:
        V = V[None]
    ds = np.diff(V, axis=2)
    dss = np.diff(V, n=2, axis=2) if V.shape[2] >= 3 else np.zeros(V.shape[:2] + (1,))
    dp = np.diff(V, axis=1)
    per = lambda arr: arr.reshape(arr.shape[0], -1).max(axis=1)
    s_mon = per(ds)
    s_cvx = per(-dss)
    p_mon = per(dp)
    rng = V.reshape(V.shape[0], -1).max(axis=1) - V.reshape(V.shape[0], -1).min(axis=1)
    zero_out = lambda v: np.where(v <= tolerance, np.minimum(v, 0.0), v)
    return ShapeReport(zero_out(s_mon), zero_out(s_cvx), zero_out(p_mon), rng, tolerance)


def value_at(field: ValueField, t, p, s):
    """Trilinear interpolation; exact at lattice nodes. Outside the hull raises."""
    g = field.grid
    pts = np.stack(np.broadcast_arrays(np.asarray(t, float), np.asarray(p, float), np.asarray(s, float)), axis=-1)
    eps = 1e-9
    lo = np.array([g.t_start, g.p_min, g.s_min]) - eps
    hi = np.array([g.t_end, g.p_max, g.s_max]) + eps
    if np.any(pts < lo) or np.any(pts > hi):
        raise ExtrapolationRefused(f"query outside the grid hull t∈[{g.t_start},{g.t_end}], "
                                   f"p∈[{g.p_min},{g.p_max}], s∈[{g.s_min},{g.s_max}]")
    pts = np.clip(pts, lo + eps, hi - eps)
    interp = RegularGridInterpolator((g.times, g.p_nodes, g.s_nodes), field.values, method="linear")
    out = interp(pts.reshape(-1, 3)).reshape(pts.shape[:-1])
    return float(out) if out.ndim == 0 else out


def _p_weights(grid: SolverGrid, p) -> tuple[np.ndarray, np.ndarray]:
    fp = np.clip((np.ravel(p) - grid.p_min) / grid.p_step, 0.0, grid.n_p - 1)
    i0 = np.minimum(fp.astype(int), grid.n_p - 2)
    return i0, fp - i0


def _s_interp(U: np.ndarray, grid: SolverGrid, i0, wp, s) -> np.ndarray:
    fs = np.clip((np.ravel(s) - grid.s_min) / grid.s_step, 0.0, grid.n_s - 1)
    k0 = np.minimum(fs.astype(int), grid.n_s - 2)
    ws = fs - k0
    lo = (1 - wp) * U[i0, k0] + wp * U[i0 + 1, k0]
    hi = (1 - wp) * U[i0, k0 + 1] + wp * U[i0 + 1, k0 + 1]
    return (1 - ws) * lo + ws * hi


def _bilinear(U: np.ndarray, grid: SolverGrid, p, s) -> np.ndarray:
    """Bilinear interpolation of one time slice; queries are clipped to the hull."""
    p, s = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(s, dtype=float))
    i0, wp = _p_weights(grid, p)
    return _s_interp(U, grid, i0, wp, s).reshape(p.shape)


class ValuePolicy:
    """Feedback policy read off a solved value field.

    At time ``t`` the slice at or before ``t`` supplies the SoC slopes (one
    cell forward for charging, one cell back for discharging, matching the
    solver's stencils) and the five candidates are ranked with the problem
    data at ``t``. At lattice nodes this reproduces the solver's argmin.
    """

    def __init__(self, field: ValueField, config: ModelConfig):
        self.field = field
        self.config = config

    def slopes(self, t, p, s):
        g = self.field.grid
        U = self.field.slice_at(t)
        p, s = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(s, dtype=float))
        shape = s.shape
        s = s.ravel()
        tiny = 1e-9 * (g.s_max - g.s_min)
        i0, wp = _p_weights(g, p)
        # value at fractional SoC index, blended between p-rows i0 and i0 + 1
        flat = U.ravel()
        lo_row = i0 * g.n_s
        hi_row = lo_row + g.n_s

        def at(fs):
            k0 = np.minimum(fs.astype(int), g.n_s - 2)
            ws = fs - k0
            v_lo = (1 - ws) * flat.take(lo_row + k0) + ws * flat.take(lo_row + k0 + 1)
            v_hi = (1 - ws) * flat.take(hi_row + k0) + ws * flat.take(hi_row + k0 + 1)
            return (1 - wp) * v_lo + wp * v_hi

        last = g.n_s - 1.0
        fs = np.clip((s - g.s_min) / g.s_step, 0.0, last)
        fs_up = np.minimum(fs + 1.0, last)
        fs_dn = np.maximum(fs - 1.0, 0.0)
        v0, v_up, v_dn = at(fs), at(fs_up), at(fs_dn)
        d_up = (fs_up - fs) * g.s_step
        d_dn = (fs - fs_dn) * g.s_step
        can_up = d_up > tiny
        can_dn = d_dn > tiny
        with np.errstate(divide="ignore", invalid="ignore"):
            fwd = np.where(can_up, (v_up - v0) / d_up, 0.0)
            bwd = np.where(can_dn, (v0 - v_dn) / d_dn, 0.0)
        r = lambda x: x.reshape(shape)
        return r(fwd), r(bwd), r(can_up), r(can_dn)

    def decide(self, t, p, s):
        cfg = self.config
        fwd, bwd, can_charge, can_discharge = self.slopes(t, p, s)
        P = cfg.pv(t, p)
        return select_candidate(t, P, cfg.demand(t), cfg.price(t), fwd, bwd, cfg, can_charge, can_discharge)

    def __call__(self, t, p, s):
        _, a, c, _ = self.decide(t, p, s)
        return a, c

    def report(self, t: float, p: float, s: float) -> dict:
        """Action, regime, value and marginal gauges at one state."""
        cfg = self.config
        code, a, c, _ = self.decide(t, np.array([p]), np.array([s]))
        fwd, bwd, _, _ = self.slopes(t, np.array([p]), np.array([s]))
        X = float(cfg.price(t))
        gauges = marginal_gauges(t, X, float(fwd[0]), cfg, float(bwd[0]))
        return {
            "t_hours": float(t),
            "p": float(p),
            "s_mwh": float(s),
            "value_eur": value_at(self.field, t, p, s),
            "a_star": float(a[0]),
            "c_star_mw": float(c[0]),
            "regime": REGIME_NAMES[int(code[0])],
            "pv_mw": float(cfg.pv(t, p)),
            "demand_mw": float(cfg.demand(t)),
            "price_eur_mwh": X,
            "slope_charge": float(fwd[0]),
            "slope_discharge": float(bwd[0]),
            "gauges": asdict(gauges),
        }


# --------------------------------------------------------------------------
# checkpoints: magic line, uint64 header length, JSON header, raw <f8 values


def save_checkpoint(path, field: ValueField, config_hash: str) -> None:
    header = {
        "format": "pvstorage-value",
        "version": 1,
        "dtype": "<f8",
        "order": "C",
        "dims": list(field.values.shape),
        "grid": asdict(field.grid),
        "config_hash": config_hash,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def load_checkpoint(path, expect_hash: str | None = None) -> tuple[ValueField, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a value checkpoint")
    off = len(_CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", data[off:off + 8])
    header = json.loads(data[off + 8:off + 8 + n].decode("utf-8"))
    if expect_hash is not None and header["config_hash"] != expect_hash:
        raise ConfigMismatch(
            f"{path}: checkpoint was solved for config {header['config_hash'][:12]}, "
            f"not {expect_hash[:12]}"
        )
    dims = tuple(header["dims"])
    values = np.frombuffer(data, dtype="<f8", offset=off + 8 + n).reshape(dims).astype(float)
    return ValueField(values, SolverGrid(**header["grid"])), header
