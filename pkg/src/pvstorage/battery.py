"""Storage dynamics, admissible control sets and charge/discharge purification."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InadmissibleAction, InfeasibleStep, SocOutOfRange
from .model import BatterySpec

_EPS = 1e-12


@dataclass(frozen=True)
class ControlAction:
    """Charge fraction ``a`` of current PV output and discharge power ``c`` (MW)."""

    a: float = 0.0
    c: float = 0.0

    def __iter__(self):
        yield self.a
        yield self.c


IDLE = ControlAction(0.0, 0.0)


def admissible_box(s: float, spec: BatterySpec, tolerance: float = 0.0) -> tuple[float, float]:
    """Upper bounds ``(a_max, c_max)`` of the admissible control box at SoC ``s``.

    At the empty end discharging is forbidden, at the full end charging is.
    """
    if s < spec.soc_min - tolerance or s > spec.soc_max + tolerance:
        raise SocOutOfRange(
            f"soc {s!r} outside [{spec.soc_min}, {spec.soc_max}] (tolerance {tolerance})"
        )
    a_max = 0.0 if s >= spec.soc_max - tolerance else 1.0
    c_max = 0.0 if s <= spec.soc_min + tolerance else spec.max_discharge
    return a_max, c_max


def charge_cap(P, spec: BatterySpec):
    """Largest admissible charge fraction given production ``P`` (``a P <= alpha_max``)."""
    P = np.asarray(P, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        cap = np.where(P > 0, np.minimum(1.0, spec.max_charge / np.where(P > 0, P, 1.0)), 1.0)
    return float(cap) if cap.ndim == 0 else cap


def soc_drift(a, c, P, spec: BatterySpec):
    """Rate of change of the SoC (MWh/h)."""
    return spec.eta_c * a * P - c / spec.eta_d


class SocStep(NamedTuple):
    soc: float
    clamped: float


def step_soc(
    s: float,
    action: ControlAction,
    P: float,
    dt: float,
    spec: BatterySpec,
    cell: float = 0.005,
) -> SocStep:
    """One explicit SoC step. Overshoots up to ``cell / 2`` are clamped silently
    (the clamped amount is returned); larger ones raise :class:`InfeasibleStep`."""
    a, c = action
    tol = cell / 2.0
    if not (-_EPS <= a <= 1 + _EPS) or not (-_EPS <= c <= spec.max_discharge + _EPS):
        raise InadmissibleAction(f"action {action} outside [0,1] x [0, {spec.max_discharge}]")
    if a * P > spec.max_charge * (1 + 1e-9) + _EPS:
        raise InadmissibleAction(f"charging power {a * P} exceeds {spec.max_charge}")
    a_max, c_max = admissible_box(s, spec, tol)
    if a > a_max + _EPS or c > c_max + _EPS:
        raise InadmissibleAction(f"action {action} not admissible at soc {s}")
    raw = s + soc_drift(a, c, P, spec) * dt
    new = min(max(raw, spec.soc_min), spec.soc_max)
    clamped = abs(raw - new)
    if clamped > tol:
        raise InfeasibleStep(
            f"step leaves [{spec.soc_min}, {spec.soc_max}] by {clamped:.6g} MWh (> {tol:.6g})"
        )
    return SocStep(new, clamped)


def purify_arrays(a, c, P, eta_c: float, eta_d: float):
    """Vectorised purification; returns ``(a', c')`` with ``a' c' = 0``."""
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    P = np.asarray(P, dtype=float)
    drift = eta_c * a * P - c / eta_d
    both = (a > 0) & (c > 0)
    to_discharge = both & (drift <= 0)
    to_charge = both & (drift > 0)
    new_a = np.where(to_discharge, 0.0, a)
    new_c = np.where(to_charge, 0.0, c)
    new_c = np.where(to_discharge, c - eta_c * eta_d * a * P, new_c)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        new_a = np.where(to_charge, a - c / (eta_c * eta_d * np.where(P > 0, P, 1.0)), new_a)
    return new_a, new_c


def purify(action: ControlAction, P: float, spec: BatterySpec) -> ControlAction:
    """Replace a simultaneous charge/discharge by a single-direction action with
    the same SoC drift and no less power sold."""
    a, c = purify_arrays(action.a, action.c, P, spec.eta_c, spec.eta_d)
    return ControlAction(float(a), float(c))


def feasible_scale(s, a, c, P, dt: float, spec: BatterySpec):
    """Factor in [0, 1] by which ``(a, c)`` must be scaled so that one step of
    length ``dt`` keeps the SoC inside its bounds."""
    drift = soc_drift(a, c, P, spec) * dt
    s = np.asarray(s, dtype=float)
    room_up = np.maximum(spec.soc_max - s, 0.0)
    room_down = np.maximum(s - spec.soc_min, 0.0)
    over = drift > room_up
    under = -drift > room_down
    lam = np.ones(np.broadcast(drift, s).shape)
    if over.any() or under.any():
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(over, room_up / drift, lam)
            lam = np.where(under, room_down / -drift, lam)
        lam = np.clip(lam, 0.0, 1.0)
    return lam
