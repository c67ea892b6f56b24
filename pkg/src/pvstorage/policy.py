"""Bang-bang optimal control for the two-state problem.

The Hamiltonian minimised at every (t, p, s) is

    (eta_c a P - c / eta_d) V_s + e^{-rt} X (D - E) - e^{-rt} Z min(D, E),

with ``E = (1 - a) P + c``. It is piecewise linear in (a, c) with one kink on
``D = E``, so its minimum over the admissible box is attained on at most five
candidate actions. :func:`analytic_policy` walks the threshold ladder on
``-V_s``; :func:`brute_force_policy` searches a dense lattice and serves as its
oracle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .battery import ControlAction, admissible_box, charge_cap
from .model import ModelConfig

IDLE = "idle"
MATCH_CHARGE = "matchDemandByCharge"
MATCH_DISCHARGE = "matchDemandByDischarge"
CHARGE_FULL = "chargeFull"
DISCHARGE_FULL = "dischargeFull"

# Candidate order doubles as the tie-break order: less battery activity first.
REGIMES = (IDLE, MATCH_CHARGE, MATCH_DISCHARGE, CHARGE_FULL, DISCHARGE_FULL)
REGIME_CODE = {name: i for i, name in enumerate(REGIMES)}


@dataclass(frozen=True)
class MarginalGauges:
    charge: float
    charge_incentive: float
    discharge: float
    discharge_incentive: float


def marginal_gauges(t, X, Vs, config: ModelConfig, Vs_discharge=None) -> MarginalGauges:
    """Marginal cost of storing and marginal profit of selling stored energy.

    ``Vs`` feeds the storing gauges and ``Vs_discharge`` (default ``Vs``) the
    selling gauges, so upwind slopes can be used for each direction.
    """
    if Vs_discharge is None:
        Vs_discharge = Vs
    bat = config.battery
    disc = config.discount_factor(t)
    Z = config.incentive
    return MarginalGauges(
        bat.eta_c * Vs + disc * X,
        bat.eta_c * Vs + disc * (X + Z),
        Vs_discharge / bat.eta_d + disc * X,
        Vs_discharge / bat.eta_d + disc * (X + Z),
    )


@dataclass(frozen=True)
class PolicyDecision:
    action: ControlAction
    case: str
    regime: str
    capped: bool = False


def hamiltonian(a, c, t, P, D, X, Vs, config: ModelConfig):
    """Objective minimised over the controls; array friendly."""
    return upwind_hamiltonian(a, c, t, P, D, X, Vs, Vs, config)


def upwind_hamiltonian(a, c, t, P, D, X, slope_charge, slope_discharge, config: ModelConfig):
    """Hamiltonian with the SoC slope taken in the direction of the drift."""
    bat = config.battery
    drift = bat.eta_c * a * P - c / bat.eta_d
    slope = np.where(drift > 0, slope_charge, slope_discharge)
    E = (1.0 - a) * P + c
    disc = config.discount_factor(t)
    return drift * slope + disc * (X * (D - E) - config.incentive * np.minimum(D, E))


def analytic_policy(t, P, D, X, Vs, s, config: ModelConfig, tolerance: float = 0.0) -> PolicyDecision:
    """Closed-form minimiser of the Hamiltonian via the threshold ladder.

    Thresholds on ``v = -Vs`` (all discounted by ``e^{-rt}``):
    ``eta_d X <= eta_d (X+Z)`` for selling stored energy and
    ``X/eta_c <= (X+Z)/eta_c`` for storing production. Exact ties go to the
    action with less battery activity.
    """
    bat = config.battery
    disc = float(config.discount_factor(t))
    Z = config.incentive
    gamma = bat.max_discharge
    v = -Vs
    sell = disc * bat.eta_d * X
    sell_z = disc * bat.eta_d * (X + Z)
    store = disc * X / bat.eta_c
    store_z = disc * (X + Z) / bat.eta_c

    if P > 0:
        suffix = "P>0"
        if D <= 0:
            case = "a"
            regime = DISCHARGE_FULL if v < sell else CHARGE_FULL if v > store else IDLE
        elif D <= P:
            case = "b"
            if v < sell:
                regime = DISCHARGE_FULL
            elif v <= store:
                regime = IDLE
            elif v <= store_z:
                regime = MATCH_CHARGE
            else:
                regime = CHARGE_FULL
        elif D <= P + gamma:
            case = "c"
            if v < sell:
                regime = DISCHARGE_FULL
            elif v < sell_z:
                regime = MATCH_DISCHARGE
            elif v <= store_z:
                regime = IDLE
            else:
                regime = CHARGE_FULL
        else:
            case = "d"
            regime = DISCHARGE_FULL if v < sell_z else CHARGE_FULL if v > store_z else IDLE
    else:
        suffix = "P=0"
        if D <= 0:
            case = "a"
            regime = DISCHARGE_FULL if v < sell else IDLE
        elif D <= gamma:
            case = "c"
            regime = DISCHARGE_FULL if v < sell else MATCH_DISCHARGE if v < sell_z else IDLE
        else:
            case = "d"
            regime = DISCHARGE_FULL if v < sell_z else IDLE

    a_max, c_max = admissible_box(s, bat, tolerance)
    if regime in (CHARGE_FULL, MATCH_CHARGE) and a_max == 0:
        regime = IDLE
    if regime in (DISCHARGE_FULL, MATCH_DISCHARGE) and c_max == 0:
        regime = IDLE

    capped = False
    action = ControlAction(0.0, 0.0)
    if regime == DISCHARGE_FULL:
        action = ControlAction(0.0, gamma)
    elif regime == MATCH_DISCHARGE:
        action = ControlAction(0.0, float(D - P))
    elif regime in (CHARGE_FULL, MATCH_CHARGE):
        cap = charge_cap(P, bat)
        want = 1.0 if regime == CHARGE_FULL else 1.0 - D / P
        capped = want > cap
        action = ControlAction(float(min(want, cap)), 0.0)
    return PolicyDecision(action, f"{case}/{suffix}", regime, capped)


def brute_force_policy(t, P, D, X, Vs, s, config: ModelConfig, grid_n: int = 201, tolerance: float = 0.0) -> ControlAction:
    """Minimise the Hamiltonian over a ``grid_n x grid_n`` lattice of the
    admissible box; ties go to the smallest ``a + c / Gamma``."""
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    bat = config.battery
    a_max, c_max = admissible_box(s, bat, tolerance)
    a_hi = a_max * charge_cap(P, bat) if P > 0 else 0.0
    a = np.linspace(0.0, a_hi, grid_n)[:, None]
    c = np.linspace(0.0, c_max, grid_n)[None, :]
    H = hamiltonian(a, c, t, P, D, X, Vs, config)
    best = H.min()
    scale = max(1.0, abs(float(best)))
    near = H <= best + 1e-12 * scale
    activity = np.where(near, a + c / bat.max_discharge, np.inf)
    i, j = np.unravel_index(np.argmin(activity), H.shape)
    return ControlAction(float(a[i, 0]), float(c[0, j]))


def candidate_actions(P, D, config: ModelConfig, can_charge, can_discharge):
    """The five bang-bang candidates in :data:`REGIMES` order.

    Returns ``(a, c, valid, capped)`` where ``a``, ``c`` and ``valid`` have a
    leading axis of length 5 and broadcast against ``P``/``D``/``can_*``.
    """
    bat = config.battery
    P, D, can_charge, can_discharge = np.broadcast_arrays(
        np.asarray(P, dtype=float), np.asarray(D, dtype=float),
        np.asarray(can_charge, dtype=bool), np.asarray(can_discharge, dtype=bool),
    )
    cap = charge_cap(P, bat)
    pos = P > 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        match_a = np.where(pos, 1.0 - D / np.where(pos, P, 1.0), 0.0)
    capped = match_a > cap
    match_a = np.minimum(match_a, cap)
    match_c = D - P
    zero = np.zeros(P.shape)
    gamma = np.full(P.shape, bat.max_discharge)
    a = np.stack([zero, match_a, zero, np.where(pos, cap, 0.0), zero])
    c = np.stack([zero, zero, np.clip(match_c, 0.0, bat.max_discharge), zero, gamma])
    valid = np.stack([
        np.ones(P.shape, dtype=bool),
        can_charge & pos & (match_a > 0),
        can_discharge & (match_c > 0) & (match_c <= bat.max_discharge),
        can_charge & pos,
        can_discharge,
    ])
    return a, c, valid, capped


def select_candidate(t, P, D, X, slope_charge, slope_discharge, config: ModelConfig, can_charge, can_discharge):
    """Vectorised argmin over the candidate set with upwind slopes.

    Each candidate moves the SoC in one known direction, so charging
    candidates use ``slope_charge`` and discharging ones ``slope_discharge``.
    Returns ``(regime_code, a, c, objective)`` arrays.
    """
    bat = config.battery
    P, D, can_charge, can_discharge = np.broadcast_arrays(
        np.asarray(P, dtype=float), np.asarray(D, dtype=float),
        np.asarray(can_charge, dtype=bool), np.asarray(can_discharge, dtype=bool),
    )
    disc = config.discount_factor(t)
    Z = config.incentive
    gamma = bat.max_discharge
    pos = P > 0
    cap = charge_cap(P, bat)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        match_a = np.minimum(np.where(pos, 1.0 - D / np.where(pos, P, 1.0), 0.0), cap)
    match_c = D - P
    full_a = np.where(pos, cap, 0.0)

    def objective(transport, E):
        return transport + disc * (X * (D - E) - Z * np.minimum(D, E))

    inf = np.inf
    rows = [
        objective(0.0, P),
        np.where(can_charge & pos & (match_a > 0),
                 objective(bat.eta_c * match_a * P * slope_charge, (1.0 - match_a) * P), inf),
        np.where(can_discharge & (match_c > 0) & (match_c <= gamma),
                 objective(-match_c / bat.eta_d * slope_discharge, D), inf),
        np.where(can_charge & pos, objective(bat.eta_c * full_a * P * slope_charge, (1.0 - full_a) * P), inf),
        np.where(can_discharge, objective(-gamma / bat.eta_d * slope_discharge, P + gamma), inf),
    ]
    # running minimum with strict improvement: ties keep the earlier regime
    best = np.broadcast_to(rows[0], P.shape).copy()
    code = np.zeros(P.shape, dtype=np.intp)
    for j in range(1, len(rows)):
        better = rows[j] < best
        best = np.where(better, rows[j], best)
        code[better] = j
    a = np.where(code == 1, match_a, np.where(code == 3, full_a, 0.0))
    c = np.where(code == 2, np.clip(match_c, 0.0, gamma), np.where(code == 4, gamma, 0.0))
    return code, a, c, best


def analytic_actions(t, P, D, X, Vs, s, config: ModelConfig):
    """Array version of :func:`analytic_policy` returning ``(a, c)``."""
    bat = config.battery
    s = np.asarray(s, dtype=float)
    _, a, c, _ = select_candidate(
        t, P, D, X, Vs, Vs, config, s < bat.soc_max, s > bat.soc_min
    )
    return a, c
