"""Running cost with the self-consumption incentive and Monte Carlo strategy cost.

Units: prices in EUR/MWh, powers in MW, time in hours, so cost rates are
EUR/h and integrated costs are EUR.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple

import numpy as np

from .battery import ControlAction, charge_cap, feasible_scale, purify_arrays, soc_drift
from .errors import PolicyViolation
from .model import ModelConfig
from .stochastic import TimeGrid, iter_states

# policy(t, p, s) -> (a, c); p and s are arrays of equal shape
PolicyFunction = Callable[[float, np.ndarray, np.ndarray], tuple]


def sold_power(a, c, P):
    """Power sold to the grid: unstored PV plus battery discharge."""
    return (1.0 - a) * P + c


@dataclass(frozen=True)
class CostRate:
    gross: float
    incentive_rate: float

    @property
    def net(self) -> float:
        return self.gross - self.incentive_rate


def cost_rate(t, X, D, E, config: ModelConfig):
    """Net discounted cost rate (EUR/h), array friendly."""
    disc = config.discount_factor(t)
    return disc * (X * (D - E) - config.incentive * np.minimum(D, E))


def running_cost(t: float, x: float, d: float, p: float, action: ControlAction, config: ModelConfig) -> CostRate:
    X = config.price(t, x)
    D = config.demand(t, d)
    P = config.pv(t, p)
    E = sold_power(action.a, action.c, P)
    disc = float(config.discount_factor(t))
    return CostRate(float(disc * X * (D - E)), float(disc * config.incentive * min(D, E)))


class CostEstimate(NamedTuple):
    mean: float
    standard_error: float
    path_costs: np.ndarray


def mc_costs(
    t0: float,
    x0: float,
    d0: float,
    p0: float,
    s0: float,
    policies: Mapping[str, PolicyFunction],
    config: ModelConfig,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    purify: bool = True,
) -> dict[str, CostEstimate]:
    """Monte Carlo estimates of the expected total cost of several policies.

    All policies see the same factor paths (common random numbers), which are
    drawn once. Each policy is applied at every grid node and held over the
    following step; the cost is integrated with the left-endpoint rule.
    Actions are capped at the charging power limit, optionally purified, and
    scaled down when a full step would leave the SoC range.
    """
    bat = config.battery
    if not bat.soc_min - 1e-12 <= s0 <= bat.soc_max + 1e-12:
        raise ValueError(f"s0={s0} outside [{bat.soc_min}, {bat.soc_max}]")
    if abs(grid.start - t0) > 1e-9 or abs(grid.stop - config.horizon) > 1e-6:
        raise ValueError("grid must span [t0, horizon]")
    dt = grid.step
    soc = {name: np.full(n_paths, float(s0)) for name in policies}
    total = {name: np.zeros(n_paths) for name in policies}
    states = iter_states(config, grid, n_paths, seed, initial=(x0, d0, p0))
    for t, u in zip(grid.times[:-1], states):
        X = config.price(t, u[:, 0])
        D = config.demand(t, u[:, 1])
        P = config.pv(t, u[:, 2])
        cap = charge_cap(P, bat)
        for name, policy in policies.items():
            s = soc[name]
            a, c = policy(float(t), u[:, 2], s)
            a = np.broadcast_to(np.asarray(a, dtype=float), s.shape)
            c = np.broadcast_to(np.asarray(c, dtype=float), s.shape)
            if not (np.isfinite(a).all() and np.isfinite(c).all()):
                raise PolicyViolation(f"{name}: non-finite action at t={t}")
            if a.min() < -1e-9 or a.max() > 1 + 1e-9 or c.min() < -1e-9 or c.max() > bat.max_discharge * (1 + 1e-9):
                raise PolicyViolation(f"{name}: action outside [0,1] x [0, {bat.max_discharge}] at t={t}")
            a = np.minimum(np.clip(a, 0.0, 1.0), cap)
            c = np.clip(c, 0.0, bat.max_discharge)
            if purify and np.any((a > 0) & (c > 0)):
                a, c = purify_arrays(a, c, P, bat.eta_c, bat.eta_d)
            lam = feasible_scale(s, a, c, P, dt, bat)
            a, c = a * lam, c * lam
            E = sold_power(a, c, P)
            total[name] += cost_rate(t, X, D, E, config) * dt
            soc[name] = np.clip(s + soc_drift(a, c, P, bat) * dt, bat.soc_min, bat.soc_max)
    out = {}
    for name, tot in total.items():
        mean = math.fsum(tot) / n_paths
        se = float(np.std(tot, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("nan")
        out[name] = CostEstimate(mean, se, tot)
    return out


def mc_cost(
    t0: float,
    x0: float,
    d0: float,
    p0: float,
    s0: float,
    policy: PolicyFunction,
    config: ModelConfig,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    purify: bool = True,
) -> CostEstimate:
    """Monte Carlo estimate of the expected total cost of one policy.

    The same ``seed`` gives the same factor paths for every policy, so
    separate calls also use common random numbers. See :func:`mc_costs`.
    """
    return mc_costs(t0, x0, d0, p0, s0, {"policy": policy}, config, grid, n_paths, seed, purify)["policy"]


def idle_policy(t, p, s):
    return 0.0, 0.0


def no_battery_policy(t, p, s):
    """Never touch the storage; identical in cost to idling."""
    return 0.0, 0.0


def discharge_policy(config: ModelConfig) -> PolicyFunction:
    gamma = config.battery.max_discharge

    def policy(t, p, s):
        return 0.0, np.where(s > config.battery.soc_min, gamma, 0.0)

    return policy


def greedy_policy(config: ModelConfig) -> PolicyFunction:
    """Myopic policy: treats stored energy as worthless (``V_s = 0``)."""
    from .policy import analytic_actions

    def policy(t, p, s):
        P = config.pv(t, p)
        return analytic_actions(t, P, config.demand(t), config.price(t), 0.0, s, config)

    return policy
