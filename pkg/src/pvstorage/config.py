"""Run configuration files: flat dotted keys, e.g. ``battery.eta_c = 0.99``.

All rates are per hour and all volatilities per square-root hour. Keys:

    price.intercept, price.harmonics = [[freq, sin, cos], ...], price.xi, price.sigma
    demand.intercept | demand.min_mw, demand.harmonics, demand.xi, demand.sigma,
    demand.disabled = true  (demand identically zero)
    pv.amplitude, pv.frequency, pv.phase, pv.xi, pv.sigma
    battery.eta_c, battery.eta_d, battery.max_charge, battery.max_discharge,
    battery.soc_min, battery.soc_max, battery.count
    market.incentive, market.discount
    horizon.start, horizon.end
    noise.correlation = [[...], [...], [...]]   (lower triangular, price/demand/pv)
    grid.tau, grid.p_min, grid.p_max, grid.p_step, grid.s_step
"""
from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import (
    BatterySpec,
    ModelConfig,
    OuParams,
    PvSeasonalSpec,
    SeasonalSpec,
    intercept_for_minimum,
)

GRID_KEYS = ("tau", "p_min", "p_max", "p_step", "s_step")
_SECTIONS = {
    "price": {"intercept", "harmonics", "xi", "sigma"},
    "demand": {"intercept", "min_mw", "harmonics", "xi", "sigma", "disabled"},
    "pv": {"amplitude", "frequency", "phase", "xi", "sigma"},
    "battery": {"eta_c", "eta_d", "max_charge", "max_discharge", "soc_min", "soc_max", "count"},
    "market": {"incentive", "discount"},
    "horizon": {"start", "end"},
    "noise": {"correlation"},
    "grid": set(GRID_KEYS),
}


def read_toml(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def _check_keys(data: dict, origin: str) -> None:
    for section, body in data.items():
        if section not in _SECTIONS:
            raise ValueError(f"{origin}: unknown section {section!r}")
        if not isinstance(body, dict):
            raise ValueError(f"{origin}: {section!r} must be a table of keys")
        extra = set(body) - _SECTIONS[section] - {k + "_se" for k in _SECTIONS[section]}
        if extra:
            raise ValueError(f"{origin}: unknown keys in {section!r}: {sorted(extra)}")


def _harmonics(raw) -> tuple:
    return tuple((float(f), float(a), float(b)) for f, a, b in raw)


def config_from_dict(data: dict, origin: str = "<config>") -> ModelConfig:
    _check_keys(data, origin)
    try:
        price = data["price"]
        demand = data.get("demand", {})
        pv = data["pv"]
        bat = data["battery"]
    except KeyError as exc:
        raise ValueError(f"{origin}: missing section {exc.args[0]!r}") from exc
    market = data.get("market", {})
    horizon = data.get("horizon", {})

    d_harm = _harmonics(demand.get("harmonics", ()))
    if "intercept" in demand:
        d_icpt = float(demand["intercept"])
    elif "min_mw" in demand:
        d_icpt = intercept_for_minimum(d_harm, float(demand["min_mw"]))
    else:
        d_icpt = 0.0
    battery = BatterySpec(
        float(bat["eta_c"]), float(bat["eta_d"]), float(bat["max_charge"]),
        float(bat["max_discharge"]), float(bat.get("soc_min", 0.0)), float(bat["soc_max"]),
    ).parallel(int(bat.get("count", 1)))
    kwargs = {}
    if "correlation" in data.get("noise", {}):
        kwargs["noise_correlation"] = tuple(tuple(map(float, r)) for r in data["noise"]["correlation"])
    return ModelConfig(
        price_seasonal=SeasonalSpec(float(price.get("intercept", 0.0)), _harmonics(price.get("harmonics", ()))),
        demand_seasonal=SeasonalSpec(d_icpt, d_harm),
        pv_seasonal=PvSeasonalSpec(
            float(pv.get("amplitude", 0.0)), float(pv.get("frequency", 1.0 / 24.0)), float(pv.get("phase", 18.0))
        ),
        battery=battery,
        price_ou=OuParams(float(price.get("xi", 0.0)), float(price.get("sigma", 0.0))),
        demand_ou=OuParams(float(demand.get("xi", 0.0)), float(demand.get("sigma", 0.0))),
        pv_ou=OuParams(float(pv.get("xi", 0.0)), float(pv.get("sigma", 0.0))),
        incentive=float(market.get("incentive", 0.0)),
        discount=float(market.get("discount", 0.0)),
        fixed_log_demand=-math.inf if demand.get("disabled", False) else 0.0,
        horizon=float(horizon.get("end", 24.0)),
        start=float(horizon.get("start", 0.0)),
        **kwargs,
    )


def grid_settings(data: dict) -> dict:
    return {k: float(v) for k, v in data.get("grid", {}).items() if k in GRID_KEYS}


def load_config(path) -> tuple[ModelConfig, dict]:
    """Model configuration and grid settings from a TOML file."""
    data = read_toml(path)
    return config_from_dict(data, str(path)), grid_settings(data)


def reference_scenario_path() -> Path:
    return Path(str(resources.files("pvstorage") / "data" / "reference_scenario.toml"))


def _canonical(v):
    if isinstance(v, dict):
        return {k: _canonical(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_canonical(x) for x in v]
    return float(v) + 0.0  # ints become floats, -0.0 becomes 0.0


def config_to_dict(config: ModelConfig) -> dict:
    """Canonical nested mapping of every model parameter (battery already scaled)."""
    return _canonical(asdict(config))


def config_hash(config: ModelConfig) -> str:
    blob = json.dumps(config_to_dict(config), sort_keys=True, allow_nan=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int,)):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dumps_flat(data: dict) -> str:
    """Two-level mapping to dotted-key TOML lines, sections separated by blanks."""
    blocks = []
    for section, body in data.items():
        blocks.append("\n".join(f"{section}.{k} = {_toml_value(v)}" for k, v in body.items()))
    return "\n\n".join(blocks) + "\n"
