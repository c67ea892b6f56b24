"""Batch driver: ``pvstorage {calibrate,solve,simulate,policy,report}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import config_hash, dumps_flat, load_config, reference_scenario_path
from .cost import discharge_policy, greedy_policy, idle_policy, mc_costs, no_battery_policy
from .errors import PvStorageError
from .hjb import (
    FORWARD,
    REGIME_NAMES,
    UPWIND,
    SolverGrid,
    ValuePolicy,
    check_shape,
    load_checkpoint,
    save_checkpoint,
    solve,
    value_at,
)
from .stochastic import TimeGrid, fit_harmonic, fit_ou, fit_pv_profile, read_series_csv

log = logging.getLogger("pvstorage")

DEFAULT_SLICE_TIMES = "03:43,07:26,12:00,16:08,19:01"
DEFAULT_FREQUENCIES = "1/24,1/12,1/8"
CHECKPOINT_NAME = "value_field.bin"


def parse_time(text: str) -> float:
    """``HH:MM`` or decimal hours."""
    text = text.strip()
    if ":" in text:
        hh, mm = text.split(":", 1)
        h, m = int(hh), int(mm)
        if not 0 <= m < 60 or h < 0:
            raise ValueError(f"bad time {text!r}")
        return h + m / 60.0
    return float(text)


def time_tag(t: float) -> str:
    minutes = int(round(t * 60))
    return f"{minutes // 60:02d}{minutes % 60:02d}"


def parse_frequencies(text: str) -> list[float]:
    return [float(Fraction(item.strip())) for item in text.split(",") if item.strip()]


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, files, meta: dict) -> Path:
    """Record digests of ``files``; entries from earlier commands in the same
    directory are kept, and their metadata moves to ``history``."""
    path = out / "manifest.json"
    entries, history = {}, []
    if path.exists():
        old = json.loads(path.read_text())
        entries = {k: v for k, v in old.pop("files", {}).items() if (out / k).exists()}
        history = old.pop("history", []) + [old]
    entries.update({str(Path(f).relative_to(out)): sha256_file(Path(f)) for f in files})
    manifest = {"files": dict(sorted(entries.items())), **meta}
    if history:
        manifest["history"] = history
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def run_metadata(command: str, cfg_hash: str, started: float) -> dict:
    return {
        "command": command,
        "config_hash": cfg_hash,
        "wall_time_s": round(time.time() - started, 3),
        "versions": {
            "pvstorage": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }


def _load(args):
    path = Path(args.config) if args.config else reference_scenario_path()
    if not path.exists():
        raise ValueError(f"config file {path} does not exist")
    cfg, grid_cfg = load_config(path)
    for key in ("tau", "p_min", "p_max", "p_step", "s_step"):
        val = getattr(args, key, None)
        if val is not None:
            grid_cfg[key] = val
    return cfg, grid_cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    started = time.time()
    out = _out_dir(args)
    freqs = parse_frequencies(args.frequencies)
    result: dict = {}
    if not (args.price or args.demand or args.pv):
        raise ValueError("give at least one of --price, --demand, --pv")

    for name, path in (("price", args.price), ("demand", args.demand)):
        if not path:
            continue
        sample = read_series_csv(path)
        fit = fit_harmonic(sample, freqs)
        try:
            ou = fit_ou(fit.residuals, sample.step)
        except PvStorageError as exc:
            raise type(exc)(f"{path}: {exc}") from exc
        result[name] = {
            "intercept": fit.spec.intercept,
            "intercept_se": fit.intercept_se,
            "harmonics": [list(h) for h in fit.spec.harmonics],
            "harmonics_se": [[f, float(a), float(b)] for f, a, b in zip(freqs, fit.sin_se, fit.cos_se)],
            "xi": ou.xi,
            "xi_se": ou.xi_se,
            "sigma": ou.sigma,
            "sigma_se": ou.sigma_se,
        }
    if args.pv:
        sample = read_series_csv(args.pv, allow_zero=True)
        fit = fit_pv_profile(sample, freqs[0] if args.pv_frequency is None else args.pv_frequency)
        try:
            ou = fit_ou(fit.residuals, sample.step, valid=fit.valid)
        except PvStorageError as exc:
            raise type(exc)(f"{args.pv}: {exc}") from exc
        result["pv"] = {
            "amplitude": fit.spec.amplitude,
            "amplitude_se": fit.amplitude_se,
            "frequency": fit.spec.frequency,
            "phase": fit.spec.phase,
            "phase_se": fit.phase_se,
            "xi": ou.xi,
            "xi_se": ou.xi_se,
            "sigma": ou.sigma,
            "sigma_se": ou.sigma_se,
        }
    frag = out / "calibrated.toml"
    frag.write_text("# Estimated parameters (rates per hour); *_se are standard errors.\n\n" + dumps_flat(result))
    meta = {"command": "calibrate", "inputs": {k: str(v) for k, v in
            (("price", args.price), ("demand", args.demand), ("pv", args.pv)) if v},
            "frequencies": freqs}
    write_manifest(out, [frag], meta)
    print(frag.read_text(), end="")
    log.info("calibration finished in %.2f s", time.time() - started)
    return 0


def _slice_rows(grid: SolverGrid, V, P, i):
    for n, p in enumerate(grid.p_nodes):
        for k, s in enumerate(grid.s_nodes):
            yield (p, s, V[i, n, k], P.a[i, n, k], P.c[i, n, k], REGIME_NAMES[int(P.regime[i, n, k])])


def cmd_solve(args) -> int:
    started = time.time()
    out = _out_dir(args)
    cfg, grid_cfg = _load(args)
    grid = SolverGrid.for_config(cfg, **grid_cfg)
    stencil = FORWARD if args.forward_stencil else UPWIND
    log.info("solving on %d x %d x %d nodes (%s stencil)", *grid.shape, stencil)
    try:
        field, policy = solve(cfg, grid, dense_controls=args.dense_controls, stencil=stencil)
    except PvStorageError as exc:
        raise type(exc)(f"{exc} [grid: {asdict(grid)}]") from exc
    h = config_hash(cfg)
    files = []
    ckpt = out / CHECKPOINT_NAME
    save_checkpoint(ckpt, field, h)
    files.append(ckpt)

    slices = []
    for text in args.slice_times.split(","):
        t = parse_time(text)
        if not grid.t_start - 1e-9 <= t <= grid.t_end + 1e-9:
            raise ValueError(f"slice time {text} outside [{grid.t_start}, {grid.t_end}]")
        i = int(round((t - grid.t_start) / grid.tau))
        tag = time_tag(t)
        rows = list(_slice_rows(grid, field.values, policy, i))
        vpath = out / f"value_{tag}.csv"
        ppath = out / f"policy_{tag}.csv"
        write_csv(vpath, ["p", "s", "value_eur"], [r[:3] for r in rows])
        write_csv(ppath, ["p", "s", "a_star", "c_star_mw", "regime"], [r[:2] + r[3:] for r in rows])
        files += [vpath, ppath]
        slices.append({"requested": text, "index": i, "t_hours": float(grid.times[i]),
                       "value_csv": vpath.name, "policy_csv": ppath.name})

    shape = check_shape(field, tolerance=args.shape_tolerance)
    diag = {
        "grid": asdict(grid),
        "nodes": list(grid.shape),
        "stencil": stencil,
        "dense_controls": args.dense_controls,
        "shape": shape.summary(),
        "slices": slices,
        "value_range_eur": [float(field.values.min()), float(field.values.max())],
    }
    grids = [asdict(grid)]
    if args.convergence:
        coarse = replace(grid, tau=2 * grid.tau)
        cfield, _ = solve(cfg, coarse, dense_controls=args.dense_controls, stencil=stencil)
        deltas = []
        for sl in slices:
            t = sl["t_hours"]
            j = coarse.time_index(t)
            if abs(coarse.times[j] - t) > 1e-9:
                deltas.append({"t_hours": t, "max_abs_delta_eur": None})
                continue
            d = np.abs(cfield.values[j] - field.values[sl["index"]])
            deltas.append({"t_hours": t, "max_abs_delta_eur": float(d.max())})
        diag["convergence"] = {"coarse_grid": asdict(coarse), "deltas": deltas}
        grids.append(asdict(coarse))
    diag["run"] = run_metadata("solve", h, started)
    dpath = out / "diagnostics.json"
    dpath.write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
    files.append(dpath)
    write_manifest(out, files, {"command": "solve", "config_hash": h, "grids": grids})
    rel = shape.relative()
    print(f"solved {grid.shape[0]}x{grid.shape[1]}x{grid.shape[2]} in {time.time() - started:.2f} s; "
          f"V(t0) in [{field.values[0].min():.4f}, {field.values[0].max():.4f}] EUR; "
          f"shape violations / range: " + ", ".join(f"{k}={v:.2e}" for k, v in rel.items()))
    return 0


def cmd_simulate(args) -> int:
    started = time.time()
    out = _out_dir(args)
    cfg, _ = _load(args)
    h = config_hash(cfg)
    field, _ = load_checkpoint(args.checkpoint, expect_hash=h)
    grid = field.grid
    t0 = parse_time(args.t0) if args.t0 is not None else grid.t_start
    bat = cfg.battery
    s0 = 0.5 * (bat.soc_min + bat.soc_max) if args.s0 is None else args.s0
    step = args.step or grid.tau
    tgrid = TimeGrid.spanning(t0, cfg.horizon, step)
    policies = {
        "extracted": ValuePolicy(field, cfg),
        "idle": idle_policy,
        "always_discharge": discharge_policy(cfg),
        "no_battery": no_battery_policy,
        "greedy": greedy_policy(cfg),
    }
    rows = []
    estimates = mc_costs(t0, cfg.fixed_log_price, cfg.fixed_log_demand, args.p0, s0, policies, cfg, tgrid, args.paths, args.seed)
    for name, est in estimates.items():
        rows.append((name, est.mean, est.standard_error))
        log.info("%s: %.6f +- %.6f EUR", name, est.mean, est.standard_error)
    hjb_value = value_at(field, t0, args.p0, s0)
    path = out / "simulation.csv"
    write_csv(path, ["policy", "mean_eur", "standard_error_eur"], rows)
    summary = out / "simulation.json"
    summary.write_text(json.dumps({
        "start": {"t_hours": t0, "p": args.p0, "s_mwh": s0},
        "paths": args.paths, "seed": args.seed, "step_hours": step,
        "hjb_value_eur": hjb_value,
        "policies": {n: {"mean_eur": m, "standard_error_eur": se} for n, m, se in rows},
    }, indent=2, sort_keys=True) + "\n")
    write_manifest(out, [path, summary], {"command": "simulate", "config_hash": h,
                                          "checkpoint": str(args.checkpoint)})
    print(f"{'policy':<18}{'mean_eur':>16}{'std_err':>12}")
    for n, m, se in rows:
        print(f"{n:<18}{m:>16.6f}{se:>12.6f}")
    print(f"{'hjb value':<18}{hjb_value:>16.6f}")
    log.info("simulation finished in %.2f s", time.time() - started)
    return 0


def cmd_policy(args) -> int:
    cfg, _ = _load(args)
    field, _ = load_checkpoint(args.checkpoint, expect_hash=config_hash(cfg))
    t = parse_time(args.t)
    rep = ValuePolicy(field, cfg).report(t, args.p, args.s)
    if args.json:
        print(json.dumps(rep, indent=2, sort_keys=True))
        return 0
    g = rep["gauges"]
    print(f"t={rep['t_hours']:.4f} h  p={rep['p']:.4f}  s={rep['s_mwh']:.4f} MWh")
    print(f"regime              {rep['regime']}")
    print(f"action              a={rep['a_star']:.6g}  c={rep['c_star_mw']:.6g} MW")
    print(f"value               {rep['value_eur']:.6f} EUR")
    print(f"P / D / X           {rep['pv_mw']:.6g} MW / {rep['demand_mw']:.6g} MW / {rep['price_eur_mwh']:.6g} EUR/MWh")
    print(f"charge cost         {g['charge']:.6f}")
    print(f"charge cost (Z)     {g['charge_incentive']:.6f}")
    print(f"discharge profit    {g['discharge']:.6f}")
    print(f"discharge profit(Z) {g['discharge_incentive']:.6f}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    mpath = out / "manifest.json"
    if not mpath.exists():
        raise ValueError(f"{mpath} not found")
    manifest = json.loads(mpath.read_text())
    bad = []
    for name, digest in manifest["files"].items():
        f = out / name
        if not f.exists() or sha256_file(f) != digest:
            bad.append(name)
    listed = set(manifest["files"]) | {"manifest.json"}
    unlisted = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()
                      and str(p.relative_to(out)) not in listed)
    print(f"command: {manifest.get('command')}  config: {manifest.get('config_hash', '')[:12]}")
    for name in manifest["files"]:
        print(f"  {'BAD ' if name in bad else 'ok  '}{name}")
    for name in unlisted:
        print(f"  ??  {name} (not in manifest)")
    diag = out / "diagnostics.json"
    if diag.exists():
        d = json.loads(diag.read_text())
        print("shape violations / range:", d["shape"]["relative_to_slice_range"])
    if bad or unlisted:
        print("manifest check FAILED", file=sys.stderr)
        return 1
    print("manifest check passed")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration (default: bundled reference scenario)")
    common.add_argument("--out", default="pvstorage-out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pvstorage", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="fit seasonal and OU parameters to CSV series")
    p.add_argument("--price")
    p.add_argument("--demand")
    p.add_argument("--pv")
    p.add_argument("--frequencies", default=DEFAULT_FREQUENCIES,
                   help="comma list in 1/h, fractions allowed (default %(default)s)")
    p.add_argument("--pv-frequency", type=float, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("solve", parents=[common], help="solve the HJB equation and write slices")
    for key in ("tau", "p_min", "p_max", "p_step", "s_step"):
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=float, default=None)
    p.add_argument("--dense-controls", type=int, default=None, metavar="N")
    p.add_argument("--forward-stencil", action="store_true",
                   help="forward p-differences everywhere except the last row")
    p.add_argument("--slice-times", default=DEFAULT_SLICE_TIMES)
    p.add_argument("--shape-tolerance", type=float, default=0.0)
    p.add_argument("--convergence", action="store_true", help="also solve with twice the time step")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo cost of the extracted and baseline policies")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--paths", type=int, default=10000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--t0", default=None)
    p.add_argument("--p0", type=float, default=0.0)
    p.add_argument("--s0", type=float, default=None, help="initial SoC (default: mid-range)")
    p.add_argument("--step", type=float, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("policy", parents=[common], help="optimal action and marginal gauges at one state")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t", required=True, help="HH:MM or decimal hours")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--s", type=float, required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_policy)

    p = sub.add_parser("report", parents=[common], help="verify a run directory against its manifest")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (PvStorageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
