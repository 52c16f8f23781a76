"""Command-line front end: ``init``, ``validate``, ``calibrate``, ``run``, ``ccdf``.

Data goes to files only; progress, timings and seed provenance go to
standard error.  Exit codes: 0 success, 2 configuration error, 3 calibration
failure, 4 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .config import MODE_CHOICES, RunConfig, dump_config, load_config
from .engine import MODES, PathResults, Simulator, aggregate_ccdf, reweight_paths, run_paths, weighted_quantile
from .errors import CalibrationError, CCPSimError, ConfigError
from .experiment import build_setup

log = logging.getLogger("ccpsim")

PATH_COLUMNS = ("seed", "path", "lossRatio", "imDrainRatio", "nDefaults", "xi1", "ccpFailures", "weight")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


# ---------------------------------------------------------------------------
# init: template configuration and synthetic data
# ---------------------------------------------------------------------------

TEMPLATE = """\
# Clearing-network simulation.  Units: money in USD, time in years, rates as
# decimals (0.01 = 100bp), volatilities annualised.
seed: 1                      # path seed; path i uses substream (seed, i)
paths: 10000                 # number of Monte Carlo paths per mode
horizon: 1.0                 # years
step_days: 5                 # business days per margining step
days_per_year: 260           # business days per year (52 steps of 5 days)
mode: all                    # feedback | default-only | no-default | all
batch_size: 256              # paths simulated together (fixed, not a tuning knob for results)
reporting_currency: USD
xyz_equity: 2.0e+11          # equity of the reference member group (ratios are per unit of it)
delta_limit: 0.1             # |net| <= delta_limit * gross for every member and category
reweight_target: null        # E[stress indicator at horizon]; null = default-only mean
positions_seed: 1            # seed of the net-position randomisation

data:                        # CSV inputs, relative to this file
  categories: categories.csv
  members: members.csv
  aggregates: aggregates.csv
  known_positions: known_positions.csv

regime:
  thresholds: [0.05, 1.0]    # stress indicator bucket upper bounds, last must be 1
  multipliers: [1.0, 2.0]    # volatility / jump-intensity multiplier per regime
  mean_reversion: 1.0        # decay rate of the stress indicator per year

systemic_jump: {intensity: 0.5, log_mean: -0.05, log_std: 0.05}

economies:
  USD: {forward_curve: 0.03, theta1: 0.05, theta2: 0.8, vol: 0.008, vol_ratio: 0.8,
        correlation: -0.6, systemic_beta: 1.0, jump: {intensity: 1.0, log_mean: 0.0, log_std: 0.05}}
  EUR: {forward_curve: 0.025, theta1: 0.05, theta2: 0.8, vol: 0.007, vol_ratio: 0.8,
        correlation: -0.6, systemic_beta: 1.0, jump: {intensity: 1.0, log_mean: 0.0, log_std: 0.05}}

fx:
  EUR: {spot: 1.1, vol: 0.08, systemic_beta: 0.5, jump: {intensity: 1.0, log_mean: 0.0, log_std: 0.03}}

assets:
  systemic_beta: 0.0         # log loading of member assets on systemic jumps
  jump: {intensity: 0.1, log_mean: -0.02, log_std: 0.02}
  vol_multiple:              # asset vol = multiple * CCP P&L vol / initial assets
    diversified: 5.0
    markets-driven: 1.0
    trading-house: 0.3
  vol_bounds: [1.0e-4, 0.5]

margin:
  var_level: 0.99            # VaR confidence; q = round((1 - level) * history)
  history: 1000              # synthetic historical one-step scenarios
  stressed_fraction: 0.0     # share of the history drawn in the stressed regime
  history_seed: 2
  add_on: 0.1                # add-on as a fraction of the t=0 VaR, frozen
  vol_ratio_decay: 0.97      # per-step EWMA decay of the squared regime multiplier
  vol_ratio_in_drain: false  # include vol scaling in the IM-drain metric
  precision: 0.01            # currency precision of pro-rata allocations

ccps:
  - id: LCH
    skin_in_the_game: 1.0e+8
    # 'default' gives +-200bp parallel, +-100bp steepener, +-20% FX; sized here
    # so the Cover-2 fund stays a modest fraction of initial margin
    scenarios: {parallel: 0.005, slope: 0.0025, fx: 0.05}
  - id: CME
    skin_in_the_game: 5.0e+7
    scenarios: {parallel: 0.005, slope: 0.0025, fx: 0.05}

calibration:
  paths: 20000               # asset-only paths per member for barrier bisection
  seed: 3

output:
  ccdf_points: 200
  margin_snapshot: false     # also write per-step margins of path 0 per mode
"""

CATEGORIES = [("USD-2-5Y", "USD", "2y-5y", 3.5), ("USD-5-10Y", "USD", "5y-10y", 7.5),
              ("USD-10-30Y", "USD", "10y-30y", 20.0), ("EUR-2-5Y", "EUR", "2y-5y", 3.5),
              ("EUR-5-10Y", "EUR", "5y-10y", 7.5), ("EUR-10-30Y", "EUR", "10y-30y", 20.0)]

AGGREGATES = {"LCH": (6.0e13, 4.0e13, 2.5e13, 5.0e13, 3.5e13, 2.0e13),
              "CME": (1.0e13, 6.0e12, 3.0e12, 1.0e12, 6.0e11, 3.0e11)}

KNOWN_SHARE = 0.07
XYZ_RANKS = {2: "XYZ-US", 5: "XYZ-EU"}


def synthetic_members(n: int = 101):
    rows = []
    for rank in range(1, n + 1):
        assets = 3.0e12 * np.exp(-0.07 * (rank - 1))
        if rank <= 15 or rank in XYZ_RANKS:
            kind = "diversified"
        elif rank % 3 == 0:
            kind = "trading-house"
            assets *= 0.3  # position-heavy firms run thin balance sheets
        else:
            kind = "markets-driven"
        prob = {"diversified": 0.01, "markets-driven": 0.015, "trading-house": 0.025}[kind]
        rows.append({"id": XYZ_RANKS.get(rank, f"GCM{rank:03d}"), "rank": rank, "assets": f"{assets:.6e}",
                     "equity": f"{0.07 * assets:.6e}", "type": kind, "target_default_prob": prob,
                     "known_member": int(rank in XYZ_RANKS)})
    return rows


def write_init(out: str):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.yaml"), "w") as fh:
        fh.write(TEMPLATE)
    with open(os.path.join(out, "categories.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "currency", "tenor_bucket", "representative_tenor", "trade_type"])
        for c in CATEGORIES:
            w.writerow([*c, "fixed-float"])
    members = synthetic_members()
    with open(os.path.join(out, "members.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(members[0]))
        w.writeheader()
        w.writerows(members)
    with open(os.path.join(out, "aggregates.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ccp", "category", "gross", "known_gross"])
        for ccp, grosses in AGGREGATES.items():
            for (cat, *_), g in zip(CATEGORIES, grosses):
                w.writerow([ccp, cat, f"{g:.6e}", f"{KNOWN_SHARE * g:.6e}"])
    # the reference group runs a small net receiver book in USD, payer in EUR
    signs = {"USD": 1.0, "EUR": -1.0}
    with open(os.path.join(out, "known_positions.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ccp", "category", "member", "delta"])
        for ccp, grosses in AGGREGATES.items():
            for (cat, ccy, *_), g in zip(CATEGORIES, grosses):
                for k, member in enumerate(XYZ_RANKS.values()):
                    share = 0.65 if k == 0 else 0.35
                    w.writerow([ccp, cat, member, f"{signs[ccy] * 0.03 * share * KNOWN_SHARE * g:.6e}"])


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def write_paths(path: str, res: PathResults):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PATH_COLUMNS)
        for i in range(len(res)):
            w.writerow([_fmt(res.seed), _fmt(res.path_index[i]), _fmt(res.loss_ratio[i]),
                        _fmt(res.im_drain_ratio[i]), _fmt(res.n_defaults[i]), _fmt(res.xi1[i]),
                        _fmt(res.ccp_failures[i]), _fmt(res.weight[i])])


def read_paths(path: str) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(path, "no paths in file")
    return {k: np.array([float(r[k]) for r in rows]) for k in PATH_COLUMNS}


def threshold_grid(samples, n_points: int, log_scale: bool):
    v = np.concatenate([np.asarray(s, dtype=float) for s in samples])
    if log_scale:
        pos = v[v > 0]
        if pos.size == 0:
            return np.array([0.0])
        lo, hi = pos.min(), pos.max()
        grid = np.geomspace(lo, hi, n_points - 1) if hi > lo else np.array([lo])
        return np.concatenate([[0.0], grid])
    lo, hi = v.min(), v.max()
    return np.linspace(lo, hi, n_points) if hi > lo else np.array([lo])


def write_ccdfs(out: str, per_mode: dict, n_points: int):
    """``per_mode`` maps mode to dict with lossRatio, imDrainRatio, weight arrays."""
    for field, fname, log_scale in (("lossRatio", "ccdf_loss.csv", True),
                                    ("imDrainRatio", "ccdf_im_drain.csv", False)):
        grid = threshold_grid([d[field] for d in per_mode.values()], n_points, log_scale)
        cols = {m: aggregate_ccdf(d[field], d["weight"], grid) for m, d in per_mode.items()}
        with open(os.path.join(out, fname), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold"] + [f"ccdf_{m.replace('-', '_')}" for m in MODES])
            for i, x in enumerate(grid):
                w.writerow([_fmt(x)] + [_fmt(cols[m][i]) if m in cols else "" for m in MODES])


def write_snapshot(path: str, setup, seed: int, mode: str):
    """Per-step margins (step, ccp, member, im, df, vmIncrement) for path 0."""
    _, steps = Simulator(setup, mode).run_batch(seed, [0], trace=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "ccp", "member", "im", "df", "vmIncrement"])
        for st in steps:
            for j, ccp in enumerate(setup.ccp_ids):
                for k, member in enumerate(setup.member_ids):
                    w.writerow([st["step"], ccp, member, _fmt(st["im"][0, j, k]), _fmt(st["df"][0, j, k]),
                                _fmt(st["vm"][0, j, k])])


def manifest_config(config: RunConfig) -> dict:
    echo = dict(config.resolved)
    echo.pop("threads", None)  # execution detail; results do not depend on it
    return echo


class Staging:
    """Write outputs to a scratch directory and move them into place on success."""

    def __init__(self, out: str):
        self.out = out

    def __enter__(self):
        os.makedirs(self.out, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".partial-", dir=self.out)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            for name in sorted(os.listdir(self.tmp)):
                os.replace(os.path.join(self.tmp, name), os.path.join(self.out, name))
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _config(args) -> RunConfig:
    config = load_config(args.config)
    overrides = {}
    for key in ("mode", "paths", "seed", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return config.with_overrides(**overrides) if overrides else config


def cmd_init(args):
    write_init(args.out)
    log.info("wrote template configuration and synthetic data to %s", args.out)


def cmd_validate(args):
    config = _config(args)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "resolved_config.yaml"), "w") as fh:
            fh.write(dump_config(config))
    log.info("configuration valid (digest %s, %d steps)", config.digest()[:12], config.n_steps)


def cmd_calibrate(args):
    config = _config(args)
    setup, report = build_setup(config)
    with Staging(args.out) as tmp:
        with open(os.path.join(tmp, "barriers.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["member", "barrier", "initial_assets", "asset_vol", "achieved_default_prob"])
            for k, m in enumerate(setup.member_ids):
                w.writerow([m, _fmt(setup.barriers[k]), _fmt(setup.initial_assets[k]), _fmt(setup.asset_vol[k]),
                            _fmt(report.achieved_default_prob[m])])
    log.info("calibrated %d barriers in %.1fs", len(setup.member_ids), report.timings.get("calibration", 0.0))


def read_barriers(path: str, member_ids) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = {r["member"]: float(r["barrier"]) for r in csv.DictReader(fh)}
    missing = [m for m in member_ids if m not in rows]
    if missing:
        raise ConfigError(path, f"no barrier for members {missing[:5]}")
    return np.array([rows[m] for m in member_ids])


def cmd_run(args):
    config = _config(args)
    r = config.resolved
    barriers = None
    if args.barriers:
        from .experiment import load_members
        barriers = read_barriers(args.barriers, [p.id for p in load_members(config)])
    t0 = time.perf_counter()
    setup, report = build_setup(config, barriers=barriers)
    log.info("setup done in %.1fs (seed provenance: paths use SeedSequence(%d, spawn_key=(i,)))",
             time.perf_counter() - t0, r["seed"])
    modes = list(MODES) if r["mode"] == "all" else [r["mode"]]
    results = {}
    for mode in modes:
        t1 = time.perf_counter()
        results[mode] = run_paths(setup, mode, r["seed"], r["paths"], threads=r["threads"] or os.cpu_count() or 1,
                                  batch_size=r["batch_size"])
        log.info("mode %s: %d paths in %.1fs", mode, r["paths"], time.perf_counter() - t1)

    target = r["reweight_target"]
    if target is None:
        base = results.get("default-only") or results.get("feedback")
        target = float(np.mean(base.xi1)) if base is not None else 0.0
    thetas = {}
    for mode in ("feedback", "default-only"):
        if mode in results:
            results[mode].weight, thetas[mode] = reweight_paths(results[mode].xi1, target)

    summary = {}
    for mode, res in results.items():
        summary[mode] = {
            "mean_xi1": float(np.average(res.xi1, weights=res.weight)),
            "mean_defaults": float(np.average(res.n_defaults, weights=res.weight)),
            "q99_loss_ratio": weighted_quantile(res.loss_ratio, res.weight, 0.99),
            "q99_im_drain_ratio": weighted_quantile(res.im_drain_ratio, res.weight, 0.99),
            "ccp_failure_paths": int((res.ccp_failures > 0).sum()),
            "tilt": thetas.get(mode, 0.0),
        }
    with Staging(args.out) as tmp:
        per_mode = {}
        for mode, res in results.items():
            write_paths(os.path.join(tmp, f"paths_{mode}.csv"), res)
            per_mode[mode] = {"lossRatio": res.loss_ratio, "imDrainRatio": res.im_drain_ratio, "weight": res.weight}
            if r["output"]["margin_snapshot"]:
                write_snapshot(os.path.join(tmp, f"margin_snapshot_{mode}.csv"), setup, r["seed"], mode)
        write_ccdfs(tmp, per_mode, r["output"]["ccdf_points"])
        manifest = {
            "version": f"ccpsim-{__version__}",
            "config_sha256": config.digest(),
            "seed": r["seed"],
            "path_range": [0, r["paths"] - 1],
            "modes": modes,
            "reweight_target": target,
            "summary": summary,
            "setup": {"initial_im": report.initial_im, "default_fund": report.default_fund,
                      "position_resamples": report.resamples, "fits": report.fits,
                      "barriers": report.barriers, "asset_vol": report.asset_vol},
            "config": manifest_config(config),
        }
        with open(os.path.join(tmp, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
    for mode, s in summary.items():
        log.info("%s: q99 loss %.4g, q99 drain %.4g, mean defaults %.2f", mode, s["q99_loss_ratio"],
                 s["q99_im_drain_ratio"], s["mean_defaults"])


def cmd_ccdf(args):
    per_mode = {}
    for mode in MODES:
        p = os.path.join(args.out, f"paths_{mode}.csv")
        if os.path.exists(p):
            per_mode[mode] = read_paths(p)
    if not per_mode:
        raise ConfigError(args.out, "no paths_<mode>.csv files found")
    n_points = 200
    if args.config:
        n_points = load_config(args.config)["output"]["ccdf_points"]
    with Staging(args.out) as tmp:
        write_ccdfs(tmp, per_mode, n_points)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccpsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, help="run configuration (YAML)")
        sp.add_argument("--out", default="out", help="output directory")

    sp = sub.add_parser("init", help="write a template configuration and synthetic data")
    sp.add_argument("--out", default="experiment")
    sp.set_defaults(func=cmd_init)
    sp = sub.add_parser("validate", help="check a configuration")
    common(sp)
    sp.set_defaults(func=cmd_validate, out=None)
    sp = sub.add_parser("calibrate", help="calibrate default barriers")
    common(sp)
    sp.set_defaults(func=cmd_calibrate)
    sp = sub.add_parser("run", help="simulate and write path summaries and CCDFs")
    common(sp)
    sp.add_argument("--mode", choices=MODE_CHOICES)
    sp.add_argument("--paths", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threads", type=int, help="worker processes (default: hardware parallelism)")
    sp.add_argument("--barriers", help="reuse barriers.csv from 'calibrate'")
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("ccdf", help="re-aggregate existing path summaries in --out")
    common(sp, needs_config=False)
    sp.set_defaults(func=cmd_ccdf)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return exc.exit_status
    except CalibrationError as exc:
        log.error("[%s] %s", exc.code, exc)
        return exc.exit_status
    except CCPSimError as exc:
        log.error("[%s] %s", exc.code, exc)
        return exc.exit_status
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.exception("unexpected failure: %s", exc)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
