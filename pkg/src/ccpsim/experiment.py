"""Assemble a :class:`SimulationSetup` from a validated run configuration.

Steps: read the category, member, aggregate and known-position tables; fit
gross notionals and randomise net positions per CCP and category; generate
the synthetic historical scenario set; derive initial margins, add-ons and
default funds; size member asset volatilities from their CCP books; and
calibrate default barriers.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, parse_jump
from .engine import SimulationSetup, StressScenario
from .errors import ConfigError, InvariantError, MissingFileError, SchemaError, UnknownCategoryError
from .instruments import Book, Category, RateCurve, SwapSpec, ZeroShift
from .margining import (BenchmarkSet, allocate_pro_rata, cover_two_default_fund, default_benchmarks,
                        fit_regression, loss_over_im, regressed_losses, stressed_losses, top_losses)
from .market import (FxParams, RatesParams, TermStructure, compound_poisson_layers, step_rates)
from .network import (MemberProfile, assign_weights, calibrate_barriers, check_ranks, fit_exponential,
                      randomize_net_positions)

log = logging.getLogger(__name__)


def read_table(path: str, field_name: str, required: tuple) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
            header = rows[0].keys() if rows else []
    except FileNotFoundError:
        raise MissingFileError(f"data.{field_name}", f"file not found: {path}") from None
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"data.{field_name}", f"missing columns {missing}")
    return rows


def _float(row, key, path):
    try:
        return float(row[key])
    except (TypeError, ValueError):
        raise SchemaError(path, f"column {key!r}: not a number: {row[key]!r}") from None


def _bool(text) -> bool:
    return str(text).strip().lower() in ("1", "true", "yes", "y")


def load_categories(config: RunConfig) -> list[Category]:
    rows = read_table(config.data_path("categories"), "categories",
                      ("id", "currency", "tenor_bucket", "representative_tenor"))
    cats, seen = [], set()
    for i, row in enumerate(rows):
        path = f"categories[{i}]"
        if row["id"] in seen:
            raise InvariantError(path, f"duplicate category id {row['id']!r}")
        seen.add(row["id"])
        if row["currency"] not in config["economies"]:
            raise InvariantError(path, f"currency {row['currency']!r} has no economy configured")
        tenor = _float(row, "representative_tenor", path)
        if tenor <= config["horizon"]:
            raise InvariantError(path, "representative tenor must exceed the simulation horizon")
        cats.append(Category(row["id"], row["currency"], row["tenor_bucket"], tenor,
                             row.get("trade_type") or "fixed-float"))
    if not cats:
        raise InvariantError("categories", "no categories defined")
    return cats


def load_members(config: RunConfig) -> list[MemberProfile]:
    rows = read_table(config.data_path("members"), "members",
                      ("id", "rank", "assets", "equity", "type", "target_default_prob", "known_member"))
    out = []
    for i, row in enumerate(rows):
        path = f"members[{i}]"
        rank = _float(row, "rank", path)
        out.append(MemberProfile(row["id"], int(rank), _float(row, "assets", path), _float(row, "equity", path),
                                 row["type"], _float(row, "target_default_prob", path),
                                 _bool(row["known_member"])))
    if len({p.id for p in out}) != len(out):
        raise InvariantError("members.id", "duplicate member ids")
    check_ranks(out)
    if not any(p.known_member for p in out):
        raise InvariantError("members.known_member", "the reference group must contain at least one member")
    return out


@dataclass
class BuildReport:
    """Diagnostics of the setup phase, echoed into the run manifest."""

    fits: list = field(default_factory=list)
    resamples: int = 0
    barriers: dict = field(default_factory=dict)
    achieved_default_prob: dict = field(default_factory=dict)
    asset_vol: dict = field(default_factory=dict)
    initial_im: dict = field(default_factory=dict)
    default_fund: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def build_curves(config: RunConfig):
    rates, curves = [], {}
    for ccy, d in config["economies"].items():
        fwd = TermStructure.parse(d["forward_curve"])
        rates.append(RatesParams(fwd, d["theta1"], d["theta2"], TermStructure.parse(d["vol"]),
                                 d["vol_ratio"], d["correlation"], d["systemic_beta"],
                                 parse_jump(d["jump"], f"economies.{ccy}.jump")))
        curves[ccy] = RateCurve(fwd, d["theta1"], d["theta2"])
    fx = [FxParams(TermStructure.parse(d["vol"]), d["systemic_beta"], parse_jump(d["jump"], f"fx.{c}.jump"),
                   d["spot"]) for c, d in config["fx"].items()]
    return rates, curves, fx


def build_positions(config: RunConfig, cats, members, report: BuildReport):
    """Net positions (J, M, C) per CCP from aggregates and known positions."""
    ccp_ids = [c["id"] for c in config["ccps"]]
    cat_ids = [c.id for c in cats]
    member_ids = [p.id for p in members]
    ranks = np.array([p.rank for p in members])
    known = np.array([p.known_member for p in members])
    agg = read_table(config.data_path("aggregates"), "aggregates", ("ccp", "category", "gross", "known_gross"))
    kp = read_table(config.data_path("known_positions"), "known_positions", ("ccp", "category", "member", "delta"))
    deltas = np.zeros((len(ccp_ids), len(cats), len(members)))
    for i, row in enumerate(kp):
        path = f"known_positions[{i}]"
        if row["ccp"] not in ccp_ids:
            raise InvariantError(path, f"unknown CCP {row['ccp']!r}")
        if row["category"] not in cat_ids:
            raise UnknownCategoryError(path, f"unknown category {row['category']!r}")
        if row["member"] not in member_ids:
            raise InvariantError(path, f"unknown member {row['member']!r}")
        k = member_ids.index(row["member"])
        if not known[k]:
            raise InvariantError(path, f"member {row['member']!r} is not in the reference group")
        deltas[ccp_ids.index(row["ccp"]), cat_ids.index(row["category"]), k] = _float(row, "delta", path)
    pos = np.zeros((len(ccp_ids), len(members), len(cats)))
    root = np.random.SeedSequence(config["positions_seed"])
    seen = set()
    for i, row in enumerate(agg):
        path = f"aggregates[{i}]"
        if row["ccp"] not in ccp_ids:
            raise InvariantError(path, f"unknown CCP {row['ccp']!r}")
        if row["category"] not in cat_ids:
            raise UnknownCategoryError(path, f"unknown category {row['category']!r}")
        j, c = ccp_ids.index(row["ccp"]), cat_ids.index(row["category"])
        if (j, c) in seen:
            raise InvariantError(path, "duplicate aggregate row")
        seen.add((j, c))
        fit = fit_exponential(_float(row, "gross", path), _float(row, "known_gross", path), ranks, known)
        rng = np.random.default_rng(np.random.SeedSequence(root.entropy, spawn_key=(j, c)))
        d, n_res = randomize_net_positions(rng, fit.notionals, known, deltas[j, c], config["delta_limit"],
                                           category=f"{row['ccp']}/{row['category']}")
        pos[j, :, c] = d
        report.resamples += n_res
        report.fits.append({"ccp": row["ccp"], "category": row["category"], "alpha": fit.alpha, "beta": fit.beta})
    for j, c in zip(*np.nonzero(np.abs(deltas).sum(axis=2))):
        if (j, c) not in seen:
            raise InvariantError("known_positions", f"position given for {ccp_ids[j]}/{cat_ids[c]} "
                                 "without an aggregate row")
    return pos


def historical_changes(config: RunConfig, book: Book, rates, fx, n: int, stressed_fraction: float, seed: int):
    """Synthetic one-step changes of unit values, shape (n, C).

    Drawn from the model's own drivers started at t=0: a fraction of the
    scenarios is generated in the most stressed regime, the rest in the calm
    one, standing in for a history that contains a crisis period.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cfg = config.regime
    dt = config.dt
    sj = parse_jump(config["systemic_jump"], "systemic_jump")
    n_stressed = int(round(stressed_fraction * n))
    regime = np.where(np.arange(n) < n_stressed, cfg.n_states, 1)
    mult = cfg.multiplier(regime)
    active = cfg.active_layers(regime)
    lw = cfg.layer_weights()
    sqdt = np.sqrt(dt)
    sys_sum, sys_log = compound_poisson_layers(rng, [sj.intensity], sj.log_mean, sj.log_std, dt, lw, (n,))
    sys_j = np.sum(np.where(active, sys_sum[:, 0], 0.0), axis=-1)
    sys_z = np.sum(np.where(active, sys_log[:, 0], 0.0), axis=-1)
    dn_sys = sys_j - sj.intensity * mult * dt * sj.mean_jump
    e = len(rates)
    x1, x2, r = np.zeros((n, e)), np.zeros((n, e)), np.zeros((n, e))
    y1 = np.zeros((n, e))
    for k, p in enumerate(rates):
        z = rng.standard_normal((n, 2))
        sums, _ = compound_poisson_layers(rng, [p.jump.intensity], p.jump.log_mean, p.jump.log_std, dt, lw, (n,))
        dn = np.sum(np.where(active, sums[:, 0], 0.0), axis=-1) - p.jump.intensity * mult * dt * p.jump.mean_jump
        r0 = np.full(n, float(p.forward_curve(0.0)))
        x1[:, k], x2[:, k], r[:, k] = step_rates(np.zeros(n), np.zeros(n), r0, 0.0, dt, p,
                                                 mult * sqdt * z[:, 0], mult * sqdt * z[:, 1], dn_sys, dn)
        y1[:, k] = r[:, k] - p.forward_curve(dt) - x2[:, k]
    spots = np.array([p.spot for p in fx])
    new_fx = np.broadcast_to(spots, (n, len(fx))).copy()
    for k, p in enumerate(fx):
        z = rng.standard_normal(n)
        _, logs = compound_poisson_layers(rng, [p.jump.intensity], p.jump.log_mean, p.jump.log_std, dt, lw, (n,))
        idio = np.sum(np.where(active, logs[:, 0], 0.0), axis=-1)
        sigma = float(p.vol(0.0))
        comp = p.jump.intensity * p.jump.mean_jump + sj.intensity * float(sj.log_loading_mean(p.systemic_beta))
        new_fx[:, k] = spots[k] * np.exp(sigma * mult * sqdt * z - 0.5 * (sigma * mult) ** 2 * dt
                                         - mult * dt * comp + p.systemic_beta * sys_z + idio)
    v0 = book.unit_values(0.0, np.zeros((1, e)), np.zeros((1, e)), spots[None, :])
    v1 = book.unit_values(dt, y1, x2, new_fx)
    return v1 - v0


def build_scenarios(config: RunConfig, economies, fx_ccys):
    """Union of all CCPs' stress scenarios with a (J, S) usage mask."""
    union, index = [], {}
    per_ccp = []
    for ccp in config["ccps"]:
        ids = []
        for sc in ccp["scenarios"]:
            key = (sc["id"], repr(sorted(sc["rates"].items())), repr(sorted(sc["fx"].items())))
            if key not in index:
                shifts = tuple(ZeroShift(**sc["rates"][e]) if e in sc["rates"] else ZeroShift() for e in economies)
                shock = np.array([sc["fx"].get(c, 0.0) for c in fx_ccys])
                index[key] = len(union)
                union.append(StressScenario(sc["id"], shifts, shock))
            ids.append(index[key])
        per_ccp.append(ids)
    mask = np.zeros((len(per_ccp), len(union)), dtype=bool)
    for j, ids in enumerate(per_ccp):
        mask[j, ids] = True
    return union, mask


def build_setup(config: RunConfig, calibrate: bool = True, barriers=None):
    """Build the experiment's :class:`SimulationSetup` and a diagnostics report."""
    report = BuildReport()
    t0 = time.perf_counter()
    cats = load_categories(config)
    members = load_members(config)
    rates, curves, fx = build_curves(config)
    economies = list(config["economies"])
    fx_ccys = list(config["fx"])
    specs = [SwapSpec.at_market(c, curves[c.currency]) for c in cats]
    book = Book(specs, economies, fx_ccys, config["reporting_currency"])
    positions = build_positions(config, cats, members, report)
    report.timings["network"] = time.perf_counter() - t0

    m = config["margin"]
    changes = historical_changes(config, book, rates, fx, m["history"], m["stressed_fraction"], m["history_seed"])
    bench = BenchmarkSet.build(default_benchmarks([c.currency for c in cats]), changes, m["var_level"])
    q = bench.q
    coef = fit_regression(positions, bench)
    top = top_losses(regressed_losses(coef, bench), q)
    var0 = np.maximum(top[..., q - 1], 0.0)
    add_on = m["add_on"] * var0
    im0 = var0 + add_on

    scenarios, mask = build_scenarios(config, economies, fx_ccys)
    spots = np.array([p.spot for p in fx])
    zeros = np.zeros((1, len(economies)))
    v0 = book.unit_values(0.0, zeros, zeros, spots[None, :])[0]
    shocked = np.stack([book.unit_values(0.0, zeros, zeros, spots[None, :], sc.shifts, sc.fx_shock)[0]
                        for sc in scenarios])
    skin = np.array([c["skin_in_the_game"] for c in config["ccps"]], dtype=float)
    loim = loss_over_im(stressed_losses(positions, v0[None, :], shocked[None]), im0[..., None])
    loim = np.where(mask[:, None, :], loim, 0.0)
    fund = cover_two_default_fund(loim, skin)
    df0 = allocate_pro_rata(fund, im0, m["precision"])

    weights = assign_weights([p.balance_sheet_assets for p in members])
    a0 = np.array([p.balance_sheet_assets for p in members])
    # CCP P&L scale per member: annualised std of its total one-step book change
    pnl = np.einsum("jmc,hc->hm", positions, changes)
    ccp_vol = pnl.std(axis=0) / np.sqrt(config.dt)
    a = config["assets"]
    mult = np.array([a["vol_multiple"][p.member_type] for p in members])
    lo, hi = a["vol_bounds"]
    asset_vol = np.clip(mult * ccp_vol / a0, lo, hi)
    asset_beta = np.full(len(members), float(a["systemic_beta"]))
    asset_jump = parse_jump(a["jump"], "assets.jump")
    sj = parse_jump(config["systemic_jump"], "systemic_jump")

    if barriers is None:
        if calibrate:
            t1 = time.perf_counter()
            c = config["calibration"]
            barriers, achieved = calibrate_barriers(members, asset_vol, asset_beta, config.dt, config.n_steps,
                                                    c["paths"], c["seed"], sj, asset_jump)
            report.timings["calibration"] = time.perf_counter() - t1
            report.achieved_default_prob = {p.id: float(x) for p, x in zip(members, achieved)}
        else:
            barriers = np.full(len(members), -np.inf)
    barriers = np.asarray(barriers, dtype=float)

    report.barriers = {p.id: float(b) for p, b in zip(members, barriers)}
    report.asset_vol = {p.id: float(v) for p, v in zip(members, asset_vol)}
    ccp_ids = [c["id"] for c in config["ccps"]]
    report.initial_im = {ccp_ids[j]: float(im0[j].sum()) for j in range(len(ccp_ids))}
    report.default_fund = {ccp_ids[j]: float(fund[j]) for j in range(len(ccp_ids))}

    setup = SimulationSetup(
        regime=config.regime, dt=config.dt, n_steps=config.n_steps, book=book, rates=rates, fx=fx,
        systemic_jump=sj, member_ids=[p.id for p in members], ccp_ids=ccp_ids, weights=weights,
        initial_assets=a0, asset_vol=asset_vol, asset_beta=asset_beta, asset_jump=asset_jump,
        barriers=barriers, positions=positions, benchmarks=bench, add_on=add_on, initial_top=top,
        initial_im=im0, initial_df=df0, skin_in_the_game=skin, scenarios=scenarios, scenario_mask=mask,
        xyz_mask=np.array([p.known_member for p in members]), xyz_equity=float(config["xyz_equity"]),
        vol_ratio_decay=m["vol_ratio_decay"], vol_ratio_in_drain=m["vol_ratio_in_drain"],
        precision=m["precision"])
    report.timings["setup"] = time.perf_counter() - t0
    return setup, report
