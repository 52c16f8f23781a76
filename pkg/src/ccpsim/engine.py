"""Coupled path simulation of the clearing network.

Paths are simulated in fixed-size batches with every state array carrying the
path on its leading axis.  Each path draws its own random tape from a seed
sequence keyed by the path index, and batch membership depends only on the
path index, so results do not depend on the number of worker processes.

Per step the phases run in a fixed order: market evolution, margin update,
default test, waterfall, porting, stress update, default fund resize.
"""
from __future__ import annotations

import logging
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .errors import CCPSimError, PathError, ReweightingError
from .instruments import Book, ZeroShift
from .margining import (BenchmarkSet, allocate_pro_rata, cover_two_default_fund, ewma_vol_ratio,
                        fit_regression, insert_losses, loss_over_im, regressed_losses,
                        stressed_losses, top_losses)
from .market import (FxParams, JumpSpec, RatesParams, RegimeConfig, bridge_log_minimum,
                     compound_poisson_layers, step_rates, stress_indicator)

log = logging.getLogger(__name__)

MODES = ("feedback", "default-only", "no-default")


@dataclass(frozen=True)
class StressScenario:
    id: str
    shifts: tuple  # one ZeroShift per economy
    fx_shock: np.ndarray  # relative FX move per foreign currency


@dataclass
class SimulationSetup:
    """Everything a path needs, fixed for the whole experiment.

    Member arrays have length M, CCP arrays lead with J, and position arrays
    are (J, M, C) in units of notional.
    """

    regime: RegimeConfig
    dt: float
    n_steps: int
    book: Book
    rates: Sequence[RatesParams]
    fx: Sequence[FxParams]
    systemic_jump: JumpSpec
    member_ids: list
    ccp_ids: list
    weights: np.ndarray
    initial_assets: np.ndarray
    asset_vol: np.ndarray
    asset_beta: np.ndarray
    asset_jump: JumpSpec
    barriers: np.ndarray
    positions: np.ndarray
    benchmarks: BenchmarkSet
    add_on: np.ndarray
    initial_top: np.ndarray  # (J, M, q) retained scenario losses at t=0
    initial_im: np.ndarray
    initial_df: np.ndarray
    skin_in_the_game: np.ndarray
    scenarios: Sequence[StressScenario]
    scenario_mask: np.ndarray  # (J, S), which scenarios each CCP uses
    xyz_mask: np.ndarray
    xyz_equity: float
    vol_ratio_decay: float = 0.9
    vol_ratio_in_drain: bool = False
    precision: float = 0.01

    @property
    def n_members(self) -> int:
        return len(self.member_ids)

    @property
    def n_ccps(self) -> int:
        return len(self.ccp_ids)

    @property
    def q(self) -> int:
        return self.benchmarks.q

    def with_equity(self, equity: float) -> "SimulationSetup":
        from dataclasses import replace
        return replace(self, xyz_equity=equity)


# ---------------------------------------------------------------------------
# random tape
# ---------------------------------------------------------------------------

def path_rng(seed: int, path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(path,)))


def draw_tape(setup: SimulationSetup, seed: int, path: int) -> dict:
    """All random numbers one path consumes, independent of the regime path.

    Jump layers are drawn for every regime, so the same tape drives the
    feedback, default-only and no-default configurations.
    """
    rng = path_rng(seed, path)
    n, e, f, m = setup.n_steps, len(setup.rates), len(setup.fx), setup.n_members
    dt, lw = setup.dt, setup.regime.layer_weights()
    sj = setup.systemic_jump
    tape = {
        "z_rates": rng.standard_normal((n, e, 2)),
        "z_fx": rng.standard_normal((n, f)),
        "z_assets": rng.standard_normal((n, m)),
        "u_bridge": rng.random((n, m)),
    }
    sys_sum, sys_log = compound_poisson_layers(rng, [sj.intensity], sj.log_mean, sj.log_std, dt, lw, (n,))
    tape["sys_sum"], tape["sys_log"] = sys_sum[:, 0], sys_log[:, 0]
    rj = [p.jump for p in setup.rates]
    tape["rate_sum"], _ = compound_poisson_layers(
        rng, [j.intensity for j in rj], [j.log_mean for j in rj], [j.log_std for j in rj], dt, lw, (n,))
    fj = [p.jump for p in setup.fx]
    if f:
        _, tape["fx_log"] = compound_poisson_layers(
            rng, [j.intensity for j in fj], [j.log_mean for j in fj], [j.log_std for j in fj], dt, lw, (n,))
    else:
        tape["fx_log"] = np.zeros((n, 0, lw.size))
    aj = setup.asset_jump
    _, tape["asset_log"] = compound_poisson_layers(rng, np.full(m, aj.intensity), aj.log_mean,
                                                   aj.log_std, dt, lw, (n,))
    return tape


def stack_tapes(tapes: Sequence[dict]) -> dict:
    return {k: np.stack([t[k] for t in tapes]) for k in tapes[0]}


# ---------------------------------------------------------------------------
# waterfall helpers
# ---------------------------------------------------------------------------

def compute_loss_imdf(value_change, im, df, defaulted):
    """Shortfall of defaulters beyond their own IM and DF, ``sum (dV + IM + DF)^-``.

    Arrays are (..., M); ``defaulted`` selects the members defaulting in the
    step.  Shortfalls are not netted across defaulters.
    """
    shortfall = np.maximum(-(np.asarray(value_change) + im + df), 0.0)
    return np.sum(np.where(defaulted, shortfall, 0.0), axis=-1)


def resolve_ccp_failure(residual, survivor_df, survivor_im, precision: float = 0.01):
    """Split a loss that exhausts the waterfall among surviving members.

    Survivors' DF contributions are consumed first; what remains is divided in
    proportion to the survivors' closing IM.  Returns the per-member charge.
    """
    residual = np.asarray(residual, dtype=float)
    survivor_df = np.asarray(survivor_df, dtype=float)
    beyond = np.maximum(residual - survivor_df.sum(axis=-1), 0.0)
    return survivor_df + allocate_pro_rata(beyond, survivor_im, precision)


def waterfall(loss, skin_remaining, survivor_df, survivor_im, precision: float = 0.01):
    """Run one step's CCP-level loss through the default waterfall.

    ``loss`` and ``skin_remaining`` are (...,); member arrays are (..., M)
    with zeros for non-survivors.  Skin in the game absorbs first; the rest is
    charged to survivors pro rata by IM unless it strictly exceeds their DF,
    in which case the CCP fails.  Returns ``(charges, absorbed, failed,
    unallocated)`` where ``unallocated`` is the rounding residue.
    """
    loss = np.asarray(loss, dtype=float)
    absorbed = np.minimum(loss, skin_remaining)
    residual = loss - absorbed
    failed = residual > survivor_df.sum(axis=-1)
    normal = allocate_pro_rata(np.where(failed, 0.0, residual), survivor_im, precision)
    fail = resolve_ccp_failure(np.where(failed, residual, 0.0), np.where(failed[..., None], survivor_df, 0.0),
                               survivor_im, precision)
    charges = normal + fail
    return charges, absorbed, failed, residual - charges.sum(axis=-1)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass
class PathResults:
    """Per-path summaries (struct of arrays) for one simulation mode."""

    mode: str
    seed: int
    path_index: np.ndarray
    loss_ratio: np.ndarray
    im_drain_ratio: np.ndarray
    n_defaults: np.ndarray
    xi1: np.ndarray
    ccp_failures: np.ndarray
    weight: np.ndarray
    default_times: np.ndarray  # (P, M), inf if alive
    c_total: np.ndarray  # (P, M) terminal ledger
    im_delta: np.ndarray
    vm_cumulative: np.ndarray
    allocated_losses: np.ndarray
    checks: dict = field(default_factory=dict)

    def __len__(self):
        return self.path_index.size

    @classmethod
    def concat(cls, parts: Sequence["PathResults"]) -> "PathResults":
        first = parts[0]
        arrays = {k: np.concatenate([getattr(p, k) for p in parts])
                  for k in ("path_index", "loss_ratio", "im_drain_ratio", "n_defaults", "xi1",
                            "ccp_failures", "weight", "default_times", "c_total", "im_delta",
                            "vm_cumulative", "allocated_losses")}
        checks = {}
        for p in parts:
            for k, v in p.checks.items():
                checks[k] = max(checks.get(k, 0.0), v)
        return cls(first.mode, first.seed, checks=checks, **arrays)


# ---------------------------------------------------------------------------
# the simulator
# ---------------------------------------------------------------------------

class Simulator:
    """Batched path simulator over a fixed :class:`SimulationSetup`."""

    def __init__(self, setup: SimulationSetup, mode: str = "feedback"):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.setup = setup
        self.mode = mode
        s = setup
        self._barriers = np.full(s.n_members, -np.inf) if mode == "no-default" else np.asarray(s.barriers)
        aj, sj = s.asset_jump, s.systemic_jump
        self._asset_comp = aj.intensity * aj.mean_jump + sj.intensity * sj.log_loading_mean(s.asset_beta)

    # -- market ----------------------------------------------------------
    def _unit_values(self, t, x1, x2, r, fx, shifts=None, fx_shock=None):
        y1 = np.stack([r[:, e] - p.forward_curve(t) - x2[:, e] for e, p in enumerate(self.setup.rates)], axis=-1)
        return self.setup.book.unit_values(t, y1, x2, fx, shifts, fx_shock)

    def _shocked_values(self, t, x1, x2, r, fx):
        cols = [self._unit_values(t, x1, x2, r, fx, sc.shifts, sc.fx_shock) for sc in self.setup.scenarios]
        return np.stack(cols, axis=1)

    def run_batch(self, seed: int, paths: Sequence[int], checks: bool = False, trace: bool = False):
        s = self.setup
        paths = np.asarray(paths)
        try:
            tape = stack_tapes([draw_tape(s, seed, int(p)) for p in paths])
            return self._simulate(seed, paths, tape, checks, trace)
        except CCPSimError as exc:
            if isinstance(exc, PathError):
                raise
            raise PathError(seed, int(paths[0]), exc) from exc
        except (FloatingPointError, ValueError, ZeroDivisionError) as exc:
            raise PathError(seed, int(paths[0]), exc) from exc

    def _simulate(self, seed, paths, tape, checks, trace):
        s = self.setup
        cfg = s.regime
        nb, n_steps, dt = paths.size, s.n_steps, s.dt
        J, M, C, q = s.n_ccps, s.n_members, s.book.n_categories, s.q
        sqdt = np.sqrt(dt)
        sj = s.systemic_jump
        feedback = self.mode == "feedback"

        pos = np.broadcast_to(s.positions, (nb, J, M, C)).copy()
        top = np.broadcast_to(s.initial_top, (nb, J, M, q)).copy()
        im = np.broadcast_to(s.initial_im, (nb, J, M)).copy()
        im_plain = im.copy()  # IM without the vol-ratio scaling
        df = np.broadcast_to(s.initial_df, (nb, J, M)).copy()
        add_on = s.add_on
        skin = np.broadcast_to(s.skin_in_the_game, (nb, J)).astype(float).copy()
        alive = np.ones((nb, M), dtype=bool)
        ccp_alive = np.ones((nb, J), dtype=bool)
        tau = np.full((nb, M), np.inf)
        xi = np.zeros(nb)
        regime = np.ones(nb, dtype=int)
        vr_var = np.ones(nb)
        vr = np.ones(nb)

        n_econ = len(s.rates)
        x1 = np.zeros((nb, n_econ))
        x2 = np.zeros((nb, n_econ))
        r = np.stack([np.full(nb, float(p.forward_curve(0.0))) for p in s.rates], axis=-1)
        fx = np.broadcast_to(np.array([p.spot for p in s.fx], dtype=float), (nb, len(s.fx))).copy()
        assets = np.broadcast_to(s.initial_assets, (nb, M)).astype(float).copy()
        values = self._unit_values(0.0, x1, x2, r, fx)
        history = np.zeros((nb, n_steps, C))

        vm_cum = np.zeros((nb, M))
        alloc_cum = np.zeros((nb, M))
        im_delta = np.zeros((nb, M))
        df_delta = np.zeros((nb, M))
        drain_delta = np.zeros((nb, M))
        cash = np.zeros((nb, M))  # independent running sum of all CCP cash flows
        c_run = np.zeros((nb, M))  # cTotal updated step by step from the flows
        ccp_failures = np.zeros(nb, dtype=int)
        worst = {"ledger_identity": 0.0, "cash_accumulator": 0.0, "vm_conservation": 0.0,
                 "parity": 0.0, "loss_conservation": 0.0}
        steps_trace = []

        for i in range(n_steps):
            t, t1 = i * dt, (i + 1) * dt
            mult = cfg.multiplier(regime)
            active = cfg.active_layers(regime)

            # (1) market
            sys_j = np.sum(np.where(active, tape["sys_sum"][:, i], 0.0), axis=-1)
            sys_z = np.sum(np.where(active, tape["sys_log"][:, i], 0.0), axis=-1)
            dn_sys = sys_j - sj.intensity * mult * dt * sj.mean_jump
            for e, p in enumerate(s.rates):
                dw1 = mult * sqdt * tape["z_rates"][:, i, e, 0]
                dw2 = mult * sqdt * tape["z_rates"][:, i, e, 1]
                jumps = np.sum(np.where(active, tape["rate_sum"][:, i, e], 0.0), axis=-1)
                dn_idio = jumps - p.jump.intensity * mult * dt * p.jump.mean_jump
                x1[:, e], x2[:, e], r[:, e] = step_rates(x1[:, e], x2[:, e], r[:, e], t, dt, p,
                                                         dw1, dw2, dn_sys, dn_idio)
            for f, p in enumerate(s.fx):
                sigma = float(p.vol(t))
                idio = np.sum(np.where(active, tape["fx_log"][:, i, f], 0.0), axis=-1)
                comp = p.jump.intensity * p.jump.mean_jump + sj.intensity * float(sj.log_loading_mean(p.systemic_beta))
                log_step = (sigma * mult * sqdt * tape["z_fx"][:, i, f] - 0.5 * (sigma * mult) ** 2 * dt
                            - mult * dt * comp + p.systemic_beta * sys_z + idio)
                fx[:, f] = fx[:, f] * np.exp(log_step)
            sig_a = s.asset_vol[None, :] * mult[:, None]
            log_a = np.log(assets)
            log_end = (log_a + sig_a * sqdt * tape["z_assets"][:, i] - 0.5 * sig_a**2 * dt
                       - mult[:, None] * dt * self._asset_comp[None, :])
            log_min = bridge_log_minimum(log_a, log_end, sig_a**2 * dt, 1.0 - tape["u_bridge"][:, i])
            a_jumps = np.sum(np.where(active[:, None, :], tape["asset_log"][:, i], 0.0), axis=-1)
            assets = np.exp(log_end + s.asset_beta[None, :] * sys_z[:, None] + a_jumps)

            values_new = self._unit_values(t1, x1, x2, r, fx)
            du = values_new - values

            # (2) margin: VM, retained scenarios, IM
            acct = alive[:, None, :] & ccp_alive[:, :, None]
            vm = np.einsum("bjmc,bc->bjm", pos, du)
            if checks:
                gross = np.einsum("bjmc,bc->bj", np.abs(pos), np.abs(du))
                err = np.abs(np.where(acct, vm, 0.0).sum(-1)) / np.maximum(gross, 1e-300)
                worst["vm_conservation"] = max(worst["vm_conservation"], float(err.max(initial=0.0)))
            normalized = -vm / vr[:, None, None]
            new_top, _ = insert_losses(top, normalized)
            top = np.where(acct[..., None], new_top, top)
            history[:, i] = du / vr[:, None]
            vr_var, vr = ewma_vol_ratio(vr_var, mult, s.vol_ratio_decay)
            var_plain = np.maximum(top[..., q - 1], 0.0)
            im_old = im
            im = np.where(acct, vr[:, None, None] * var_plain + add_on, 0.0)
            im_plain_old = im_plain
            im_plain = np.where(acct, var_plain + add_on, 0.0)

            # (3) default test on the member's total position
            vm_m = vm.sum(axis=1)
            prior = vm_cum - im_delta - alloc_cum - df_delta
            tentative = prior + vm_m - (im - im_old).sum(axis=1)
            room = self._barriers[None, :] - prior
            with np.errstate(divide="ignore", invalid="ignore"):
                log_room = np.where(room > 0, np.log(np.where(room > 0, room, 1.0)), -np.inf)
            crossed = (assets + tentative <= self._barriers[None, :]) | (log_min <= log_room)
            new_def = alive & crossed
            surv = alive & ~new_def

            # (4)-(5) shortfall and waterfall per CCP
            dead_acct = new_def[:, None, :] & ccp_alive[:, :, None]
            loss = compute_loss_imdf(vm, im_old, df, dead_acct)
            surv_acct = surv[:, None, :] & ccp_alive[:, :, None]
            s_im = np.where(surv_acct, im, 0.0)
            charges, absorbed, failed, unallocated = waterfall(
                loss, skin, np.where(surv_acct, df, 0.0), s_im, s.precision)
            failed &= ccp_alive
            skin = skin - absorbed
            if checks:
                resid = np.abs(loss - absorbed - charges.sum(-1) - unallocated)
                scale = np.maximum(loss, 1.0)
                worst["loss_conservation"] = max(worst["loss_conservation"], float((resid / scale).max()))
                worst["unallocated"] = max(worst.get("unallocated", 0.0), float(np.abs(unallocated).max()))

            # (6) port defaulted books to survivors pro rata by IM
            def_pos = np.where(dead_acct[..., None], pos, 0.0).sum(axis=2)
            pos = np.where(dead_acct[..., None], 0.0, pos)
            ported = np.any(def_pos != 0.0, axis=-1) & ccp_alive & ~failed
            if ported.any():
                wsum = s_im.sum(-1, keepdims=True)
                share = np.where(wsum > 0, s_im / np.where(wsum > 0, wsum, 1.0),
                                 surv_acct / np.maximum(surv_acct.sum(-1, keepdims=True), 1))
                pos = pos + np.where(ported[..., None, None], share[..., None] * def_pos[:, :, None, :], 0.0)
                top, im, im_plain = self._rebuild(pos, top, im, im_plain, history[:, :i + 1], vr,
                                                  ported, surv_acct, add_on)

            # CCP failure: unwind, return IM; DF requirement drops to zero below
            if failed.any():
                ccp_failures += failed.sum(axis=1)
                ccp_alive &= ~failed
                pos = np.where(failed[:, :, None, None], 0.0, pos)
                im = np.where(failed[:, :, None], 0.0, im)
                im_plain = np.where(failed[:, :, None], 0.0, im_plain)

            # defaulters' accounts are consumed and their ledgers stop
            im = np.where(new_def[:, None, :], 0.0, im)
            im_plain = np.where(new_def[:, None, :], 0.0, im_plain)
            df_old = df
            df = np.where(new_def[:, None, :], 0.0, df)
            alive = surv
            tau = np.where(new_def, t1, tau)

            # (7) stress indicator and next regime
            xi = stress_indicator(s.weights, tau, t1, cfg.mean_reversion)
            regime = cfg.regime(xi) if feedback else np.ones(nb, dtype=int)

            # (8) Cover-2 resize among survivors
            surv_acct = alive[:, None, :] & ccp_alive[:, :, None]
            shocked = self._shocked_values(t1, x1, x2, r, fx)
            scen = stressed_losses(pos, values_new[:, None, :], shocked[:, None])
            loim = loss_over_im(scen, im[..., None])
            loim = np.where(s.scenario_mask[None, :, None, :] & surv_acct[..., None], loim, 0.0)
            fund = cover_two_default_fund(loim, skin, alive=surv_acct, strict=False)
            fund = np.where(ccp_alive, fund, 0.0)
            df = np.where(surv_acct, allocate_pro_rata(fund, np.where(surv_acct, im, 0.0), s.precision), 0.0)

            # ledger for survivors: flows of this step
            keep = alive
            d_im = np.where(keep, (im - im_old).sum(axis=1), 0.0)
            d_plain = np.where(keep, (im_plain - im_plain_old).sum(axis=1), 0.0)
            d_df = np.where(keep, (df - df_old).sum(axis=1), 0.0)
            d_vm = np.where(keep, vm_m, 0.0)
            d_alloc = np.where(keep, charges.sum(axis=1), 0.0)
            vm_cum += d_vm
            im_delta += d_im
            drain_delta += d_plain
            alloc_cum += d_alloc
            df_delta += d_df
            cash += d_vm - d_im - d_alloc - d_df
            c_run += d_vm - d_im - d_alloc
            values = values_new

            if checks:
                c_total = -im_delta + vm_cum - alloc_cum
                scale = np.maximum(np.abs(vm_cum) + np.abs(im_delta) + np.abs(alloc_cum) + np.abs(df_delta), 1.0)
                worst["cash_accumulator"] = max(worst["cash_accumulator"],
                                                float((np.abs(cash - (c_total - df_delta)) / scale).max()))
                worst["ledger_identity"] = max(worst["ledger_identity"],
                                               float((np.abs(c_run - c_total) / scale).max()))
                live = alive[:, None, :, None] & ccp_alive[:, :, None, None]
                net = np.where(live, pos, 0.0).sum(axis=2)
                gross_pos = np.abs(pos).sum(axis=2)
                worst["parity"] = max(worst["parity"], float((np.abs(net) / np.maximum(gross_pos, 1e-300)).max()))
            if trace:
                steps_trace.append({"step": i + 1, "im": im.copy(), "df": df.copy(), "vm": vm.copy(),
                                    "xi": xi.copy(), "regime": regime.copy(), "alive": alive.copy(),
                                    "ccp_alive": ccp_alive.copy()})

        equity = s.xyz_equity
        xyz = s.xyz_mask
        drain = im_delta if s.vol_ratio_in_drain else drain_delta
        res = PathResults(
            mode=self.mode, seed=seed, path_index=paths.copy(),
            loss_ratio=alloc_cum[:, xyz].sum(axis=1) / equity,
            im_drain_ratio=drain[:, xyz].sum(axis=1) / equity,
            n_defaults=(~alive).sum(axis=1), xi1=xi, ccp_failures=ccp_failures,
            weight=np.ones(nb), default_times=tau,
            c_total=-im_delta + vm_cum - alloc_cum, im_delta=im_delta, vm_cumulative=vm_cum,
            allocated_losses=alloc_cum, checks=worst if checks else {})
        if trace:
            return res, steps_trace
        return res

    def _rebuild(self, pos, top, im, im_plain, history, vr, which, acct, add_on):
        """Re-derive retained scenarios for CCP books that changed by porting.

        The new book is regressed on the benchmarks for the historical set and
        revalued on the path's realised (vol-normalised) moves so far.
        """
        s = self.setup
        q = s.q
        b_idx, j_idx = np.nonzero(which)
        books = pos[b_idx, j_idx]  # (K, M, C)
        coef = fit_regression(books, s.benchmarks)
        hist_top = top_losses(regressed_losses(coef, s.benchmarks), q, overwrite=True)  # (K, M, q)
        realized = -np.einsum("kmc,knc->kmn", books, history[b_idx])
        new_top = top_losses(np.concatenate([hist_top, realized], axis=-1), q)
        top = top.copy()
        mask = acct[b_idx, j_idx]
        top[b_idx, j_idx] = np.where(mask[..., None], new_top, top[b_idx, j_idx])
        var_plain = np.maximum(top[..., q - 1], 0.0)
        rebuilt = which[:, :, None] & acct
        im = np.where(rebuilt, vr[:, None, None] * var_plain + add_on, im)
        im_plain = np.where(rebuilt, var_plain + add_on, im_plain)
        return top, im, im_plain


# ---------------------------------------------------------------------------
# drivers over many paths
# ---------------------------------------------------------------------------

_WORKER = {}


def _init_worker(setup, mode):
    _WORKER["sim"] = Simulator(setup, mode)


def _run_chunk(args):
    seed, paths, checks = args
    return _WORKER["sim"].run_batch(seed, paths, checks=checks)


def batches(n_paths: int, batch_size: int, start: int = 0):
    idx = np.arange(start, start + n_paths)
    return [idx[k:k + batch_size] for k in range(0, n_paths, batch_size)]


def run_paths(setup: SimulationSetup, mode: str, seed: int, n_paths: int, threads: int = 1,
              batch_size: int = 256, checks: bool = False, start: int = 0) -> PathResults:
    """Simulate ``n_paths`` paths, optionally across worker processes.

    Batches are formed from path indices alone and results are concatenated
    in path order, so the output is independent of ``threads``.
    """
    if n_paths <= 0:
        raise ValueError("n_paths must be positive")
    chunks = batches(n_paths, batch_size, start)
    if threads <= 1 or len(chunks) == 1:
        sim = Simulator(setup, mode)
        parts = [sim.run_batch(seed, c, checks=checks) for c in chunks]
    else:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=threads, mp_context=ctx, initializer=_init_worker,
                                 initargs=(setup, mode)) as pool:
            parts = list(pool.map(_run_chunk, [(seed, c, checks) for c in chunks]))
    return PathResults.concat(parts)


def run_path(setup: SimulationSetup, seed: int, path: int = 0, mode: str = "feedback",
             trace: bool = False):
    """Single path convenience wrapper (returns the trace too when asked)."""
    return Simulator(setup, mode).run_batch(seed, [path], checks=True, trace=trace)


# ---------------------------------------------------------------------------
# reweighting and aggregation
# ---------------------------------------------------------------------------

def reweight_paths(xi1, target: float, tol: float = 1e-10):
    """Minimum relative entropy weights with a prescribed mean of ``xi1``.

    Weights are ``exp(theta * xi1)`` normalised to sum to the path count,
    with ``theta`` solved so the weighted mean equals ``target``.
    Returns ``(weights, theta)``.
    """
    x = np.asarray(xi1, dtype=float)
    n = x.size
    lo, hi = x.min(), x.max()
    if np.isclose(x.mean(), target, rtol=0, atol=tol) or lo == hi:
        if abs(x.mean() - target) > max(tol, 1e-12 * max(1.0, abs(target))):
            raise ReweightingError(f"target {target} differs from the constant statistic {lo}")
        return np.ones(n), 0.0
    if not lo < target < hi:
        raise ReweightingError(f"target {target} outside the realised range [{lo}, {hi}]")

    def mean_gap(theta):
        logw = theta * x
        p = np.exp(logw - logsumexp(logw))
        return float(p @ x) - target

    a, b = -1.0, 1.0
    while mean_gap(a) > 0:
        a *= 2.0
        if a < -1e8:
            raise ReweightingError("tilt parameter diverged")
    while mean_gap(b) < 0:
        b *= 2.0
        if b > 1e8:
            raise ReweightingError("tilt parameter diverged")
    theta = brentq(mean_gap, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    logw = theta * x
    w = n * np.exp(logw - logsumexp(logw))
    return w, float(theta)


def aggregate_ccdf(values, weights, thresholds):
    """Weighted ``P(X > x)`` at each threshold."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    tail = np.concatenate([np.cumsum(w[::-1])[::-1], [0.0]])
    idx = np.searchsorted(v, np.asarray(thresholds, dtype=float), side="right")
    return np.clip(tail[idx] / w.sum(), 0.0, 1.0)


def weighted_quantile(values, weights, level: float) -> float:
    """Smallest value whose weighted CDF reaches ``level``."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(v, kind="stable")
    cdf = np.cumsum(w[order]) / w.sum()
    k = int(np.searchsorted(cdf, level - 1e-12, side="left"))
    return float(v[order][min(k, v.size - 1)])


def kish_effective_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / np.sum(w**2))


def tail_excess_test(values_a, weights_a, values_b, weights_b, threshold: float):
    """One-sided z-test of ``P_a(X > x) > P_b(X > x)`` with Kish effective sizes.

    Returns ``(p_a, p_b, z)``.
    """
    pa = float(aggregate_ccdf(values_a, weights_a, [threshold])[0])
    pb = float(aggregate_ccdf(values_b, weights_b, [threshold])[0])
    var = pa * (1 - pa) / kish_effective_size(weights_a) + pb * (1 - pb) / kish_effective_size(weights_b)
    z = (pa - pb) / np.sqrt(var) if var > 0 else (np.inf if pa > pb else 0.0)
    return pa, pb, float(z)
