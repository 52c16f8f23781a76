"""Construction of the CCP/GCM network from partial information.

Gross notionals are fitted to disclosed aggregates with an exponential
profile in member rank; unknown net positions are randomised so that they net
to zero, respect a proportional limit and reproduce the known positions of
the reference group.  Default barriers are calibrated to target default
probabilities on the members' non-CCP asset dynamics.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import logsumexp
from scipy.stats import norm

from .errors import CalibrationError, InfeasibleAggregatesError, InfeasiblePositionsError, InvariantError
from .market import JumpSpec, bridge_log_minimum, compound_poisson_layers

log = logging.getLogger(__name__)

MEMBER_TYPES = ("diversified", "markets-driven", "trading-house")


@dataclass(frozen=True)
class MemberProfile:
    id: str
    rank: int
    balance_sheet_assets: float
    equity: float
    member_type: str
    target_default_prob: float
    known_member: bool = False

    def __post_init__(self):
        if self.member_type not in MEMBER_TYPES:
            raise InvariantError(f"members.{self.id}.type", f"unknown member type {self.member_type!r}")
        if not self.balance_sheet_assets > 0:
            raise InvariantError(f"members.{self.id}.assets", "must be positive")
        if not 0 < self.target_default_prob < 1:
            raise InvariantError(f"members.{self.id}.targetDefaultProb", "must lie in (0, 1)")


def check_ranks(profiles: Sequence[MemberProfile]):
    ranks = sorted(p.rank for p in profiles)
    if ranks != list(range(1, len(profiles) + 1)):
        raise InvariantError("members.rank", "ranks must be a permutation of 1..n")


@dataclass(frozen=True)
class NotionalFit:
    alpha: float
    beta: float
    notionals: np.ndarray  # fitted gross notional per member


def fit_exponential(aggregate: float, known_aggregate: float, ranks, known_mask,
                    tol: float = 1e-8) -> NotionalFit:
    """Fit ``N_k = beta exp(-alpha J_k)`` to the total and known-group aggregates.

    ``beta`` is eliminated through the total, leaving one equation in
    ``alpha`` for the known group's share, solved by bracketed root finding.
    """
    ranks = np.asarray(ranks, dtype=float)
    known = np.asarray(known_mask, dtype=bool)
    if not known.any() or known.all():
        raise InfeasibleAggregatesError("aggregates", "the known group must be a proper nonempty subset")
    if not 0 < known_aggregate < aggregate:
        raise InfeasibleAggregatesError("aggregates", f"need 0 < N_K ({known_aggregate}) < N ({aggregate})")
    target = known_aggregate / aggregate
    shift = ranks.min()

    def share(alpha):
        # subtract the smallest rank so the exponentials cannot overflow for alpha > 0
        e = np.exp(-alpha * (ranks - shift)) if alpha >= 0 else np.exp(-alpha * (ranks - ranks.max()))
        return e[known].sum() / e.sum() - target

    def shares(alphas):
        anchor = np.where(alphas >= 0, shift, ranks.max())
        e = np.exp(-alphas[:, None] * (ranks[None, :] - anchor[:, None]))
        return e[:, known].sum(axis=1) / e.sum(axis=1) - target

    # The share is not monotone in alpha unless the known group holds the top
    # ranks, so scan for brackets and take the smallest positive root
    # (falling back to the negative root closest to zero).
    ladder = np.linspace(0.0, 50.0, 2001)
    alpha = None
    for side in (ladder, -ladder):
        alpha = _first_root(share, side, target * tol, shares)
        if alpha is not None:
            break
    if alpha is None:
        raise InfeasibleAggregatesError("aggregates", "the share equation has no root for |alpha| <= 50")
    log_beta = np.log(aggregate) - logsumexp(-alpha * ranks)
    notionals = np.exp(log_beta - alpha * ranks)
    beta = float(np.exp(log_beta))
    res_total = abs(notionals.sum() - aggregate) / aggregate
    res_known = abs(notionals[known].sum() - known_aggregate) / known_aggregate
    if max(res_total, res_known) > tol:
        raise InfeasibleAggregatesError("aggregates", f"fit residuals {res_total:.2e}, {res_known:.2e} above {tol}")
    return NotionalFit(float(alpha), beta, notionals)


def _first_root(gap, grid, slack: float, vector_gap=None):
    """Root of ``gap`` nearest ``grid[0]`` along an ordered grid, or None.

    Sign changes between grid points are bracketed directly.  A root pair
    hiding inside one cell shows up as an interior extremum of ``|gap|``;
    those are refined by bounded optimisation towards zero first.
    """
    vals = np.array([gap(a) for a in grid]) if vector_gap is None else vector_gap(grid)
    if vals[0] == 0.0:
        return float(grid[0])
    mag = np.abs(vals)
    # a dip can only reach zero inside a cell if the curvature allows it
    curve = np.abs(np.diff(vals, 2))
    dip = np.zeros(grid.size, bool)
    dip[1:-1] = (mag[1:-1] < mag[:-2]) & (mag[1:-1] < mag[2:]) & (mag[1:-1] <= 2.0 * curve + slack)
    for i in range(grid.size - 1):
        if np.sign(vals[i]) != np.sign(vals[i + 1]):
            return brentq(gap, grid[i], grid[i + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        if dip[i]:
            sign = np.sign(vals[i])
            lo, hi = sorted((grid[i - 1], grid[i + 1]))
            opt = minimize_scalar(lambda a: sign * gap(a), bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-14})
            if opt.fun <= 0:
                # the cell's earlier end still has the original sign
                a, b = sorted((grid[i - 1], opt.x))
                return brentq(gap, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
            if abs(opt.fun) <= slack:
                return float(opt.x)
    return None


def randomize_net_positions(rng: np.random.Generator, notionals, known_mask, known_deltas,
                            limit: float, category: str = "?", max_resample: int = 100):
    """Random net positions for one category honouring parity and limits.

    The known group's net position is offset proportionally across the other
    members (ratio ``r``); uniform perturbations on ``[-(R-|r|), R-|r|]`` are
    then shrunk on the side that carries the excess so the perturbations net
    out exactly.  Returns ``(deltas, n_resamples)``.
    """
    notionals = np.asarray(notionals, dtype=float)
    known = np.asarray(known_mask, dtype=bool)
    deltas_known = np.asarray(known_deltas, dtype=float)
    other = ~known
    ratio = -deltas_known[known].sum() / notionals[other].sum()
    if abs(ratio) >= limit:
        raise InfeasiblePositionsError(f"positions.{category}",
                                       f"|r| = {abs(ratio):.4g} is not below the limit R = {limit}")
    over = known & (np.abs(deltas_known) > limit * notionals)
    if over.any():
        log.warning("category %s: %d known positions exceed R * N_k", category, int(over.sum()))
    half_width = limit - abs(ratio)
    n_other = int(other.sum())
    for attempt in range(max_resample + 1):
        u = rng.uniform(-half_width, half_width, size=n_other)
        weighted = u * notionals[other]
        total = weighted.sum()
        same_side = u * total > 0
        v = weighted[same_side].sum()
        if v != 0:
            break
        if total == 0:
            # perturbations already net to zero; nothing to shrink
            same_side[:] = False
            v = 1.0
            break
    else:
        raise InfeasiblePositionsError(f"positions.{category}", "degenerate draws (V = 0) kept recurring")
    w = total / v
    deltas = np.empty_like(notionals)
    deltas[known] = deltas_known[known]
    deltas[other] = (ratio + u * (1.0 - w * same_side)) * notionals[other]
    return deltas, attempt


def assign_weights(balance_sheet_assets) -> np.ndarray:
    assets = np.asarray(balance_sheet_assets, dtype=float)
    if np.any(assets <= 0):
        raise InvariantError("members.assets", "balance sheet assets must be positive")
    return assets / assets.sum()


# ---------------------------------------------------------------------------
# default barriers
# ---------------------------------------------------------------------------

def simulate_log_asset_minima(rng: np.random.Generator, initial_assets, vol, dt: float,
                              n_steps: int, n_paths: int, systemic_beta=0.0,
                              systemic_jump: JumpSpec | None = None,
                              idio_jump: JumpSpec | None = None) -> np.ndarray:
    """Continuous-time minimum of log assets over the horizon, shape (n_paths, M).

    ``initial_assets``, ``vol`` and ``systemic_beta`` broadcast to one entry
    per member.  Regime-1 dynamics only (no feedback, no CCP flows).  The
    diffusion minimum inside each step is sampled from the Brownian bridge;
    jumps land at the end of the step, as in the engine.
    """
    a0 = np.atleast_1d(np.asarray(initial_assets, dtype=float))
    vol = np.broadcast_to(np.asarray(vol, dtype=float), a0.shape)
    beta = np.broadcast_to(np.asarray(systemic_beta, dtype=float), a0.shape)
    sys_j = systemic_jump or JumpSpec()
    idio_j = idio_jump or JumpSpec()
    m = a0.size
    drift = -0.5 * vol**2 * dt - dt * idio_j.intensity * idio_j.mean_jump
    drift = drift - dt * sys_j.intensity * sys_j.log_loading_mean(beta)
    x = np.broadcast_to(np.log(a0), (n_paths, m)).copy()
    running = x.copy()
    sd = vol * np.sqrt(dt)
    for _ in range(n_steps):
        end = x + drift + sd * rng.standard_normal((n_paths, m))
        u = rng.random((n_paths, m))
        running = np.minimum(running, bridge_log_minimum(x, end, sd**2, 1.0 - u))
        _, sys_log = compound_poisson_layers(rng, [sys_j.intensity], sys_j.log_mean, sys_j.log_std,
                                             dt, [1.0], shape=(n_paths,))
        _, idio_log = compound_poisson_layers(rng, np.full(m, idio_j.intensity), idio_j.log_mean,
                                              idio_j.log_std, dt, [1.0], shape=(n_paths,))
        x = end + beta * sys_log[:, :, 0] + idio_log[:, :, 0]
        running = np.minimum(running, x)
    return running


def first_passage_probability(log_barrier: float, drift: float, vol: float, horizon: float) -> float:
    """P(min_{s<=T} (mu s + sigma W_s) <= b) for b < 0 (reflection principle)."""
    if log_barrier >= 0:
        return 1.0
    s = vol * np.sqrt(horizon)
    return float(norm.cdf((log_barrier - drift * horizon) / s)
                 + np.exp(2.0 * drift * log_barrier / vol**2) * norm.cdf((log_barrier + drift * horizon) / s))


def calibrate_barrier(default_probability: Callable[[float], float], target: float, lower: float,
                      upper: float, n_paths: int, max_iter: int = 200, member: str = "?"):
    """Bisection for a constant barrier whose default probability hits ``target``.

    ``default_probability`` must be non-decreasing in the barrier.  Accepts the
    first level within ``max(10% relative, 2 standard errors)`` of the target,
    refining until the bracket collapses.  Returns ``(barrier, achieved)``.
    """
    p_lo, p_hi = default_probability(lower), default_probability(upper)
    if not p_lo <= target <= p_hi:
        raise CalibrationError(f"barrier for {member} not bracketed: P({lower:.4g})={p_lo:.4g}, "
                               f"P({upper:.4g})={p_hi:.4g}, target {target}", [member])
    tol = max(0.1 * target, 2.0 * np.sqrt(target * (1 - target) / n_paths))
    best = None
    lo, hi = lower, upper
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        p = default_probability(mid)
        if best is None or abs(p - target) < abs(best[1] - target):
            best = (mid, p)
        if p < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, abs(hi)):
            break
    if abs(best[1] - target) > tol:
        raise CalibrationError(f"barrier for {member}: achieved {best[1]:.4g} vs target {target}", [member])
    return best


def calibrate_barriers(profiles: Sequence[MemberProfile], vols, systemic_betas, dt: float,
                       n_steps: int, n_paths: int, seed: int, systemic_jump: JumpSpec | None = None,
                       idio_jump: JumpSpec | None = None):
    """Barrier per member from its asset-only dynamics.

    All members are simulated together from one seeded stream; each member's
    barrier is then found by bisection on its own empirical first-passage
    probability.  Returns ``(barriers, achieved_probabilities)``.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    a0 = np.array([p.balance_sheet_assets for p in profiles], dtype=float)
    minima = simulate_log_asset_minima(rng, a0, vols, dt, n_steps, n_paths, systemic_betas,
                                       systemic_jump, idio_jump)
    minima = np.sort(minima, axis=0)
    barriers = np.empty(len(profiles))
    achieved = np.empty(len(profiles))
    failed = []
    for k, prof in enumerate(profiles):
        col = minima[:, k]

        def prob(barrier, col=col):
            if barrier <= 0:
                return 0.0
            return np.searchsorted(col, np.log(barrier), side="right") / col.size

        try:
            barriers[k], achieved[k] = calibrate_barrier(prob, prof.target_default_prob, 0.0, a0[k],
                                                         n_paths, member=prof.id)
        except CalibrationError:
            failed.append(prof.id)
    if failed:
        raise CalibrationError(f"barrier calibration failed for {len(failed)} member(s): "
                               + ", ".join(failed), failed)
    return barriers, achieved
