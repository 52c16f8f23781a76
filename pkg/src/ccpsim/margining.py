"""Variation margin, regression-based VaR initial margin, Cover-2 default fund.

All array functions accept arbitrary leading (batch) axes so the engine can
apply them to many paths at once.  Member axes come before category or
scenario axes.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, RankDeficientError, WindDownError


def vm_increment(positions, values_new, values_old):
    """Change in mark-to-market of ``positions`` (..., C) between two valuations."""
    return np.sum(np.asarray(positions) * (np.asarray(values_new) - np.asarray(values_old)), axis=-1)


def quantile_rank(level: float, n_scenarios: int) -> int:
    """Rank ``q`` of the VaR order statistic among ``n_scenarios`` losses."""
    if not 0 < level < 1:
        raise ConfigError("margin.var_level", "must lie in (0, 1)")
    return max(1, int(round((1.0 - level) * n_scenarios)))


def top_losses(losses, q: int, overwrite: bool = False):
    """The ``q`` largest values along the last axis, sorted descending.

    With ``overwrite`` the input array (if already float) is partitioned in
    place, which saves a copy of large scenario blocks.
    """
    losses = np.asarray(losses, dtype=float)
    if losses.shape[-1] > q:
        kth = losses.shape[-1] - q
        if overwrite:
            losses.partition(kth, axis=-1)
        else:
            losses = np.partition(losses, kth, axis=-1)
        losses = losses[..., -q:]
    return -np.sort(-losses, axis=-1)


@dataclass(frozen=True)
class BenchmarkSet:
    """Small reference portfolios with their scenario losses and full-recipe IM.

    ``portfolios`` has one benchmark per row (n_b, C); ``scenario_losses`` is
    (H, n_b) with the 5-day loss of each benchmark in each historical scenario.
    """

    portfolios: np.ndarray
    scenario_losses: np.ndarray
    im_values: np.ndarray
    q: int

    @classmethod
    def build(cls, portfolios, scenario_changes, level: float) -> "BenchmarkSet":
        """Run the full VaR recipe on each benchmark.

        ``scenario_changes`` holds (H, C) changes of unit values per category.
        """
        portfolios = np.atleast_2d(np.asarray(portfolios, dtype=float))
        changes = np.asarray(scenario_changes, dtype=float)
        if np.linalg.matrix_rank(portfolios) < min(portfolios.shape) or \
                portfolios.shape[0] != portfolios.shape[1]:
            raise RankDeficientError("benchmarks", "benchmark portfolios must form a basis of the category space")
        losses = -changes @ portfolios.T
        q = quantile_rank(level, changes.shape[0])
        im = top_losses(losses.T, q)[..., q - 1]
        return cls(portfolios, losses, im, q)

    @property
    def n_scenarios(self) -> int:
        return self.scenario_losses.shape[0]


def default_benchmarks(category_currencies) -> np.ndarray:
    """One outright plus adjacent-tenor steepeners per economy, as a basis.

    Categories of one economy are taken in the order given (shortest tenor
    first).  Each steepener is long one unit of a bucket and short one unit of
    the next longer bucket.
    """
    ccys = list(category_currencies)
    n = len(ccys)
    rows = []
    for ccy in dict.fromkeys(ccys):
        idx = [i for i, c in enumerate(ccys) if c == ccy]
        outright = np.zeros(n)
        outright[idx[0]] = 1.0
        rows.append(outright)
        for a, b in zip(idx[:-1], idx[1:]):
            steep = np.zeros(n)
            steep[a], steep[b] = 1.0, -1.0
            rows.append(steep)
    return np.array(rows)


def fit_regression(positions, benchmarks: BenchmarkSet):
    """Regression coefficients of position vectors (..., C) on the benchmarks."""
    design = benchmarks.portfolios.T
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficientError("benchmarks", "design matrix is rank deficient")
    positions = np.asarray(positions, dtype=float)
    flat = positions.reshape(-1, positions.shape[-1]).T
    coef, *_ = np.linalg.lstsq(design, flat, rcond=None)
    return coef.T.reshape(positions.shape[:-1] + (design.shape[1],))


def regressed_losses(coefficients, benchmarks: BenchmarkSet):
    """Scenario losses (..., H) of the portfolio the coefficients represent."""
    return np.asarray(coefficients) @ benchmarks.scenario_losses.T


@dataclass(frozen=True)
class VarState:
    """Retained largest scenario losses of one member-CCP portfolio.

    Losses are stored in historic-volatility units; the current ratio of
    market to historic volatility scales them when the IM is read off.
    """

    scenario_losses: np.ndarray
    vol_ratio: float = 1.0
    q: int = 1

    def __post_init__(self):
        if self.vol_ratio <= 0:
            raise ValueError("vol_ratio must be positive")

    @classmethod
    def from_losses(cls, losses, q: int, vol_ratio: float = 1.0) -> "VarState":
        return cls(top_losses(losses, q), vol_ratio, q)

    @classmethod
    def from_regression(cls, coefficients, benchmarks: BenchmarkSet, vol_ratio: float = 1.0):
        return cls.from_losses(regressed_losses(coefficients, benchmarks), benchmarks.q, vol_ratio)

    @property
    def var(self) -> float:
        return float(self.vol_ratio * self.scenario_losses[self.q - 1])


def im_value(var_state: VarState, add_on: float) -> float:
    """IM = vol ratio x q-th largest retained loss + frozen add-on."""
    return var_state.var + add_on


def insert_losses(top, losses):
    """Insert one new loss per row into descending top-q lists (vectorised).

    A loss enters only if it strictly exceeds the smallest retained one, so on
    ties the earlier scenario is kept.
    """
    top = np.asarray(top, dtype=float)
    losses = np.asarray(losses, dtype=float)
    enters = losses > top[..., -1]
    merged = np.concatenate([top, losses[..., None]], axis=-1)
    merged = -np.sort(-merged, axis=-1)[..., :-1]
    return np.where(enters[..., None], merged, top), enters


def update_var_state(var_state: VarState, realized_loss: float, vol_ratio: float | None = None,
                     normalize: bool = True) -> VarState:
    """Offer the step's realised loss to the retained scenario set.

    The realised loss is first expressed in historic-volatility units by
    dividing by the vol ratio in force during the step.  Scenarios never roll
    off.  ``vol_ratio`` (if given) becomes the new ratio afterwards.
    """
    loss = realized_loss / var_state.vol_ratio if normalize else realized_loss
    top, _ = insert_losses(var_state.scenario_losses, loss)
    new_ratio = var_state.vol_ratio if vol_ratio is None else vol_ratio
    return replace(var_state, scenario_losses=top, vol_ratio=new_ratio)


def expected_insertions(q: int, n_history: int, n_new: int) -> float:
    """Expected number of i.i.d. new draws that enter a top-q list.

    With ``n_history`` exchangeable draws already seen, the i-th new draw
    ranks in the top q of ``n_history + i`` draws with probability
    ``q / (n_history + i)``.
    """
    i = np.arange(1, n_new + 1)
    return float(np.sum(np.minimum(1.0, q / (n_history + i))))


def ewma_vol_ratio(previous_variance, multiplier, decay: float):
    """Track the market/historic volatility ratio from the regime multiplier path.

    Returns ``(variance, ratio)`` where variance is an exponentially weighted
    average of squared multipliers.
    """
    var = decay * np.asarray(previous_variance) + (1.0 - decay) * np.asarray(multiplier) ** 2
    return var, np.sqrt(var)


def loss_over_im(scenario_loss, im):
    """Stressed loss in excess of IM: ``[loss - IM]^+``."""
    return np.maximum(np.asarray(scenario_loss) - np.asarray(im), 0.0)


def stressed_losses(positions, values, shocked_values):
    """Portfolio loss under each stress scenario.

    ``positions`` (..., M, C); ``values`` (..., C); ``shocked_values``
    (..., S, C).  Returns (..., M, S).
    """
    drop = np.asarray(values)[..., None, :] - np.asarray(shocked_values)
    return np.einsum("...mc,...sc->...ms", positions, drop)


def cover_two_default_fund(loim, skin_in_the_game, alive=None, strict: bool = True):
    """Cover-2 default fund from per-member stressed losses over IM.

    ``loim`` has shape (..., M, S).  The fund is the largest, over scenarios,
    of the two largest surviving members' LOIM minus skin in the game,
    floored at zero.  With ``strict`` a batch element with fewer than two
    survivors raises :class:`WindDownError`; otherwise the missing partner
    contributes zero.
    """
    loim = np.asarray(loim, dtype=float)
    if alive is None:
        alive = np.ones(loim.shape[:-1], dtype=bool)
    alive = np.asarray(alive, dtype=bool)
    if strict and np.any(alive.sum(axis=-1) < 2):
        raise WindDownError("fewer than two surviving members")
    masked = np.where(alive[..., None], loim, 0.0)
    n = masked.shape[-2]
    if n >= 2:
        top2 = np.partition(masked, n - 2, axis=-2)[..., n - 2:, :].sum(axis=-2)
    else:
        top2 = masked.sum(axis=-2)
    return np.maximum(top2.max(axis=-1) - np.asarray(skin_in_the_game), 0.0)


def allocate_pro_rata(total, weights, precision: float = 0.01):
    """Split ``total`` (...,) across members in proportion to ``weights`` (..., M).

    Amounts are whole multiples of ``precision``; the largest-remainder rule
    places the final units so the allocations add up to the rounded total
    exactly.  Members with zero weight receive nothing.
    """
    total = np.asarray(total, dtype=float)
    weights = np.asarray(weights, dtype=float)
    wsum = weights.sum(axis=-1)
    units = np.rint(total / precision)
    if np.any((units != 0) & (wsum <= 0)):
        raise ConfigError("allocation", "total weight (IM) of survivors is zero")
    share = np.divide(weights, wsum[..., None], out=np.zeros_like(weights), where=wsum[..., None] > 0)
    raw = units[..., None] * share
    base = np.floor(raw)
    missing = units - base.sum(axis=-1)
    order = np.argsort(-(raw - base), axis=-1, kind="stable")
    rank = np.argsort(order, axis=-1, kind="stable")
    base = base + (rank < missing[..., None])
    return base * precision
