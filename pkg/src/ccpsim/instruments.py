"""Valuation of the cleared swap categories from the two-factor rates state.

Each category is proxied by one representative receiver-fixed par swap.  Bond
prices take the affine form ``P(t,T) = P0(T)/P0(t) exp(-B1 y1 - B2 x2)`` with
``B_i(tau) = (1 - exp(-theta_i tau)) / theta_i``; convexity terms are dropped.
Both legs are treated as paying continuously (the fixed annuity is an integral
evaluated by Gauss-Legendre quadrature), so a par swap keeps zero value along
an unchanged flat curve without tracking fixings.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import StaleInstrumentError, UnknownCategoryError
from .market import TermStructure

_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


@dataclass(frozen=True)
class Category:
    id: str
    currency: str
    tenor_bucket: str
    representative_tenor: float
    trade_type: str = "fixed-float"


@dataclass(frozen=True)
class RateCurve:
    """Initial forward curve of one economy plus its factor mean reversions."""

    forward_curve: TermStructure
    theta1: float
    theta2: float

    def initial_discount(self, T):
        return np.exp(-self.forward_curve.integral(T))


@dataclass(frozen=True)
class ZeroShift:
    """Deterministic zero-rate shift ``parallel + slope * (tau - pivot) / span``."""

    parallel: float = 0.0
    slope: float = 0.0
    pivot: float = 2.0
    span: float = 10.0

    def __call__(self, tau):
        return self.parallel + self.slope * (tau - self.pivot) / self.span


def loading(theta: float, tau):
    """Affine bond-price loading ``(1 - exp(-theta tau)) / theta``."""
    return -np.expm1(-theta * tau) / theta


def discount(curve: RateCurve, t: float, T, y1=0.0, x2=0.0, shift: ZeroShift | None = None):
    """Bond price ``P(t, T)``.

    ``T`` is a scalar or a 1-D array of payment times; in the latter case the
    result gains a trailing axis of that length after the factor shape.
    """
    T = np.asarray(T, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if T.ndim:
        y1, x2 = y1[..., None], x2[..., None]
    tau = T - t
    expo = loading(curve.theta1, tau) * y1 + loading(curve.theta2, tau) * x2
    if shift is not None:
        expo = expo + shift(tau) * tau
    return curve.initial_discount(T) / curve.initial_discount(t) * np.exp(-expo)


def _nodes(t: float, maturity: float):
    half = 0.5 * (maturity - t)
    return t + half * (_GL_X + 1.0), half * _GL_W


def annuity(curve: RateCurve, t: float, maturity: float, y1=0.0, x2=0.0,
            shift: ZeroShift | None = None):
    """Continuously paid annuity ``int_t^T P(t, s) ds``."""
    s, w = _nodes(t, maturity)
    return np.sum(discount(curve, t, s, y1, x2, shift) * w, axis=-1)


def par_rate(curve: RateCurve, tenor: float) -> float:
    """Continuous par rate of a spot-starting swap on the initial curve."""
    return float((1.0 - discount(curve, 0.0, tenor)) / annuity(curve, 0.0, tenor))


@dataclass(frozen=True)
class SwapSpec:
    category: Category
    curve: RateCurve
    fixed_rate: float
    notional_unit: float = 1.0

    @classmethod
    def at_market(cls, category: Category, curve: RateCurve, notional_unit: float = 1.0):
        if not category.representative_tenor > 0:
            raise ValueError(f"category {category.id}: representative tenor must be positive")
        return cls(category, curve, par_rate(curve, category.representative_tenor), notional_unit)

    @property
    def maturity(self) -> float:
        return self.category.representative_tenor


def value_swap(spec: SwapSpec, y1, x2, t: float, shift: ZeroShift | None = None):
    """Receiver-fixed value per unit notional in the swap's own currency.

    ``y1`` is the first-factor input (including accumulated rate jumps) and
    ``x2`` the second factor; both broadcast.
    """
    if t > spec.maturity:
        raise StaleInstrumentError(f"{spec.category.id}: t={t} beyond maturity {spec.maturity}")
    if t == spec.maturity:
        return np.zeros(np.broadcast(np.asarray(y1), np.asarray(x2)).shape)
    fixed = spec.fixed_rate * annuity(spec.curve, t, spec.maturity, y1, x2, shift)
    floating = 1.0 - discount(spec.curve, t, spec.maturity, y1, x2, shift)
    return spec.notional_unit * (fixed - floating)


def swap_factor_deltas(spec: SwapSpec, y1, x2, t: float):
    """Analytic derivatives of ``value_swap`` with respect to ``(y1, x2)``."""
    if t > spec.maturity:
        raise StaleInstrumentError(f"{spec.category.id}: t={t} beyond maturity {spec.maturity}")
    c = spec.curve
    s, w = _nodes(t, spec.maturity)
    p_nodes = discount(c, t, s, y1, x2)
    p_mat = discount(c, t, spec.maturity, y1, x2)
    tau_m = spec.maturity - t
    out = []
    for theta in (c.theta1, c.theta2):
        d_fixed = -spec.fixed_rate * np.sum(loading(theta, s - t) * p_nodes * w, axis=-1)
        d_float = loading(theta, tau_m) * p_mat
        out.append(spec.notional_unit * (d_fixed - d_float))
    return tuple(out)


def portfolio_value(positions: Mapping[str, float], specs: Mapping[str, SwapSpec],
                    rates_state: Mapping[str, tuple], t: float,
                    fx: Mapping[str, float] | None = None) -> float:
    """Value of a category-keyed position map, converted with ``fx`` if given.

    ``rates_state`` maps currency to ``(y1, x2)``; ``fx`` maps currency to the
    reporting-currency price of one unit (missing currencies convert at 1).
    """
    total = 0.0
    for cat, notional in positions.items():
        if cat not in specs:
            raise UnknownCategoryError("positions", f"unknown category {cat!r}")
        spec = specs[cat]
        y1, x2 = rates_state[spec.category.currency]
        rate = 1.0 if fx is None else fx.get(spec.category.currency, 1.0)
        total += notional * float(value_swap(spec, y1, x2, t)) * rate
    return total


class Book:
    """Vectorised valuation of every category in the reporting currency.

    Factor arrays have the economy on their last axis; FX arrays carry one
    column per entry of ``fx_currencies`` (reporting currency per unit).
    """

    def __init__(self, specs: Sequence[SwapSpec], economies: Sequence[str],
                 fx_currencies: Sequence[str], reporting_currency: str):
        self.specs = list(specs)
        self.economies = list(economies)
        self.fx_currencies = list(fx_currencies)
        self.reporting_currency = reporting_currency
        self.category_ids = [s.category.id for s in self.specs]
        self.economy_index = np.array([self.economies.index(s.category.currency) for s in self.specs])
        fx_index = []
        for s in self.specs:
            ccy = s.category.currency
            if ccy == reporting_currency:
                fx_index.append(-1)
            else:
                fx_index.append(self.fx_currencies.index(ccy))
        self.fx_index = np.array(fx_index)

    @property
    def n_categories(self) -> int:
        return len(self.specs)

    def index(self, category_id: str) -> int:
        try:
            return self.category_ids.index(category_id)
        except ValueError:
            raise UnknownCategoryError("category", f"unknown category {category_id!r}") from None

    def local_values(self, t: float, y1, x2, shifts: Sequence[ZeroShift] | None = None):
        """Values per unit notional in each category's own currency, shape (..., C)."""
        y1 = np.asarray(y1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        cols = []
        for c, spec in enumerate(self.specs):
            e = self.economy_index[c]
            shift = None if shifts is None else shifts[e]
            cols.append(value_swap(spec, y1[..., e], x2[..., e], t, shift))
        return np.stack(cols, axis=-1)

    def fx_factors(self, fx):
        """Conversion factor per category, shape (..., C)."""
        fx = np.asarray(fx, dtype=float)
        lead = fx.shape[:-1]
        out = np.ones(lead + (self.n_categories,))
        foreign = self.fx_index >= 0
        if foreign.any():
            out[..., foreign] = fx[..., self.fx_index[foreign]]
        return out

    def unit_values(self, t: float, y1, x2, fx, shifts=None, fx_shock=None):
        """Reporting-currency values per unit notional, shape (..., C).

        ``fx_shock`` optionally multiplies each FX column by ``1 + shock``.
        """
        fx = np.asarray(fx, dtype=float)
        if fx_shock is not None:
            fx = fx * (1.0 + np.asarray(fx_shock, dtype=float))
        return self.local_values(t, y1, x2, shifts) * self.fx_factors(fx)
