import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccpsim.errors import StaleInstrumentError, UnknownCategoryError
from ccpsim.instruments import (Book, Category, RateCurve, SwapSpec, ZeroShift, annuity, discount,
                                par_rate, portfolio_value, swap_factor_deltas, value_swap)
from ccpsim.market import TermStructure

CURVE = RateCurve(TermStructure.parse([[0.0, 0.02], [3.0, 0.03]]), 0.05, 0.8)
CATS = [Category("USD-5Y", "USD", "2y-5y", 5.0), Category("USD-10Y", "USD", "5y-10y", 10.0),
        Category("EUR-20Y", "EUR", "10y-30y", 20.0)]


@pytest.fixture(scope="module")
def specs():
    return {c.id: SwapSpec.at_market(c, CURVE) for c in CATS}


def test_par_swap_has_zero_value(specs):
    for s in specs.values():
        assert abs(float(value_swap(s, 0.0, 0.0, 0.0))) < 1e-14


def test_unchanged_flat_curve_keeps_par_value():
    flat = RateCurve(TermStructure.constant(0.025), 0.1, 0.5)
    s = SwapSpec.at_market(Category("X", "USD", "b", 7.0), flat)
    for t in (0.0, 0.5, 3.0, 6.9):
        assert abs(float(value_swap(s, 0.0, 0.0, t))) < 1e-12


def test_par_rate_of_flat_curve_is_the_continuous_rate():
    flat = RateCurve(TermStructure.constant(0.03), 0.1, 0.5)
    assert par_rate(flat, 10.0) == pytest.approx(0.03, rel=1e-10)


def test_receiver_loses_when_rates_rise_and_delta_matches_differences(specs):
    s = specs["USD-10Y"]
    bp = 1e-4
    assert value_swap(s, bp, 0.0, 0.0) < value_swap(s, 0.0, 0.0, 0.0)
    for y1, x2, t in [(0.0, 0.0, 0.0), (0.004, -0.002, 1.5)]:
        d1, d2 = swap_factor_deltas(s, y1, x2, t)
        h = 1e-6
        fd1 = (value_swap(s, y1 + h, x2, t) - value_swap(s, y1 - h, x2, t)) / (2 * h)
        fd2 = (value_swap(s, y1, x2 + h, t) - value_swap(s, y1, x2 - h, t)) / (2 * h)
        assert d1 == pytest.approx(fd1, rel=1e-6)
        assert d2 == pytest.approx(fd2, rel=1e-6)


def test_annuity_quadrature_against_closed_form():
    flat = RateCurve(TermStructure.constant(0.04), 0.1, 0.5)
    assert annuity(flat, 0.0, 10.0) == pytest.approx((1 - np.exp(-0.4)) / 0.04, rel=1e-12)


def test_parallel_shift_moves_discount_factor():
    p0 = discount(CURVE, 0.0, 5.0)
    p1 = discount(CURVE, 0.0, 5.0, shift=ZeroShift(parallel=0.01))
    assert p1 == pytest.approx(p0 * np.exp(-0.05))


def test_stale_instrument(specs):
    with pytest.raises(StaleInstrumentError):
        value_swap(specs["USD-5Y"], 0.0, 0.0, 5.5)
    assert value_swap(specs["USD-5Y"], 0.0, 0.0, 5.0) == 0.0


def test_portfolio_empty_netting_and_unknown(specs):
    state = {"USD": (0.003, 0.001), "EUR": (-0.002, 0.0)}
    assert portfolio_value({}, specs, state, 0.5) == 0.0
    assert portfolio_value({"USD-5Y": 1e6}, specs, state, 0.5) == -portfolio_value({"USD-5Y": -1e6}, specs, state, 0.5)
    with pytest.raises(UnknownCategoryError):
        portfolio_value({"GBP-5Y": 1.0}, specs, state, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e9, 1e9), st.floats(-1e9, 1e9), st.floats(-0.01, 0.01), st.floats(-0.01, 0.01))
def test_portfolio_value_is_linear(specs, a, b, y1, x2):
    state = {"USD": (y1, x2), "EUR": (x2, y1)}
    both = portfolio_value({"USD-5Y": a, "EUR-20Y": b}, specs, state, 0.25)
    parts = (portfolio_value({"USD-5Y": a}, specs, state, 0.25)
             + portfolio_value({"EUR-20Y": b}, specs, state, 0.25))
    assert both == pytest.approx(parts, rel=1e-12, abs=1e-6)


def test_book_matches_single_swap_valuation(specs):
    ordered = [specs[c.id] for c in CATS]
    book = Book(ordered, ["USD", "EUR"], ["EUR"], "USD")
    y1 = np.array([[0.002, -0.001]])
    x2 = np.array([[0.0005, 0.001]])
    fx = np.array([[1.1]])
    vals = book.unit_values(0.3, y1, x2, fx)[0]
    assert vals[0] == pytest.approx(float(value_swap(ordered[0], 0.002, 0.0005, 0.3)))
    assert vals[2] == pytest.approx(1.1 * float(value_swap(ordered[2], -0.001, 0.001, 0.3)))
    shocked = book.unit_values(0.3, y1, x2, fx, fx_shock=np.array([0.2]))[0]
    assert shocked[2] == pytest.approx(1.2 * vals[2])
    assert book.index("EUR-20Y") == 2
    with pytest.raises(UnknownCategoryError):
        book.index("nope")
