import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccpsim.errors import (CalibrationError, InfeasibleAggregatesError, InfeasiblePositionsError,
                           InvariantError)
from ccpsim.network import (MemberProfile, assign_weights, calibrate_barrier, calibrate_barriers,
                            check_ranks, first_passage_probability, fit_exponential,
                            randomize_net_positions)


def test_two_member_fit_oracle():
    fit = fit_exponential(3.0, 2.0, [1, 2], [True, False])
    assert fit.alpha == pytest.approx(np.log(2.0), abs=1e-8)
    assert fit.beta == pytest.approx(4.0, abs=1e-8)
    np.testing.assert_allclose(fit.notionals, [2.0, 1.0], atol=1e-8)


def test_symmetric_share_gives_flat_profile():
    fit = fit_exponential(10.0, 5.0, [1, 2, 3, 4], [True, False, True, False])
    # share is 1/2 only at alpha = 0 for this interleaved group
    assert fit.alpha == pytest.approx(0.0, abs=1e-10)
    np.testing.assert_allclose(fit.notionals, 2.5)


@pytest.mark.parametrize("total,known,mask", [
    (3.0, 3.0, [True, False]),
    (3.0, 0.0, [True, False]),
    (3.0, 1.0, [True, True]),
    (3.0, 1.0, [False, False]),
])
def test_infeasible_aggregates(total, known, mask):
    with pytest.raises(InfeasibleAggregatesError):
        fit_exponential(total, known, [1, 2], mask)


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 101), st.integers(1, 10), st.floats(0.05, 0.95))
def test_fit_residuals_on_top_ranked_groups(n, k, share):
    k = min(k, n - 1)
    mask = np.arange(1, n + 1) <= k
    fit = fit_exponential(1e12, share * 1e12, np.arange(1, n + 1), mask)
    assert abs(fit.notionals.sum() / 1e12 - 1) <= 1e-8
    assert abs(fit.notionals[mask].sum() / (share * 1e12) - 1) <= 1e-8


def test_fit_finds_roots_near_a_share_maximum():
    # ranks 2 and 3 peak in share near alpha ~ 0.55; targets just below the
    # peak have two roots closer together than the scan spacing
    ranks = np.arange(1, 41)
    known = np.isin(ranks, [2, 3])
    e = np.exp(-0.55 * ranks)
    target = e[known].sum() / e.sum() * (1 - 1e-7)
    fit = fit_exponential(1e12, target * 1e12, ranks, known)
    assert fit.notionals[known].sum() == pytest.approx(target * 1e12, rel=1e-8)
    assert fit.notionals.sum() == pytest.approx(1e12, rel=1e-8)


def test_check_ranks():
    good = [MemberProfile(f"m{i}", i, 1.0, 0.1, "diversified", 0.01) for i in (2, 1, 3)]
    check_ranks(good)
    with pytest.raises(InvariantError):
        check_ranks(good[:1] + good[:1])
    with pytest.raises(InvariantError):
        MemberProfile("x", 1, 1.0, 0.1, "bank", 0.01)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 30), st.integers(1, 3))
def test_randomized_positions_satisfy_constraints(seed, n, n_known):
    rng = np.random.default_rng(seed)
    n_known = min(n_known, n - 2)
    notionals = rng.uniform(1.0, 100.0, n)
    known = np.zeros(n, bool)
    known[:n_known] = True
    limit = 0.1
    kd = np.zeros(n)
    room = 0.5 * limit * notionals[~known].sum() / max(notionals[known].sum(), 1e-12)
    kd[known] = rng.uniform(-1, 1, n_known) * min(limit, room) * notionals[known]
    deltas, _ = randomize_net_positions(rng, notionals, known, kd, limit)
    assert abs(deltas.sum()) <= 1e-10 * notionals.sum()
    assert np.all(np.abs(deltas) <= limit * notionals * (1 + 1e-12))
    np.testing.assert_array_equal(deltas[known], kd[known])


def test_known_imbalance_beyond_limit_is_infeasible(rng):
    notionals = np.array([100.0, 1.0, 1.0])
    known = np.array([True, False, False])
    with pytest.raises(InfeasiblePositionsError):
        randomize_net_positions(rng, notionals, known, np.array([0.2, 0, 0]), 0.1)


def test_known_position_above_limit_warns(rng, caplog):
    notionals = np.array([1.0, 100.0, 100.0])
    known = np.array([True, False, False])
    with caplog.at_level(logging.WARNING, logger="ccpsim.network"):
        deltas, _ = randomize_net_positions(rng, notionals, known, np.array([0.5, 0, 0]), 0.1)
    assert "exceed" in caplog.text
    assert abs(deltas.sum()) < 1e-12


def test_weights_proportional_to_assets():
    np.testing.assert_allclose(assign_weights([3.0, 1.0, 1.0, 1.0]), [0.5, 1 / 6, 1 / 6, 1 / 6])
    a = np.array([2.0, 5.0, 9.0])
    np.testing.assert_allclose(assign_weights(a), assign_weights(1e6 * a))
    with pytest.raises(InvariantError):
        assign_weights([1.0, 0.0])


def test_first_passage_closed_form_limits():
    assert first_passage_probability(0.0, 0.0, 0.2, 1.0) == 1.0
    # driftless case: twice the terminal tail
    assert first_passage_probability(-0.2, 0.0, 0.2, 1.0) == pytest.approx(2 * 0.15865525393145707)
    assert first_passage_probability(-5.0, -0.02, 0.2, 1.0) < 1e-10


def test_barrier_calibration_matches_first_passage():
    vol, steps, dt = 0.2, 52, 1 / 52
    prof = [MemberProfile("a", 1, 100.0, 7.0, "diversified", 0.02)]
    barriers, achieved = calibrate_barriers(prof, vol, 0.0, dt, steps, 100_000, seed=5)
    exact = first_passage_probability(np.log(barriers[0] / 100.0), -0.5 * vol**2, vol, 1.0)
    se = np.sqrt(exact * (1 - exact) / 100_000)
    assert abs(achieved[0] - exact) < 3 * se
    assert abs(achieved[0] - 0.02) < 0.002


def test_barrier_calibration_errors():
    with pytest.raises(CalibrationError):
        calibrate_barrier(lambda b: 0.0, 0.5, 0.0, 1.0, 1000)
    b, p = calibrate_barrier(lambda b: b, 0.25, 0.0, 1.0, 10_000)
    assert p == pytest.approx(0.25, abs=0.025)
