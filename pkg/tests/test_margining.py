import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccpsim.errors import ConfigError, RankDeficientError, WindDownError
from ccpsim.margining import (BenchmarkSet, VarState, allocate_pro_rata, cover_two_default_fund,
                              default_benchmarks, ewma_vol_ratio, expected_insertions, fit_regression,
                              im_value, insert_losses, loss_over_im, quantile_rank, regressed_losses,
                              stressed_losses, top_losses, update_var_state, vm_increment)


@pytest.fixture(scope="module")
def bench():
    rng = np.random.default_rng(2)
    changes = rng.normal(0.0, 0.01, size=(500, 4))
    return BenchmarkSet.build(default_benchmarks(["USD", "USD", "EUR", "EUR"]), changes, 0.99)


def test_vm_zero_and_antisymmetric():
    v = np.array([0.1, -0.2, 0.05])
    pos = np.array([3.0, 1.0, -2.0])
    assert vm_increment(pos, v, v) == 0.0
    w = v + np.array([0.01, 0.02, -0.03])
    assert vm_increment(-pos, w, v) == -vm_increment(pos, w, v)


def test_vm_conserved_when_positions_net(rng):
    pos = rng.normal(size=(7, 5))
    pos -= pos.mean(axis=0)
    dv = rng.normal(size=5)
    total = sum(vm_increment(p, dv, np.zeros(5)) for p in pos)
    assert abs(total) < 1e-12 * np.abs(pos).sum()


def test_benchmark_basis_covers_adjacent_steepeners():
    b = default_benchmarks(["USD", "USD", "USD", "EUR", "EUR"])
    assert b.shape == (5, 5)
    assert np.linalg.matrix_rank(b) == 5
    np.testing.assert_array_equal(b[1], [1, -1, 0, 0, 0])


def test_regression_examples(bench):
    e3 = bench.portfolios[2]
    np.testing.assert_allclose(fit_regression(e3, bench), np.eye(4)[2], atol=1e-12)
    np.testing.assert_allclose(fit_regression(2 * bench.portfolios[0], bench), [2, 0, 0, 0], atol=1e-12)


def test_regression_reconstructs_span(bench, rng):
    for _ in range(20):
        a = rng.normal(size=4) * 10 ** rng.uniform(0, 9)
        pos = a @ bench.portfolios
        coef = fit_regression(pos, bench)
        err = np.abs(coef @ bench.portfolios - pos).max() / np.abs(pos).max()
        assert err <= 1e-10


def test_rank_deficient_benchmarks():
    portfolios = np.array([[1.0, 0.0], [2.0, 0.0]])
    bad = BenchmarkSet(portfolios, np.zeros((10, 2)), np.zeros(2), 1)
    with pytest.raises(RankDeficientError):
        fit_regression(np.array([1.0, 1.0]), bad)


def test_quantile_rank():
    assert quantile_rank(0.99, 1000) == 10
    assert quantile_rank(0.999, 100) == 1
    with pytest.raises(ConfigError):
        quantile_rank(1.0, 100)


def test_im_examples(bench):
    zero = VarState.from_regression(np.zeros(4), bench)
    assert im_value(zero, 5.0) == pytest.approx(5.0)
    coef = np.array([1.0, 2.0, -1.0, 0.5])
    one = VarState.from_regression(coef, bench)
    two = VarState.from_regression(2 * coef, bench)
    assert im_value(two, 0.0) == pytest.approx(2 * im_value(one, 0.0))
    assert im_value(VarState(one.scenario_losses, 2.0, one.q), 0.0) == pytest.approx(2 * im_value(one, 0.0))


def test_var_matches_quantile_of_regressed_losses(bench):
    coef = np.array([0.3, -1.0, 2.0, 0.1])
    losses = regressed_losses(coef, bench)
    state = VarState.from_regression(coef, bench)
    assert state.var == pytest.approx(np.sort(losses)[::-1][bench.q - 1])


def test_insertion_examples():
    state = VarState.from_losses([5.0, 4.0, 3.0, 1.0], q=3)
    assert list(state.scenario_losses) == [5.0, 4.0, 3.0]
    below = update_var_state(state, 2.0, vol_ratio=1.5)
    np.testing.assert_array_equal(below.scenario_losses, state.scenario_losses)
    assert below.vol_ratio == 1.5
    tie = update_var_state(state, 3.0)
    np.testing.assert_array_equal(tie.scenario_losses, state.scenario_losses)
    top = update_var_state(state, 9.0)
    assert list(top.scenario_losses) == [9.0, 5.0, 4.0]
    assert im_value(top, 1.0) > im_value(state, 1.0)


def test_insertion_normalises_by_vol_ratio():
    state = VarState.from_losses([5.0, 4.0, 3.0], q=3, vol_ratio=2.0)
    assert list(update_var_state(state, 8.0).scenario_losses) == [5.0, 4.0, 4.0]


@settings(max_examples=100, deadline=None)
@given(arrays(float, 6, elements=st.floats(-100, 100)), st.floats(-200, 200))
def test_insertion_never_lowers_var(losses, new):
    top = top_losses(losses, 3)
    after, _ = insert_losses(top, np.array(new))
    assert np.all(after >= top)


def test_expected_insertions_match_simulation():
    rng = np.random.default_rng(17)
    q, h, n, reps = 10, 1000, 52, 4000
    history = rng.standard_normal((reps, h))
    top = top_losses(history, q)
    count = np.zeros(reps)
    for _ in range(n):
        top, entered = insert_losses(top, rng.standard_normal(reps))
        count += entered
    expected = expected_insertions(q, h, n)
    se = count.std() / np.sqrt(reps)
    assert abs(count.mean() - expected) < 3 * se


def test_ewma_vol_ratio_tracks_multiplier():
    var, ratio = 1.0, 1.0
    for _ in range(200):
        var, ratio = ewma_vol_ratio(var, 2.0, 0.9)
    assert ratio == pytest.approx(2.0, rel=1e-6)
    var, ratio = ewma_vol_ratio(1.0, 2.0, 0.9)
    assert var == pytest.approx(1.3)


def test_loss_over_im_examples():
    assert loss_over_im(100.0, 60.0) == 40.0
    assert loss_over_im(-5.0, 60.0) == 0.0
    assert loss_over_im(50.0, 60.0) == 0.0


def test_stressed_losses_shape_and_sign():
    pos = np.array([[1.0, 0.0], [0.0, -2.0]])
    values = np.array([0.0, 0.0])
    shocked = np.array([[-0.1, 0.0], [0.0, -0.1]])
    out = stressed_losses(pos, values, shocked)
    np.testing.assert_allclose(out, [[0.1, 0.0], [0.0, -0.2]])


def test_cover_two_examples():
    loim = np.array([[10.0], [7.0], [5.0]])
    assert cover_two_default_fund(loim, 0.0) == 17.0
    assert cover_two_default_fund(loim, 17.0) == 0.0
    assert cover_two_default_fund(loim, 20.0) == 0.0
    assert cover_two_default_fund(loim, 0.0, alive=np.array([False, True, True])) == 12.0
    with pytest.raises(WindDownError):
        cover_two_default_fund(loim, 0.0, alive=np.array([False, False, True]))
    assert cover_two_default_fund(loim, 0.0, alive=np.array([False, False, True]), strict=False) == 5.0


def brute_cover_two(loim, k):
    best = 0.0
    m, s = loim.shape
    for j in range(s):
        for a, b in itertools.combinations(range(m), 2):
            best = max(best, loim[a, j] + loim[b, j] - k)
    return best


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 10), st.integers(1, 5), st.data())
def test_cover_two_brute_force_and_bounds(m, s, data):
    loim = data.draw(arrays(float, (m, s), elements=st.floats(0, 1e6)))
    k = data.draw(st.floats(0, 1e6))
    df = cover_two_default_fund(loim, k)
    assert df == pytest.approx(brute_cover_two(loim, k), rel=1e-12, abs=1e-9)
    assert df >= max(loim.max() - k, 0.0) - 1e-9
    extra = data.draw(arrays(float, (m, 1), elements=st.floats(0, 1e6)))
    assert cover_two_default_fund(np.hstack([loim, extra]), k) >= df


def test_allocation_examples():
    np.testing.assert_allclose(allocate_pro_rata(100.0, np.array([2.0, 1.0, 1.0])), [50, 25, 25])
    np.testing.assert_allclose(allocate_pro_rata(90.0, np.array([2.0, 1.0])), [60, 30])
    np.testing.assert_allclose(allocate_pro_rata(10.0, np.array([0.0, 3.0])), [0, 10])
    np.testing.assert_allclose(allocate_pro_rata(99.0, np.ones(3)), [33, 33, 33])
    np.testing.assert_allclose(allocate_pro_rata(0.02, np.ones(3)).sum(), 0.02)
    with pytest.raises(ConfigError):
        allocate_pro_rata(5.0, np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e10), arrays(float, st.integers(1, 12), elements=st.floats(0.001, 1e9)))
def test_allocation_sums_to_total(total, weights):
    out = allocate_pro_rata(total, weights, 0.01)
    units = np.rint(out / 0.01)
    assert np.allclose(out / 0.01, units)
    assert units.sum() == np.rint(total / 0.01)
    share = weights / weights.sum()
    assert np.all(np.abs(out - total * share) <= 0.01 + 1e-6 * total)


def test_top_losses_in_place_matches_copy(rng):
    x = rng.normal(size=(3, 4, 50))
    a = top_losses(x, 5)
    b = top_losses(x.copy(), 5, overwrite=True)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a, axis=-1) <= 0)
