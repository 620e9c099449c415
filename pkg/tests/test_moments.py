from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtd.core import (DensityParams, Measurement, PairSeparationFunction, SupportSequence,
                      default_signal, generate_support_rejection, pair_separation, synthesize)
from mtd.moments import (aa_resolution, coarse_length, coarsen_measurement, coarsen_psf,
                         coarsen_rho1, em_resolution, empty_partial, finalize, forward_asd,
                         forward_ws, measurement_moments, merge_partial, partial_moments,
                         reduce_partials, refine_rho1, round_half_away, signal_moments,
                         third_order_deltas, triu_pairs, window)

from oracles import brute_moments, brute_signal_moments


def _assert_matches_brute(stats, y, L, rel):
    a1, a2, a3 = brute_moments(y, L)
    scale = max(1e-300, np.max(np.abs(y)) ** 3)
    assert abs(stats.a1 - a1) <= rel * max(abs(a1), scale)
    np.testing.assert_allclose(stats.a2, a2, rtol=rel, atol=rel * scale)
    table = stats.a3_table()
    for (l1, l2), v in a3.items():
        assert abs(table[l1, l2] - v) <= rel * max(abs(v), scale)


# ---------------------------------------------------------------- measurement moments

def test_zero_measurement():
    s = measurement_moments(Measurement(np.zeros(40), 5, 0.0))
    assert s.a1 == 0 and not s.a2.any() and not s.a3.any()


def test_random_n50_matches_brute_force():
    y = np.random.default_rng(0).standard_normal(50)
    s = measurement_moments(Measurement(y, 6, 1.0))
    _assert_matches_brute(s, y, 6, 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(0, 200), st.integers(0, 2**32 - 1),
       st.sampled_from([1, 3, 7, 64, 4096]))
def test_moments_brute_force_any_chunking(L, extra, seed, chunk):
    N = 2 * L + extra
    y = np.random.default_rng(seed).standard_normal(N)
    s = measurement_moments(Measurement(y, L, 0.5), chunk_size=chunk)
    _assert_matches_brute(s, y, L, 1e-12)


def test_single_occurrence_equals_signal_autocorrelation():
    x = default_signal()
    y = synthesize(SupportSequence([0], 20, 10), x, 0.0, 0)
    # N = 2L here (the minimum), so compare against L-normalized sums scaled by L/N
    s = measurement_moments(y)
    sm = signal_moments(x)
    np.testing.assert_allclose(s.a2 * 20 / 10, sm.a2, rtol=1e-14, atol=1e-15)
    y1 = Measurement(x, 10, 0.0)
    a1, a2, _ = brute_moments(x, 10)
    np.testing.assert_allclose(a2, sm.a2, rtol=1e-14, atol=1e-15)
    assert y1.N == 10


def test_requires_two_l_samples():
    with pytest.raises(ValueError):
        measurement_moments(Measurement(np.ones(15), 10, 0.0))


def test_chunk_size_determinism():
    y = Measurement(np.random.default_rng(3).standard_normal(20000), 7, 1.0)
    a = measurement_moments(y)
    b = measurement_moments(y)
    assert np.array_equal(a.a3, b.a3) and a.a1 == b.a1
    c = measurement_moments(y, chunk_size=1000)
    np.testing.assert_allclose(c.a3, a.a3, rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------- merge

def _partials(y, L, cuts):
    bounds = [0] + list(cuts) + [len(y)]
    return [partial_moments(y[a:b], L) for a, b in zip(bounds, bounds[1:])]


def test_merge_with_empty_is_identity():
    y = np.random.default_rng(1).standard_normal(300)
    p = partial_moments(y, 5)
    for q in (merge_partial(p, empty_partial(5)), merge_partial(empty_partial(5), p)):
        assert np.array_equal(q.s2, p.s2) and np.array_equal(q.s3, p.s3) and q.n == p.n


def test_split_in_half_matches_single_pass():
    y = np.random.default_rng(2).standard_normal(1000)
    whole = finalize(partial_moments(y, 8))
    left, right = _partials(y, 8, [500])
    merged = finalize(merge_partial(left, right))
    np.testing.assert_allclose(merged.a3, whole.a3, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(merged.a2, whole.a2, rtol=1e-12, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40),
       st.integers(0, 2**32 - 1))
def test_three_way_associativity(L, n1, n2, n3, seed):
    y = np.random.default_rng(seed).standard_normal(n1 + n2 + n3)
    a, b, c = _partials(y, L, [n1, n1 + n2])
    left = finalize(merge_partial(merge_partial(a, b), c)) if y.size else None
    right = finalize(merge_partial(a, merge_partial(b, c))) if y.size else None
    if y.size == 0:
        return
    whole = finalize(partial_moments(y, L))
    for s in (left, right):
        np.testing.assert_allclose(s.a2, whole.a2, rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(s.a3, whole.a3, rtol=1e-12, atol=1e-13)


def test_merge_rejects_mismatched_metadata():
    with pytest.raises(ValueError):
        merge_partial(partial_moments(np.ones(10), 3), partial_moments(np.ones(10), 4))
    with pytest.raises(ValueError):
        merge_partial(partial_moments(np.ones(10), 3, 0.1), partial_moments(np.ones(10), 3, 0.2))
    with pytest.raises(ValueError):
        reduce_partials([])


# ---------------------------------------------------------------- signal moments

def test_signal_moments_impulse():
    x = np.zeros(10)
    x[0] = 1
    sm = signal_moments(x)
    assert sm.a1 == pytest.approx(0.1)
    assert sm.a2[0] == pytest.approx(0.1) and not sm.a2[1:].any()


def test_signal_moments_ones():
    sm = signal_moments(np.ones(3))
    np.testing.assert_allclose(sm.a2, [1, 2 / 3, 1 / 3], rtol=1e-15)


def test_signal_moments_brute_force():
    x = np.random.default_rng(5).standard_normal(10)
    sm = signal_moments(x, 18)
    a1, a2, a3 = brute_signal_moments(x, 19)
    assert sm.a1 == pytest.approx(a1, rel=1e-14)
    np.testing.assert_allclose(sm.a2, a2, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(sm.a3, a3, rtol=1e-14, atol=1e-15)
    assert not sm.a2[10:].any()
    with pytest.raises(ValueError):
        signal_moments(x, 19)


# ---------------------------------------------------------------- forward models

def test_forward_zero_signal():
    f = forward_ws(np.zeros(4), 0.3, 2.0)
    assert f.a1 == 0
    np.testing.assert_array_equal(f.a2, [4.0, 0, 0, 0])
    assert not f.a3.any()


def test_forward_third_order_delta_structure():
    x = default_signal()
    sigma, rho0 = 0.7, 0.3
    f0 = forward_ws(x, rho0, 0.0)
    f = forward_ws(x, rho0, sigma)
    sm = signal_moments(x)
    assert f.a3[0] - f0.a3[0] == pytest.approx(3 * sigma ** 2 * rho0 * sm.a1, rel=1e-13)
    l1, l2 = triu_pairs(10)
    count = (l1 == 0).astype(int) + (l2 == 0) + (l1 == l2)
    expected = rho0 * sm.a1 * sigma ** 2 * count
    np.testing.assert_allclose(f.a3 - f0.a3, expected, rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(third_order_deltas(10), count)


def test_forward_asd_reduces_to_ws():
    x = np.random.default_rng(4).standard_normal(7)
    a = forward_asd(x, DensityParams(0.4, np.zeros(6)), 0.8)
    b = forward_ws(x, 0.4, 0.8)
    assert a.a1 == b.a1
    assert np.array_equal(a.a2, b.a2) and np.array_equal(a.a3, b.a3)


def test_forward_asd_zero_lag_has_no_cross_term():
    x = default_signal()
    f = forward_asd(x, DensityParams(0.5, np.full(9, 0.05)), 1.5)
    assert f.a2[0] == pytest.approx(0.5 * signal_moments(x).a2[0] + 1.5 ** 2, rel=1e-14)


def test_forward_ws_noiseless_consistency():
    x = default_signal()
    s = generate_support_rejection(10**5, 10, 3000, 9, 21)
    st_ = measurement_moments(synthesize(s, x, 0.0, 0))
    f = forward_ws(x, s.density, 0.0)
    np.testing.assert_allclose(st_.a2, f.a2, rtol=1e-3)
    np.testing.assert_allclose(st_.a3, f.a3, rtol=1e-3)
    assert st_.a1 == pytest.approx(f.a1, rel=1e-3)


def test_forward_asd_noiseless_consistency():
    x = default_signal()
    s = generate_support_rejection(10**5, 10, 5000, 0, 22)
    st_ = measurement_moments(synthesize(s, x, 0.0, 0))
    xi = pair_separation(s)
    f = forward_asd(x, DensityParams(s.density, xi.rho1(s.density)), 0.0)
    # rho1 = rho0 xi counts M pairs where there are M - 1; the mismatch is
    # O(1/M) of each order's scale (entries near zero can be off by more)
    for got, want in ((st_.a2, f.a2), (st_.a3, f.a3)):
        assert np.max(np.abs(got - want)) <= 1e-3 * np.max(np.abs(want))
    # with the exact pair count the model is exact
    exact = forward_asd(x, DensityParams(s.density, xi.rho1(s.density) * (s.M - 1) / s.M), 0.0)
    np.testing.assert_allclose(st_.a3, exact.a3, rtol=1e-9, atol=1e-13)
    np.testing.assert_allclose(st_.a2, exact.a2, rtol=1e-9, atol=1e-13)


def test_third_order_noise_floor_scale():
    x = default_signal()
    s = generate_support_rejection(10**5, 10, 3000, 9, 8)
    draws = np.array([measurement_moments(synthesize(s, x, 1.0, seed)).a3 for seed in range(50)])
    std = draws.std(axis=0, ddof=1)
    floor = measurement_moments(synthesize(s, x, 1.0, 0)).noise_floor[2]
    assert np.all(std <= 3 * floor) and np.all(std >= floor / 3)


# ---------------------------------------------------------------- coarse graining

def test_rounding_and_resolutions():
    assert [round_half_away(Fraction(k, 2)) for k in (-3, -1, 1, 3, 5)] == [-2, -1, 1, 2, 3]
    assert aa_resolution(10, 1) == 5 and aa_resolution(10, 5) == 1
    assert aa_resolution(9, 4) == 1 and aa_resolution(9, 3) == Fraction(3, 2)
    assert em_resolution(10, 5) == 1 and em_resolution(9, 5) == 1
    assert coarse_length(10, 5) == 2
    with pytest.raises(ValueError):
        coarse_length(10, 3)


def test_coarsen_full_resolution_is_bias_corrected_identity():
    y = Measurement(np.random.default_rng(6).standard_normal(500), 5, 0.3)
    s = measurement_moments(y)
    c = coarsen_measurement(s, 2, Fraction(1))
    a2 = s.a2.copy()
    a2[0] -= 0.09
    np.testing.assert_allclose(c.b2, a2, rtol=1e-14, atol=1e-16)
    l1, l2 = triu_pairs(5)
    want = s.a3 - s.a1 * 0.09 * ((l1 == 0).astype(int) + (l2 == 0) + (l1 == l2))
    np.testing.assert_allclose(c.b3, want, rtol=1e-13, atol=1e-16)
    assert c.b1 == s.a1


def test_coarsen_l10_nmax1_bins():
    y = Measurement(np.random.default_rng(7).standard_normal(400), 10, 0.0)
    s = measurement_moments(y)
    c = coarsen_measurement(s, 1)
    assert c.delta == 5 and c.L_coarse == 2
    assert window(1, 5) == (3, 7)
    assert c.b2[1] == pytest.approx(s.a2[3:8].mean(), rel=1e-14)
    assert c.b2[0] == pytest.approx(s.a2[0:3].mean(), rel=1e-14)
    t = s.a3_table()
    pairs = [(i, j) for i in range(3, 8) for j in range(3, 8) if i <= j]
    assert c.b3[2] == pytest.approx(np.mean([t[i, j] for i, j in pairs]), rel=1e-13)
    assert c.b1 == s.a1
    with pytest.raises(ValueError):
        coarsen_measurement(s, 0)


def test_coarsen_psf_identity_and_point_mass():
    L = 10
    xi = PairSeparationFunction.from_pairs(np.arange(10, 25), np.arange(1, 16), L)
    np.testing.assert_allclose(coarsen_psf(xi, 5, L).mass, xi.mass, rtol=1e-15)
    point = PairSeparationFunction.from_pairs([13], [1.0], L)
    c = coarsen_psf(point, 1, L)
    assert c.mass.sum() == pytest.approx(1.0) and c[3] == 1.0


def test_coarsen_psf_uniform_windows():
    # hand evaluation of the bin rule for dx = 5: gaps 8..12 -> 2, 13..17 -> 3, 18..22 -> 4
    L = 10
    xi = PairSeparationFunction.from_pairs(np.arange(10, 19), np.ones(9), L)
    c = coarsen_psf(xi, 1, L)
    assert c.mass.sum() == pytest.approx(1.0, abs=1e-12)
    assert c[2] == pytest.approx(3 / 9) and c[3] == pytest.approx(5 / 9)
    assert c[4] == pytest.approx(1 / 9)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([(10, 1), (10, 2), (10, 3), (9, 2), (8, 2), (7, 1)]),
       st.integers(0, 2**32 - 1))
def test_coarsen_psf_preserves_mass(case, seed):
    L, n_max = case
    rng = np.random.default_rng(seed)
    gaps = np.arange(L, 3 * L + 1)
    xi = PairSeparationFunction.from_pairs(gaps, rng.uniform(0, 1, gaps.size), L)
    assert coarsen_psf(xi, n_max, L).mass.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([(10, 2), (10, 5), (12, 3), (9, 3)]), st.integers(0, 2**32 - 1))
def test_rho1_coarsen_refine_round_trip(case, dx, ):
    L, delta = case
    rng = np.random.default_rng(dx)
    rho1 = rng.uniform(0, 0.1, L - 1)
    c = coarsen_rho1(rho1, L, delta)
    back = refine_rho1(c, rho1, L, delta)
    # each coarse window keeps its total mass after the round trip
    np.testing.assert_allclose(coarsen_rho1(back, L, delta), c, rtol=1e-12, atol=1e-15)
    if delta == 1:
        np.testing.assert_allclose(back, rho1, rtol=1e-15)
