import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from lorentz_lld.billiard import exact_step_law
from lorentz_lld.geometry import single_disk
from lorentz_lld.montecarlo import (
    WORKERS_ENV,
    DisplacementHistogram,
    FitWindowEmpty,
    SeedStream,
    clt_fit,
    estimate_corridor_correlation,
    estimate_displacement_law,
    estimate_displacement_laws,
    estimate_flight_decomposition,
    estimate_tail,
    ks_to_gaussian,
    merge_histograms,
    resolve_workers,
    sample_phase_point,
    sample_phase_points,
    tail_from_norms,
)

CFG = single_disk(0.25)


@pytest.fixture(scope="module")
def phases():
    _, _, phi = sample_phase_points(CFG, 123, 10**6)
    return phi


def test_sin_phi_is_uniform(phases):
    assert stats.kstest(np.sin(phases), "uniform", args=(-1, 2)).statistic <= 0.002


def test_cos_phi_mean(phases):
    c = np.cos(phases)
    se = c.std() / math.sqrt(len(c))
    assert abs(c.mean() - math.pi / 4) <= 3 * se


def test_sampler_determinism():
    a, b = SeedStream(99), SeedStream(99)
    pa = [sample_phase_point(CFG, a) for _ in range(1000)]
    pb = [sample_phase_point(CFG, b) for _ in range(1000)]
    assert pa == pb
    arr = sample_phase_points(CFG, 99, 1000)
    assert pa[17].phi == arr[2][17]
    assert all(p.cell == (0, 0) for p in pa[:10])


def test_workers_do_not_change_counts():
    h1 = estimate_displacement_law(CFG, 3, 50_000, 5, workers=1)
    h8 = estimate_displacement_law(CFG, 3, 50_000, 5, workers=8)
    assert h1.counts == h8.counts
    assert h1.overflow_count == h8.overflow_count


def test_multi_n_matches_single_n():
    many = estimate_displacement_laws(CFG, [2, 5], 20_000, 8)
    assert many[5].counts == estimate_displacement_law(CFG, 5, 20_000, 8).counts


def test_histogram_symmetry():
    h = estimate_displacement_law(CFG, 4, 200_000, 21)
    top = sorted(h.counts, key=h.counts.get, reverse=True)[:20]
    for N in top:
        a = h.counts[N]
        b = h.counts.get((-N[0], -N[1]), 0)
        assert abs(a - b) <= 4 * math.sqrt(a + b)


def test_n1_matches_exact_step_law():
    h = estimate_displacement_law(CFG, 1, 400_000, 31)
    targets = [(i, j) for i in range(-3, 4) for j in range(-3, 4)]
    law = exact_step_law(CFG, targets, tol=1e-7)
    n = h.total_samples
    checked = 0
    for N in targets:
        p = law[N]
        if p <= 1e-5:
            continue
        q = h.probability(N)
        err = math.sqrt(p * (1 - p) / n) + 1e-7
        assert abs(q - p) <= 3 * err * math.sqrt(2) + 3 * math.sqrt(q * (1 - q) / n)
        checked += 1
    assert checked >= 8


def _split(seed=4):
    return [estimate_displacement_law(CFG, 3, 5_000, seed, start=s) for s in (0, 5_000, 10_000)]


def test_merge_commutes_and_associates():
    a, b, c = _split()
    left = a.merge(b).merge(c)
    right = a.merge(b.merge(c))
    other = merge_histograms([c, a, b])
    assert left.counts == right.counts == other.counts
    assert left.total_samples == 15_000
    whole = estimate_displacement_law(CFG, 3, 15_000, 4)
    assert whole.counts == left.counts
    assert left.seed == 4


def test_merge_of_different_seeds_clears_seed():
    a = estimate_displacement_law(CFG, 2, 1_000, 1)
    b = estimate_displacement_law(CFG, 2, 1_000, 2)
    assert a.merge(b).seed is None
    with pytest.raises(ValueError):
        a.merge(estimate_displacement_law(CFG, 3, 1_000, 1))


def test_histogram_save_load(tmp_path):
    h = estimate_displacement_law(CFG.with_dimension(1), 4, 3_000, 9)
    h.save(tmp_path / "h.csv")
    back = DisplacementHistogram.load(tmp_path / "h.csv")
    assert back.counts == h.counts and back.dimension == 1 and back.seed == 9


def test_counts_must_add_up():
    with pytest.raises(ValueError):
        DisplacementHistogram(1, {0: 3}, 5, 1, 0, "x", 1)


def test_tail_curve():
    tc = estimate_tail(CFG, 400_000, 3, [1, 2, 4, 8, 16, 32, 64, 128, 256])
    assert tc.survival[0] <= 1
    assert all(b <= a for a, b in zip(tc.survival, tc.survival[1:]))
    assert -2.35 <= tc.fitted_exponent <= -1.65
    assert tc.fitted_exponent == pytest.approx(-2.179278508439043, abs=1e-9)


def test_tail_standard_errors_scale():
    rng = np.random.default_rng(0)
    norms = rng.pareto(2.0, 400_000) + 1
    small = tail_from_norms(norms[:200_000], [1, 2, 4, 8, 16, 32])
    big = tail_from_norms(norms, [1, 2, 4, 8, 16, 32])
    for s, b in zip(small.standard_errors[1:4], big.standard_errors[1:4]):
        assert b / s == pytest.approx(1 / math.sqrt(2), rel=0.1)


def test_fit_window_empty():
    with pytest.raises(FitWindowEmpty):
        tail_from_norms(np.ones(1000), [8, 16])


def test_flight_decomposition_fixture():
    fd = estimate_flight_decomposition(CFG, 16, 200.0, 200_000, 7)
    assert (fd.p_sum, fd.p_max, fd.p_joint) == (0.00022, 0.000595, 0.0)
    assert fd.p_joint <= fd.p_sum
    assert fd.union_bound_holds()


def test_flight_decomposition_n1_has_no_joint_mass():
    fd = estimate_flight_decomposition(CFG, 1, 3.0, 20_000, 1)
    assert fd.p_joint == 0.0
    assert fd.p_sum > 0


def test_corridor_correlation():
    ct = estimate_corridor_correlation(CFG, [8, 16, 32, 64], [0, 1, 2], 1.0, 400_000, 11)
    assert np.all(ct.ratio[:, 0] == 1.0)
    ok = ~np.isnan(ct.ratio)
    assert np.all((ct.ratio[ok] >= 0) & (ct.ratio[ok] <= 1))
    assert list(ct.conditioning_counts) == [778, 122, 11, 2]
    assert ct.ratio[0, 1] == pytest.approx(0.03856041, abs=1e-8)
    assert list(ct.unreliable) == [False, False, True, True]


def test_worker_precedence(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "1")
    assert resolve_workers(None, 4) == 1
    assert resolve_workers(1, 4) == 1
    monkeypatch.delenv(WORKERS_ENV)
    assert resolve_workers(None, 1) == 1
    with pytest.raises(ValueError):
        resolve_workers(0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.3, 3.0))
def test_ks_to_gaussian_is_small_on_its_own_quantiles(sigma):
    xs = stats.norm.ppf(np.linspace(0.0005, 0.9995, 1000)) * sigma
    assert ks_to_gaussian(xs, np.ones_like(xs), sigma) <= 1.5e-3


def test_clt_fit_recovers_gaussian_scale():
    n = 64
    rng = np.random.default_rng(1)
    from lorentz_lld.bounds import a_n

    xs = np.rint(rng.normal(0, 1.3 * a_n(n), 200_000)).astype(int)
    vals, cnt = np.unique(xs, return_counts=True)
    h = DisplacementHistogram(n, dict(zip(vals.tolist(), cnt.tolist())), len(xs), 0, 1, "x", 1)
    fit = clt_fit(h)
    assert fit.sigma == pytest.approx(1.3, rel=0.02)
    # integer rounding leaves atoms 1/a_n apart, so KS cannot drop much below 0.01
    assert fit.ks <= 0.02
