"""Acceptance criteria, each checked at its stated tolerance.

Every test reports a one-line verdict through :func:`conftest.record_criterion`;
the lines are repeated in the terminal summary.  Full-scale Monte Carlo runs
for the CLT and bounded-ratio criteria carry the ``slow`` marker; the default
run checks them on a reduced, pre-seeded sample.
"""

import math
import time

import numpy as np
import pytest
from conftest import record_criterion
from oracles import oracle_flight
from scipy import stats

from lorentz_lld import bounds as B
from lorentz_lld import montecarlo as M
from lorentz_lld import spectral as S
from lorentz_lld import tower as T
from lorentz_lld.billiard import BilliardError, PhasePoint, cover_position, exact_step_law, next_collision, reverse_point
from lorentz_lld.geometry import single_disk

CFG = single_disk(0.25)
SHIPPED = T.shipped_models()
SEED = 2024
N_LLD = (64, 256, 1024, 4096)


@pytest.fixture(scope="module")
def heavy_big():
    return T.build_tower(T.make_heavy_tailed_model(10_000))


@pytest.fixture(scope="module")
def billiard_laws():
    """One pre-seeded campaign of 1e5 planar trajectories, checkpointed at every n the criteria need."""
    return M.estimate_displacement_laws(CFG, list(N_LLD) + [2048], 10**5, SEED)


def _elapsed(t0):
    return time.perf_counter() - t0


def test_criterion_01_fourier_inversion_matches_dp():
    t0 = time.perf_counter()
    worst = 0.0
    for base in (T.make_bernoulli_model(), T.make_heavy_tailed_model(2), T.make_heavy_tailed_model(64)):
        tw = T.build_tower(base)
        for n in (1, 2, 4, 8, 16, 32, 64):
            exact = T.exact_displacement_law(tw, n)
            inv = S.fourier_inversion_law(tw, n)
            keys = set(exact) | set(inv)
            worst = max(worst, max(abs(exact.get(N, 0.0) - inv.get(N, 0.0)) for N in keys))
    bern = S.fourier_inversion_law(T.build_tower(T.make_bernoulli_model()), 2)[0]
    h2 = S.fourier_inversion_law(T.build_tower(T.make_heavy_tailed_model(2)), 2)[0]
    closed = max(abs(bern - 0.5), abs(h2 - 65 / 162))
    dt = _elapsed(t0)
    ok = worst <= 1e-10 and closed <= 1e-10 and dt < 10
    record_criterion(1, ok, f"max abs error {worst:.2e}, closed forms {closed:.2e}, {dt:.1f} s")
    assert ok


def _renewal_towers():
    towers = {name: T.build_tower(SHIPPED[name]) for name in ("bernoulli", "heavy-2", "period-two", "random-chain")}
    towers["random-chain-10"] = T.build_tower(T.make_random_chain(10, max_sigma=8, seed=3))
    towers["heavy-10-spread"] = T.build_tower(T.make_heavy_tailed_model(10, sigma_profile=lambda m: min(8, m)))
    for tw in towers.values():
        assert tw.base.alphabet_size <= 20 and tw.base.sigma.max() <= 8
    return towers


def test_criterion_02_renewal_identities():
    t0 = time.perf_counter()
    zs = [r * np.exp(0.5j * np.pi * k) for r in (0.3, 0.6, 0.9) for k in range(4)]
    ts = [0.0, 0.05, 0.2]
    worst = 0.0
    for tw in _renewal_towers().values():
        res = S.verify_renewal_identity(tw, zs, ts, N_max=200)
        worst = max(worst, res.inverse, res.decomposition)
    dt = _elapsed(t0)
    ok = worst <= 1e-8 and dt < 30
    record_criterion(2, ok, f"worst residual {worst:.2e}, {dt:.1f} s")
    assert ok


def test_criterion_03_lambda_is_inverse_g():
    t0 = time.perf_counter()
    grid = np.linspace(-0.29, 0.29, 31)
    worst = 0.0
    for base in SHIPPED.values():
        worst = max(worst, S.verify_lambda_g(T.build_tower(base), grid).max_discrepancy)
    g1 = S.solve_gk(T.build_tower(SHIPPED["period-two"]), 1, 0.0).g
    dt = _elapsed(t0)
    ok = worst <= 1e-8 and abs(g1 + 1) <= 1e-10 and dt < 10
    record_criterion(3, ok, f"sup |lambda - 1/g| {worst:.2e}, q=2 branch g_1(0) = {g1.real:+.12f}, {dt:.1f} s")
    assert ok


def test_criterion_04_eigenvalue_expansion(heavy_big):
    t0 = time.perf_counter()
    ts = np.geomspace(1e-4, 0.2, 20)
    lam = S.track_lambda(heavy_big, [[t] for t in ts])
    ratio = np.abs(1 - lam) / (ts**2 * np.log(1 / ts))
    spread = float(ratio.max() / ratio.min())
    s1 = S.fit_Sigma(heavy_big, [[t] for t in np.geomspace(1e-4, 1e-3, 6)]).Sigma[0, 0]
    s2 = S.fit_Sigma(heavy_big, [[t] for t in np.geomspace(1e-3, 1e-2, 6)]).Sigma[0, 0]
    rel = abs(s1 - s2) / s2
    dt = _elapsed(t0)
    ok = spread <= 3 and rel <= 0.25 and dt < 5
    record_criterion(4, ok, f"max/min {spread:.3f}, Sigma decades {s1:.4f} vs {s2:.4f} ({rel:.1%}), {dt:.1f} s")
    assert ok


def test_criterion_05_integrated_eigenvalue_powers(heavy_big):
    t0 = time.perf_counter()
    ns = [16, 64, 256, 1024, 4096]
    spreads = {}
    for beta, r in ((0, 0), (2, 1), (4, 2)):
        spreads[(beta, r)] = S.quadrature_cor_int(heavy_big, beta, r, ns).max_over_median
    dt = _elapsed(t0)
    ok = max(spreads.values()) <= 5 and dt < 60
    text = ", ".join(f"(beta,r)={k}: {v:.2f}" for k, v in spreads.items())
    record_criterion(5, ok, f"max/median {text}, {dt:.1f} s")
    assert ok


def test_criterion_06_derivative_modulus():
    t0 = time.perf_counter()
    tg = np.geomspace(1e-3, S.DELTA / 2, 8)
    hg = np.geomspace(1e-4, S.DELTA / 3, 8)
    worst_spread = worst_grad = worst_zero = 0.0
    finite = True
    for base in SHIPPED.values():
        rep = S.check_key_lemmas(T.build_tower(base), tg, hg, (0.5, 1.0, 2.0))
        for b in rep.b_values:
            finite &= math.isfinite(rep.mb_sup[b])
            if rep.mb_median[b] > 0:
                worst_spread = max(worst_spread, rep.mb_sup[b] / rep.mb_median[b])
        worst_grad = max(worst_grad, rep.grad_rel_error)
        worst_zero = max(worst_zero, rep.dlambda_at_zero)
    dt = _elapsed(t0)
    ok = finite and worst_spread <= 10 and worst_zero <= 1e-10 and worst_grad <= 1e-5 and dt < 60
    record_criterion(6, ok, f"max/median {worst_spread:.2f}, |dlambda(0)| {worst_zero:.1e}, "
                            f"gradient rel error {worst_grad:.1e}, {dt:.1f} s")
    assert ok


def test_criterion_07_billiard_tail():
    t0 = time.perf_counter()
    tc = M.estimate_tail(CFG, 10**7, SEED, [1, 2, 4, 8, 16, 32, 64, 128, 256, 512], fit_window=(8, 256))
    dt = _elapsed(t0)
    ok = -2.35 <= tc.fitted_exponent <= -1.65
    record_criterion(7, ok, f"fitted exponent {tc.fitted_exponent:.3f} from 1e7 flights, {dt:.1f} s")
    assert ok


def _clt_verdict(h_mid, h_last, ks_max):
    f_mid = M.clt_fit(h_mid.project(0))
    f_last = M.clt_fit(h_last.project(0))
    drift = abs(f_last.variance - f_mid.variance) / f_mid.variance
    return f_last.ks <= ks_max and drift <= 0.25, f_last, drift


def test_criterion_08_clt_smoke(billiard_laws):
    ok, fit, drift = _clt_verdict(billiard_laws[2048], billiard_laws[4096], 0.1)
    wall = billiard_laws[4096].wall_time_s
    ok = ok and wall < 120
    record_criterion(8, ok, f"[1e5 smoke] KS {fit.ks:.4f} at n=4096, variance drift {drift:.1%}, "
                            f"sampling {wall:.0f} s (full scale: pytest -m slow)")
    assert ok


@pytest.mark.slow
def test_criterion_08_clt_full_scale():
    t0 = time.perf_counter()
    laws = M.estimate_displacement_laws(CFG, [2048, 4096], 10**6, SEED)
    ok, fit, drift = _clt_verdict(laws[2048], laws[4096], 0.05)
    record_criterion(8, ok, f"[1e6 full] KS {fit.ks:.4f} at n=4096, variance drift {drift:.1%}, "
                            f"{_elapsed(t0):.0f} s")
    assert ok


def _lld_verdict(laws):
    parts = []
    ok = True
    for d in (1, 2):
        hs = [laws[n] if d == 2 else laws[n].project(0) for n in N_LLD]
        rep = B.ratio_table(hs, "lld", min_count=30, max_scale=4.0)
        s = rep.summary()
        good = s["max_over_median"] <= 10 and s["slope_max"] <= 0.1
        ok &= good
        covered = ",".join(str(n) for n in rep.per_n())
        parts.append(f"d={d} (n with count>=30: {covered}): max/median {s['max_over_median']:.2f}, "
                     f"slope of per-n max {s['slope_max']:+.3f} (per-n median {s['slope_median']:+.3f})")
    return ok, "; ".join(parts)


def test_criterion_09_lld_ratio_reduced(billiard_laws):
    ok, text = _lld_verdict(billiard_laws)
    record_criterion(9, ok, f"[1e5 reduced] {text} (full scale: pytest -m slow)")
    assert ok


@pytest.mark.slow
def test_criterion_09_lld_ratio_full_scale():
    laws = M.estimate_displacement_laws(CFG, list(N_LLD), 10**7, SEED)
    ok, text = _lld_verdict(laws)
    record_criterion(9, ok, f"[1e7 full] {text}")
    assert ok


def test_criterion_10_dynamics_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    landing = reversal = 0.0
    for _ in range(40):
        x = PhasePoint(0, float(rng.uniform(0, 2 * math.pi)), float(rng.uniform(-1.5, 1.5)))
        res = next_collision(CFG, x)
        _, ox, oy = oracle_flight(CFG, x, box=max(3, int(res.flight_length) + 3), dps=30)
        lx, ly = cover_position(CFG, res.next)
        landing = max(landing, abs(lx - float(ox)), abs(ly - float(oy)))
    for _ in range(2000):
        x = PhasePoint(0, float(rng.uniform(0, 2 * math.pi)), float(rng.uniform(-1.5, 1.5)))
        try:
            back = reverse_point(next_collision(CFG, reverse_point(next_collision(CFG, x).next)).next)
        except BilliardError:
            continue
        da = abs(math.remainder(back.boundary_angle - x.boundary_angle, 2 * math.pi))
        reversal = max(reversal, da, abs(back.phi - x.phi))
    ks = []
    for n in (1, 8):
        s = M.phase_sines(CFG, n, 10**6, SEED)
        ks.append(stats.kstest(s[~np.isnan(s)], "uniform", args=(-1, 2)).statistic)
    h = M.estimate_displacement_law(CFG, 1, 10**6, SEED)
    targets = [(i, j) for i in range(-6, 7) for j in range(-6, 7)]
    law = exact_step_law(CFG, targets, tol=1e-8)
    worst_z = 0.0
    for N in targets:
        p = law[N]
        if p <= 1e-5:
            continue
        q = h.probability(N)
        combined = math.sqrt(p * (1 - p) / h.total_samples + q * (1 - q) / h.total_samples) + 1e-8
        worst_z = max(worst_z, abs(q - p) / combined)
    dt = _elapsed(t0)
    ok = landing <= 1e-9 and reversal <= 1e-9 and max(ks) <= 0.002 and worst_z <= 3 and dt < 300
    record_criterion(10, ok, f"landing {landing:.1e}, reversal {reversal:.1e}, sin(phi) KS {ks[0]:.4f}/{ks[1]:.4f}, "
                             f"n=1 histogram within {worst_z:.2f} combined errors, {dt:.0f} s")
    assert ok


def test_criterion_11_psi_tails():
    t0 = time.perf_counter()
    worst = 0.0
    for m_max in (64, 10_000):
        pt = T.psi_tail_curve(T.make_heavy_tailed_model(m_max))
        worst = max(worst, pt.sup_m2_tail / T.heavy_tailed_normalization(m_max))
    spread = T.psi_tail_curve(SHIPPED["heavy-64-spread"])
    dt = _elapsed(t0)
    ok = worst <= 1 and math.isfinite(spread.envelope_ratio) and dt < 5
    record_criterion(11, ok, f"sup m^2 tail / c = {worst:.4f}, spread envelope ratio {spread.envelope_ratio:.3f}, "
                             f"{dt:.2f} s")
    assert ok


def test_criterion_12_smoothing_majorizes():
    t0 = time.perf_counter()
    kern = S.smoothing_kernel(S.DELTA)
    r0 = float(kern.fourier(0))
    rmin = float(kern.fourier(np.arange(-1000, 1001)).min())
    worst = math.inf
    for base in SHIPPED.values():
        tw = T.build_tower(base)
        for n in range(1, 33):
            exact = T.exact_displacement_law(tw, n)
            smooth = S.smoothed_law(tw, n, list(exact), kern)
            worst = min(worst, min(smooth[N] - p for N, p in exact.items()))
    dt = _elapsed(t0)
    ok = abs(r0 - 1) <= 1e-10 and rmin >= -1e-12 and worst >= -1e-9 and dt < 30
    record_criterion(12, ok, f"r(0) = {r0:.12f}, min r(m) {rmin:.1e}, min(smoothed - exact) {worst:+.2e}, {dt:.1f} s")
    assert ok
