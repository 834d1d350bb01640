"""Liouville sampling and reproducible Monte Carlo estimates for the Lorentz gas.

Every sample ``i`` of a run with seed ``s`` draws its randomness from a
counter-based stream keyed by ``(s, i)``.  Results therefore depend only on
``(config, n, total_samples, seed)``, never on the number of worker threads
or on how the sample range is chunked, and partial runs merge exactly.
"""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

from . import _kernels as K
from .billiard import DEFAULT_MAX_CELLS, PhasePoint, kernel_tables
from .geometry import LatticeConfig, validate_config

WORKERS_ENV = "LORENTZ_LLD_WORKERS"
CHUNK = 1 << 16
MIN_EXCEEDANCES = 100
MIN_CONDITIONING = 50


class FitWindowEmpty(ValueError):
    """No threshold inside the fit window has enough exceedances to fit a slope."""


def resolve_workers(workers: int | None = None, config_value: int | None = None) -> int:
    """Thread count with precedence explicit argument > environment > config > all cores."""
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        if env:
            workers = int(env)
        elif config_value is not None:
            workers = int(config_value)
        else:
            workers = numba.config.NUMBA_NUM_THREADS
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    return min(int(workers), numba.config.NUMBA_NUM_THREADS)


def _check(config: LatticeConfig):
    res = validate_config(config)
    if not res:
        raise ValueError("invalid configuration: " + "; ".join(res.violations))


# ----------------------------------------------------------------------------
# sampling


@dataclass
class SeedStream:
    """Deterministic stream of per-sample keys: the i-th draw uses ``hash(seed, i)``."""

    seed: int
    index: int = 0

    def next_index(self) -> int:
        i = self.index
        self.index += 1
        return i


def sample_phase_point(config: LatticeConfig, seed_stream: SeedStream) -> PhasePoint:
    """One draw from the normalized Liouville measure cos(phi) dr dphi / (2 |boundary|).

    The boundary position is uniform in total arclength and
    ``phi = arcsin(2U - 1)``; the point sits in cell 0.
    """
    _check(config)
    t = kernel_tables(config)
    i = seed_stream.next_index()
    disk, theta, phi = K.sample_points(np.uint64(seed_stream.seed), i, 1, t.centers, t.radii, t.cumw)
    return PhasePoint(int(disk[0]), float(theta[0]), float(phi[0]))


def sample_phase_points(config: LatticeConfig, seed: int, count: int, start: int = 0):
    """Vectorized draws ``start .. start + count - 1``: arrays (disk_index, boundary_angle, phi)."""
    _check(config)
    t = kernel_tables(config)
    return K.sample_points(np.uint64(seed), start, count, t.centers, t.radii, t.cumw)


def _trajectories(config, seed, start, count, n_steps, checkpoints, max_cells):
    t = kernel_tables(config)
    return K.run_trajectories(
        np.uint64(seed), start, count, n_steps, np.asarray(checkpoints, np.int64), config.dimension,
        t.tx, t.ty, t.tr, t.tdisk, t.tox, t.toy, t.centers, t.radii, t.cumw, max_cells)


# ----------------------------------------------------------------------------
# displacement histograms


def _key(row, d):
    return int(row[0]) if d == 1 else (int(row[0]), int(row[1]))


@dataclass
class DisplacementHistogram:
    """Empirical law of kappa_n over Liouville samples.

    ``seed`` is ``None`` after merging histograms produced with different seeds.
    """

    n: int
    counts: dict
    total_samples: int
    overflow_count: int
    seed: int | None
    config_digest: str
    dimension: int = 2
    wall_time_s: float = 0.0

    def __post_init__(self):
        if sum(self.counts.values()) + self.overflow_count != self.total_samples:
            raise ValueError("counts plus overflow_count must equal total_samples")

    @property
    def support(self) -> list:
        return sorted(self.counts)

    def probability(self, N) -> float:
        return self.counts.get(N, 0) / self.total_samples

    def standard_error(self, N) -> float:
        p = self.probability(N)
        return math.sqrt(p * (1.0 - p) / self.total_samples)

    def most_common(self, k: int) -> list:
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]

    def merge(self, other: "DisplacementHistogram") -> "DisplacementHistogram":
        if (self.n, self.config_digest, self.dimension) != (other.n, other.config_digest, other.dimension):
            raise ValueError("can only merge histograms with equal n, dimension and config digest")
        counts = dict(self.counts)
        for k, v in other.counts.items():
            counts[k] = counts.get(k, 0) + v
        seed = self.seed if self.seed == other.seed else None
        return DisplacementHistogram(self.n, counts, self.total_samples + other.total_samples,
                                     self.overflow_count + other.overflow_count, seed,
                                     self.config_digest, self.dimension,
                                     self.wall_time_s + other.wall_time_s)

    def project(self, axis: int = 0) -> "DisplacementHistogram":
        """One-dimensional histogram of a single component of kappa_n."""
        if self.dimension == 1:
            return self
        counts: dict = {}
        for N, c in self.counts.items():
            counts[N[axis]] = counts.get(N[axis], 0) + c
        return DisplacementHistogram(self.n, counts, self.total_samples, self.overflow_count, self.seed,
                                     f"{self.config_digest}/axis{axis}", 1, self.wall_time_s)

    def metadata(self) -> dict:
        return {"n": self.n, "d": self.dimension, "seed": self.seed, "total_samples": self.total_samples,
                "overflow_count": self.overflow_count, "config_digest": self.config_digest,
                "wall_time_s": self.wall_time_s}

    def save(self, csv_path, json_path=None) -> None:
        """Counts as CSV (``n, kappa_x[, kappa_y], count``) and run metadata as JSON."""
        csv_path = Path(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        comps = ["kappa_x"] if self.dimension == 1 else ["kappa_x", "kappa_y"]
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", *comps, "count"])
            for k in self.support:
                parts = [k] if self.dimension == 1 else list(k)
                w.writerow([self.n, *parts, self.counts[k]])
        json_path.write_text(json.dumps(self.metadata(), indent=2))

    @classmethod
    def load(cls, csv_path, json_path=None) -> "DisplacementHistogram":
        csv_path = Path(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        meta = json.loads(json_path.read_text())
        d = int(meta["d"])
        counts = {}
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = int(row["kappa_x"]) if d == 1 else (int(row["kappa_x"]), int(row["kappa_y"]))
                counts[key] = int(row["count"])
        return cls(int(meta["n"]), counts, int(meta["total_samples"]), int(meta["overflow_count"]),
                   meta["seed"], meta["config_digest"], d, float(meta.get("wall_time_s", 0.0)))


def _bin(kappas: np.ndarray, d: int) -> dict:
    cols = kappas[:, :1] if d == 1 else kappas
    if len(cols) == 0:
        return {}
    uniq, cnt = np.unique(cols, axis=0, return_counts=True)
    return {_key(u, d): int(c) for u, c in zip(uniq, cnt)}


def estimate_displacement_laws(config: LatticeConfig, ns: Sequence[int], total_samples: int, seed: int,
                               workers: int | None = None, start: int = 0,
                               max_cells: int = DEFAULT_MAX_CELLS) -> dict[int, DisplacementHistogram]:
    """Histograms of kappa_n for several n from the same set of trajectories.

    Sample indices ``start .. start + total_samples - 1`` are used, so runs over
    disjoint index ranges can be merged into one larger campaign.
    """
    _check(config)
    ns = sorted(set(int(n) for n in ns))
    if not ns or ns[0] < 1:
        raise ValueError("every n must be >= 1")
    if total_samples < 1:
        raise ValueError("total_samples must be >= 1")
    numba.set_num_threads(resolve_workers(workers))
    d = config.dimension
    counts = {n: {} for n in ns}
    lost = {n: 0 for n in ns}
    t0 = time.perf_counter()
    for lo in range(0, total_samples, CHUNK):
        count = min(CHUNK, total_samples - lo)
        kap, reached, _, _, _ = _trajectories(config, seed, start + lo, count, ns[-1], ns, max_cells)
        for c, n in enumerate(ns):
            ok = reached > c
            lost[n] += int(count - ok.sum())
            for k, v in _bin(kap[ok, c, :], d).items():
                counts[n][k] = counts[n].get(k, 0) + v
    wall = time.perf_counter() - t0
    digest = config.digest()
    return {n: DisplacementHistogram(n, counts[n], total_samples, lost[n], seed, digest, d, wall) for n in ns}


def estimate_displacement_law(config: LatticeConfig, n: int, total_samples: int, seed: int,
                              workers: int | None = None, start: int = 0,
                              max_cells: int = DEFAULT_MAX_CELLS) -> DisplacementHistogram:
    """Empirical mu(kappa_n = N): ``total_samples`` Liouville points advanced ``n`` collisions.

    Aborted trajectories (grazing or overflow) are counted in ``overflow_count``.
    The result is bit-identical for any ``workers``.
    """
    return estimate_displacement_laws(config, [n], total_samples, seed, workers, start, max_cells)[n]


def phase_sines(config: LatticeConfig, n: int, total_samples: int, seed: int,
                workers: int | None = None) -> np.ndarray:
    """sin(phi) after ``n`` collisions for each Liouville sample; NaN where the trajectory aborted.

    Invariance of the Liouville measure makes these uniform on (-1, 1) for every n.
    """
    _check(config)
    if n < 0 or total_samples < 1:
        raise ValueError("need n >= 0 and total_samples >= 1")
    numba.set_num_threads(resolve_workers(workers))
    out = np.empty(total_samples)
    for lo in range(0, total_samples, CHUNK):
        count = min(CHUNK, total_samples - lo)
        _, reached, _, sphi, status = _trajectories(config, seed, lo, count, n, [n], DEFAULT_MAX_CELLS)
        out[lo:lo + count] = np.where(status == K.OK, sphi, np.nan)
    return out


def merge_histograms(parts: Iterable[DisplacementHistogram]) -> DisplacementHistogram:
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")
    out = parts[0]
    for h in parts[1:]:
        out = out.merge(h)
    return out


# ----------------------------------------------------------------------------
# tails


@dataclass
class TailCurve:
    thresholds: list
    survival: list
    standard_errors: list
    fitted_exponent: float
    fit_window: tuple
    total_samples: int = 0
    exceedances: list = field(default_factory=list)
    fit_intercept: float = 0.0


def _step_norms(kappa: np.ndarray, d: int) -> np.ndarray:
    if d == 1:
        return np.abs(kappa[:, 0]).astype(float)
    return np.hypot(kappa[:, 0], kappa[:, 1])


def one_step_norms(config: LatticeConfig, total_samples: int, seed: int, workers: int | None = None,
                   max_cells: int = DEFAULT_MAX_CELLS):
    """|kappa_1| for each Liouville sample plus the number of aborted flights."""
    _check(config)
    numba.set_num_threads(resolve_workers(workers))
    norms = np.empty(total_samples)
    lost = 0
    for lo in range(0, total_samples, CHUNK):
        count = min(CHUNK, total_samples - lo)
        kap, reached, _, _, _ = _trajectories(config, seed, lo, count, 1, [1], max_cells)
        ok = reached > 0
        lost += int(count - ok.sum())
        nrm = _step_norms(kap[:, 0, :], config.dimension)
        nrm[~ok] = np.nan
        norms[lo:lo + count] = nrm
    return norms, lost


def tail_from_norms(norms: np.ndarray, thresholds: Sequence[int], fit_window=(8, 256)) -> TailCurve:
    """Survival curve mu(|kappa| > m) and the log-log slope over ``fit_window``."""
    thresholds = [int(m) for m in thresholds]
    if not thresholds or any(m < 1 for m in thresholds) or any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be increasing integers >= 1")
    total = len(norms)
    srt = np.sort(np.nan_to_num(norms, nan=np.inf))
    exceed = [int(total - np.searchsorted(srt, m, side="right")) for m in thresholds]
    surv = [e / total for e in exceed]
    se = [math.sqrt(p * (1 - p) / total) for p in surv]
    lo, hi = fit_window
    use = [i for i, m in enumerate(thresholds) if lo <= m <= hi and exceed[i] >= MIN_EXCEEDANCES]
    if len(use) < 2:
        raise FitWindowEmpty(f"fewer than two thresholds in {fit_window} have >= {MIN_EXCEEDANCES} exceedances")
    x = np.log([thresholds[i] for i in use])
    y = np.log([surv[i] for i in use])
    slope, intercept = np.polyfit(x, y, 1)
    return TailCurve(thresholds, surv, se, float(slope), (lo, hi), total, exceed, float(intercept))


def estimate_tail(config: LatticeConfig, total_samples: int, seed: int, thresholds: Sequence[int],
                  fit_window=(8, 256), workers: int | None = None) -> TailCurve:
    """Empirical mu(|kappa| > m) from one-step flights and its fitted power-law exponent.

    Aborted flights are counted as exceeding every threshold, which can only
    make the tail heavier by at most their (measure-zero) share.

    Raises
    ------
    FitWindowEmpty
        If fewer than two thresholds inside ``fit_window`` have at least 100 exceedances.
    """
    norms, _ = one_step_norms(config, total_samples, seed, workers)
    return tail_from_norms(norms, thresholds, fit_window)


# ----------------------------------------------------------------------------
# Birkhoff sum decomposition


@dataclass(frozen=True)
class FlightDecomposition:
    """Frequencies of {S_n >= N}, {M_n > N/2} and {S_n >= N, M_n <= N/2}."""

    n: int
    N_norm: float
    p_sum: float
    p_max: float
    p_joint: float
    se_sum: float
    se_max: float
    se_joint: float
    total_samples: int
    overflow_count: int

    def union_bound_holds(self, k: float = 4.0) -> bool:
        slack = k * math.sqrt(self.se_sum**2 + self.se_max**2 + self.se_joint**2)
        return self.p_sum <= self.p_max + self.p_joint + slack


def estimate_flight_decomposition(config: LatticeConfig, n: int, N_norm: float, total_samples: int, seed: int,
                                  workers: int | None = None) -> FlightDecomposition:
    """Monte Carlo for the events splitting {S_n >= |N|} by the size of the largest step."""
    if n < 1 or N_norm <= 0:
        raise ValueError("need n >= 1 and N_norm > 0")
    _check(config)
    numba.set_num_threads(resolve_workers(workers))
    a = b = c = lost = 0
    for lo in range(0, total_samples, CHUNK):
        count = min(CHUNK, total_samples - lo)
        _, reached, sm, _, _ = _trajectories(config, seed, lo, count, n, [n], DEFAULT_MAX_CELLS)
        ok = reached > 0
        lost += int(count - ok.sum())
        s, m = sm[ok, 0], sm[ok, 1]
        big = s >= N_norm
        a += int(big.sum())
        b += int((m > N_norm / 2).sum())
        c += int((big & (m <= N_norm / 2)).sum())
    tot = total_samples

    def se(k):
        p = k / tot
        return math.sqrt(p * (1 - p) / tot)

    return FlightDecomposition(n, float(N_norm), a / tot, b / tot, c / tot, se(a), se(b), se(c), tot, lost)


# ----------------------------------------------------------------------------
# corridor correlation


@dataclass
class CorrelationTable:
    """Rows indexed by p, columns by r; ``unreliable`` marks cells with < 50 conditioning events."""

    p_values: list
    r_values: list
    c: float
    ratio: np.ndarray
    standard_error: np.ndarray
    conditioning_counts: np.ndarray
    unreliable: np.ndarray
    total_samples: int


def estimate_corridor_correlation(config: LatticeConfig, p_range: Sequence[int], r_range: Sequence[int], c: float,
                                  total_samples: int, seed: int, workers: int | None = None) -> CorrelationTable:
    """mu(|kappa| = p, |kappa o T^r| >= c p^(4/5)) / mu(|kappa| = p) over a (p, r) grid.

    ``|kappa| = p`` means ``floor(|kappa|) = p``, since the Euclidean norm of a
    lattice vector is rarely an integer.
    """
    p_values = [int(p) for p in p_range]
    r_values = [int(r) for r in r_range]
    if c <= 0 or not p_values or not r_values or min(r_values) < 0:
        raise ValueError("need c > 0, nonempty ranges and r >= 0")
    _check(config)
    numba.set_num_threads(resolve_workers(workers))
    t = kernel_tables(config)
    d = config.dimension
    R = max(r_values) + 1
    P = np.array(p_values)
    thresh = c * P.astype(float) ** 0.8
    cond = np.zeros(len(P), np.int64)
    hits = np.zeros((len(P), len(r_values)), np.int64)
    for lo in range(0, total_samples, CHUNK):
        count = min(CHUNK, total_samples - lo)
        steps, status = K.run_step_sequences(np.uint64(seed), lo, count, R, t.tx, t.ty, t.tr, t.tdisk,
                                             t.tox, t.toy, t.centers, t.radii, t.cumw, DEFAULT_MAX_CELLS)
        ok = status == K.OK
        norms = np.stack([_step_norms(steps[:, k, :], d) for k in range(R)], axis=1)[ok]
        first = np.floor(norms[:, 0]).astype(np.int64)
        for i, p in enumerate(P):
            sel = norms[first == p]
            cond[i] += len(sel)
            for jr, r in enumerate(r_values):
                hits[i, jr] += int((sel[:, r] >= thresh[i]).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(cond[:, None] > 0, hits / np.maximum(cond, 1)[:, None], np.nan)
        se = np.sqrt(ratio * (1 - ratio) / np.maximum(cond, 1)[:, None])
    return CorrelationTable(p_values, r_values, float(c), ratio, se, cond, cond < MIN_CONDITIONING, total_samples)


# ----------------------------------------------------------------------------
# CLT diagnostics


@dataclass
class CLTFit:
    n: int
    ks: float
    sigma: float
    variance: float
    samples: int


def _projected(hist: DisplacementHistogram, axis: int):
    vals: dict = {}
    for N, c in hist.counts.items():
        x = N if hist.dimension == 1 else N[axis]
        vals[x] = vals.get(x, 0) + c
    xs = np.array(sorted(vals), float)
    return xs, np.array([vals[x] for x in sorted(vals)], float)


def ks_to_gaussian(xs: np.ndarray, weights: np.ndarray, sigma: float) -> float:
    """Kolmogorov distance between a weighted discrete law and N(0, sigma^2).

    Both one-sided limits of the empirical CDF are compared at every atom.
    """
    from scipy.stats import norm

    cdf = np.cumsum(weights) / weights.sum()
    left = np.concatenate([[0.0], cdf[:-1]])
    g = norm.cdf(xs / sigma)
    return float(max(np.abs(cdf - g).max(), np.abs(left - g).max()))


def clt_fit(hist: DisplacementHistogram, axis: int = 0) -> CLTFit:
    """KS distance of the projected kappa_n / a_n to its best-fit centred Gaussian.

    The best fit minimizes the KS distance over the standard deviation: a
    log grid around the sample standard deviation, then a bounded refinement.  Overflowed trajectories are
    excluded.
    """
    from scipy.optimize import minimize_scalar

    from .bounds import a_n

    xs, w = _projected(hist, axis)
    xs = xs / a_n(hist.n)
    var = float(np.sum(w * xs**2) / w.sum())
    s0 = math.sqrt(var)
    grid = s0 * np.geomspace(0.5, 2.0, 61)
    vals = [ks_to_gaussian(xs, w, s) for s in grid]
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(lambda s: ks_to_gaussian(xs, w, s), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-6 * s0})
    ks, s = (res.fun, res.x) if res.fun < vals[i] else (vals[i], grid[i])
    return CLTFit(hist.n, float(ks), float(s), var, int(w.sum()))
