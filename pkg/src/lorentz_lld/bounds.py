"""Scalar calculus of the local large deviation bounds.

Normalizers, the local large deviation bound functions, the Hölder-type moduli that
control the leading eigenvalue, slowly varying functions and bound/ratio
reports built from Monte Carlo histograms.  Logarithms are natural, and
``safe_log`` is 1 on ``[0, 2)`` so every bound is defined on all of Z^d.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

DEFAULT_EPS1 = 0.1
DEFAULT_MIN_COUNT = 30


class RegimeViolation(ValueError):
    """A bound was evaluated outside the (n, N) range where it is asserted."""


class DomainError(ValueError):
    """Arguments outside the domain of a modulus function."""


class NotMonotone(ValueError):
    """x^2 / l2(x) failed the monotonicity check needed to define a_n."""


def safe_log(x):
    """Natural log for x >= 2, and 1 on [0, 2).

    Works elementwise on arrays.
    """
    if np.ndim(x) == 0:
        x = float(x)
        if x < 0:
            raise ValueError("safe_log needs x >= 0")
        return math.log(x) if x >= 2.0 else 1.0
    x = np.asarray(x, float)
    if np.any(x < 0):
        raise ValueError("safe_log needs x >= 0")
    return np.where(x >= 2.0, np.log(np.maximum(x, 2.0)), 1.0)


def a_n(n):
    """Normalizer sqrt(n log n), with the log convention at n = 1."""
    if np.ndim(n) == 0:
        if n < 1:
            raise ValueError("n must be >= 1")
        return math.sqrt(n * safe_log(n))
    n = np.asarray(n, float)
    return np.sqrt(n * safe_log(n))


def _norm(N) -> float:
    return float(np.linalg.norm(np.atleast_1d(np.asarray(N, float))))


def lld_bound(n: int, N, d: int, C: float = 1.0) -> float:
    """Right-hand side of the local large deviation bound for the billiard.

    d = 1: ``C n/a_n log|N| / (1 + |N|^2)``; d = 2 adds a ``log log |N|``
    factor and uses ``a_n^2``.
    """
    if n < 1 or d not in (1, 2) or C <= 0:
        raise ValueError("need n >= 1, d in {1, 2}, C > 0")
    r = _norm(N)
    L = safe_log(r)
    if d == 1:
        return C * n / a_n(n) * L / (1 + r * r)
    return C * n / a_n(n) ** 2 * L * safe_log(L) / (1 + r * r)


# ----------------------------------------------------------------------------
# slowly varying functions


@dataclass(frozen=True)
class SlowlyVaryingFn:
    """A positive continuous slowly varying function on [0, inf).

    kinds
        ``constant``: ``params = {"c": c}``.
        ``power-of-log``: ``c * safe_log(x)^p``.
        ``integral-defined``: ``1 + int_1^{1+x} base(u)/u du``, the form that
        links the flight tail to the eigenvalue expansion for Gibbs-Markov maps.
        ``user-table``: log-log interpolation of ``(x, value)`` pairs, constant
        outside the table.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("constant", "power-of-log", "integral-defined", "user-table"):
            raise ValueError(f"unknown kind {self.kind!r}")

    @staticmethod
    def constant(c: float = 1.0) -> "SlowlyVaryingFn":
        if c <= 0:
            raise ValueError("constant must be positive")
        return SlowlyVaryingFn("constant", {"c": float(c)})

    @staticmethod
    def log_power(p: float = 1.0, c: float = 1.0) -> "SlowlyVaryingFn":
        return SlowlyVaryingFn("power-of-log", {"p": float(p), "c": float(c)})

    @staticmethod
    def integral_of(base: "SlowlyVaryingFn") -> "SlowlyVaryingFn":
        return SlowlyVaryingFn("integral-defined", {"base": base})

    @staticmethod
    def table(xs: Sequence[float], values: Sequence[float]) -> "SlowlyVaryingFn":
        xs = tuple(float(x) for x in xs)
        values = tuple(float(v) for v in values)
        if len(xs) < 2 or any(b <= a for a, b in zip(xs, xs[1:])) or min(xs) <= 0:
            raise ValueError("table abscissae must be positive and increasing")
        if min(values) <= 0:
            raise ValueError("table values must be positive")
        return SlowlyVaryingFn("user-table", {"x": xs, "v": values})

    def _scalar(self, x: float) -> float:
        if x < 0:
            raise ValueError("slowly varying functions are defined on [0, inf)")
        k, p = self.kind, self.params
        if k == "constant":
            return p["c"]
        if k == "power-of-log":
            return p["c"] * safe_log(x) ** p["p"]
        if k == "integral-defined":
            base = p["base"]
            # substitute u = e^s so the integrand is smooth in s
            val, _ = integrate.quad(lambda s: base(math.exp(s)), 0.0, math.log1p(x),
                                    epsabs=0.0, epsrel=1e-10, limit=200,
                                    points=[math.log(2.0)] if x > 1 else None)
            return 1.0 + val
        xs, vs = np.log(p["x"]), np.log(p["v"])
        return float(np.exp(np.interp(math.log(max(x, 1e-300)), xs, vs)))

    def __call__(self, x):
        if np.ndim(x) == 0:
            return self._scalar(float(x))
        return np.array([self._scalar(float(v)) for v in np.ravel(x)]).reshape(np.shape(x))

    def to_dict(self) -> dict:
        p = dict(self.params)
        if "base" in p:
            p["base"] = p["base"].to_dict()
        return {"kind": self.kind, "params": p}

    @staticmethod
    def from_dict(doc: dict) -> "SlowlyVaryingFn":
        p = dict(doc.get("params", {}))
        if "base" in p:
            p["base"] = SlowlyVaryingFn.from_dict(p["base"])
        for key in ("x", "v"):
            if key in p:
                p[key] = tuple(p[key])
        return SlowlyVaryingFn(doc["kind"], p)


ONE = SlowlyVaryingFn.constant(1.0)
LOG = SlowlyVaryingFn.log_power(1.0)


def tilde_ell1(ell1: SlowlyVaryingFn | Callable, x: float, log_squared: bool = False) -> float:
    """``int_1^{1+x} u^-1 ell1(u / log u) du`` with the safe_log convention inside.

    With ``log_squared`` the integrand carries an extra ``(log u)^2``, the
    sharper variant that only changes slowly varying factors.  Relative
    error below 1e-8.
    """
    if x < 1:
        raise ValueError("tilde_ell1 needs x >= 1")

    def integrand(s):  # u = e^s, du/u = ds
        u = math.exp(s)
        lu = safe_log(u)
        val = ell1(u / lu)
        return val * lu * lu if log_squared else val

    top = math.log1p(x)
    pts = [math.log(2.0)] if top > math.log(2.0) else None
    val, _ = integrate.quad(integrand, 0.0, top, epsabs=0.0, epsrel=1e-11, limit=500, points=pts)
    return float(val)


# ----------------------------------------------------------------------------
# moduli


def _abs(v) -> float:
    return _norm(v)


def _L(r: float) -> float:
    return math.log(1.0 / r)


def _check_unit(name: str, r: float):
    if not (0.0 < r < 1.0):
        raise DomainError(f"|{name}| must lie in (0, 1), got {r}")


def modulus_Mb(t, h, b: float) -> float:
    """``|h|L(h){1 + L(h)|t|^2 L(t) + |h|^(-b|t|^2 L(t)) L(h)^2 |t|^4 L(t)^2}``, ``L(t) = log(1/|t|)``."""
    rt, rh = _abs(t), _abs(h)
    _check_unit("t", rt)
    _check_unit("h", rh)
    if b <= 0:
        raise DomainError("b must be positive")
    Lt, Lh = _L(rt), _L(rh)
    q = rt * rt * Lt
    return rh * Lh * (1.0 + Lh * q + rh ** (-b * q) * Lh * Lh * q * q)


def tilde_L(r: float, ell1, log_squared: bool = False) -> float:
    """``L(t)^2 tilde_ell1(1/|t|)`` as a function of ``r = |t|``."""
    return _L(r) ** 2 * tilde_ell1(ell1, 1.0 / r, log_squared)


def modulus_Mb_tilde(t, h, b: float, ell1=ONE) -> float:
    """Abstract modulus: as :func:`modulus_Mb` with L replaced by the tilde version.

    ``|h| Lt(h){1 + L(h)|t|^2 Lt(t) + |h|^(-b|t|^2 Lt(t)) L(h)^2 |t|^4 Lt(t)^2}``
    with ``Lt(t) = L(t)^2 tilde_ell1(1/|t|)``.
    """
    rt, rh = _abs(t), _abs(h)
    _check_unit("t", rt)
    _check_unit("h", rh)
    if b <= 0:
        raise DomainError("b must be positive")
    Lh = _L(rh)
    Tt, Th = tilde_L(rt, ell1), tilde_L(rh, ell1)
    q = rt * rt * Tt
    return rh * Th * (1.0 + Lh * q + rh ** (-b * q) * Lh * Lh * q * q)


# ----------------------------------------------------------------------------
# abstract normalizer and bounds


def abstract_a_n(ell2: SlowlyVaryingFn | Callable, n: float, rtol: float = 1e-12) -> float:
    """Solve ``a^2 = n ell2(a)`` by bisection.

    Raises
    ------
    NotMonotone
        If ``x^2 / ell2(x)`` is not increasing on a grid above the root bracket.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    f = lambda a: a * a - n * ell2(a)  # noqa: E731
    lo = 1.0
    if f(lo) >= 0:
        return lo
    hi = max(2.0, float(n))
    while f(hi) < 0:
        hi *= 2.0
        if hi > 1e300:
            raise NotMonotone("a^2 never exceeds n ell2(a)")
    grid = np.geomspace(2.0, max(hi, 4.0), 64)
    g = grid**2 / np.array([ell2(x) for x in grid])
    if np.any(np.diff(g) <= 0):
        raise NotMonotone("x^2 / ell2(x) is not increasing on the check grid")
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def bigN_bound(n: int, N, d: int, C: float = 1.0, eps: float = 0.0, omega: float = 1.0,
               mode: str = "billiard", ell1=ONE, ell2=LOG) -> float:
    """Bound for the range ``n <= omega log|N|`` where one long flight dominates.

    ``mode="billiard"``: ``C n/a_n^d (log|N| log log|N|)^{d/2} / |N|^2``.
    ``mode="abstract"``: ``C n/a_n^d ell1(|N|)(log|N|)^{d/2+1+eps} / |N|^2`` with
    ``a_n`` from ``ell2``.  Returns infinity at N = 0.

    Raises
    ------
    RegimeViolation
        If ``n > omega * safe_log(|N|)``.
    """
    if n < 1 or d not in (1, 2):
        raise ValueError("need n >= 1 and d in {1, 2}")
    r = _norm(N)
    L = safe_log(r)
    if n > omega * L:
        raise RegimeViolation(f"n={n} exceeds omega*log|N| = {omega * L:.6g}")
    if r == 0:
        return math.inf
    if mode == "billiard":
        return C * n / a_n(n) ** d * (L * safe_log(L)) ** (d / 2) / (r * r)
    if mode == "abstract":
        return C * n / abstract_a_n(ell2, n) ** d * ell1(r) * L ** (d / 2 + 1 + eps) / (r * r)
    raise ValueError(f"unknown mode {mode!r}")


def abstract_bound(n: int, N, d: int, ell3=None, C: float = 1.0, ell2=LOG) -> float:
    """``C n/a_n^d ell3(|N|)/(1 + |N|^2)`` with ``a_n`` solving ``a^2 = n ell2(a)``.

    ``ell3`` defaults to ``ell2``, the Gibbs-Markov choice.
    """
    ell3 = ell2 if ell3 is None else ell3
    r = _norm(N)
    return C * n / abstract_a_n(ell2, n) ** d * ell3(r) / (1 + r * r)


@dataclass(frozen=True)
class Ass3Verdict:
    ok: bool
    worst_ratio: float
    worst_x: float
    trend_exponent: float
    unbounded_trend: bool
    ratios: tuple = ()


def check_ass3(ell1, ell2, x_grid: Sequence[float], log_squared: bool = False) -> Ass3Verdict:
    """Sup over the grid of ``safe_log(x)^2 tilde_ell1(x) / ell2(x)``.

    ``trend_exponent`` is the least-squares slope of log(ratio) against
    log(log x) on the upper half of the grid; a slope above 0.5 sets
    ``unbounded_trend``, since bounded ratios flatten out in that scale.
    """
    xs = np.asarray(sorted(x_grid), float)
    if len(xs) == 0 or xs[0] < 2:
        raise ValueError("grid must be nonempty and inside [2, inf)")
    ratios = np.array([safe_log(x) ** 2 * tilde_ell1(ell1, x, log_squared) / ell2(x) for x in xs])
    i = int(np.argmax(ratios))
    half = xs >= np.sqrt(xs[0] * xs[-1]) if len(xs) > 3 else np.ones(len(xs), bool)
    trend = 0.0
    if half.sum() >= 2:
        trend = float(np.polyfit(np.log(np.log(xs[half])), np.log(ratios[half]), 1)[0])
    return Ass3Verdict(bool(np.all(np.isfinite(ratios))), float(ratios[i]), float(xs[i]), trend,
                       trend > 0.5, tuple(float(r) for r in ratios))


# ----------------------------------------------------------------------------
# ratio reports


def regime_tag(n: int, N, omega: float, eps1: float = DEFAULT_EPS1) -> str:
    """``bigN`` if only n <= omega log|N| holds, ``main`` if only log|N| <= eps1 n, ``overlap`` if both.

    Pairs satisfying neither (possible when omega * eps1 < 1) are tagged ``uncovered``.
    """
    L = safe_log(_norm(N))
    big = n <= omega * L
    main = L <= eps1 * n
    if big and main:
        return "overlap"
    if big:
        return "bigN"
    if main:
        return "main"
    return "uncovered"


@dataclass
class BoundRow:
    n: int
    N: object
    count: int
    empirical: float
    stderr: float
    bound_value: float
    ratio: float
    regime: str


@dataclass
class BoundReport:
    rows: list
    bound: str
    omega: float
    eps1: float
    a_n_kind: str = "sqrt(n log n)"

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r.ratio for r in self.rows])

    @property
    def max_ratio(self) -> float:
        return float(self.ratios.max()) if self.rows else math.nan

    @property
    def median_ratio(self) -> float:
        return float(np.median(self.ratios)) if self.rows else math.nan

    def per_n(self, stat: Callable = np.median) -> dict:
        out = {}
        for n in sorted({r.n for r in self.rows}):
            out[n] = float(stat([r.ratio for r in self.rows if r.n == n]))
        return out

    def slope(self, stat: Callable = np.median) -> float:
        """Least-squares slope of log(per-n statistic of the ratio) against log n."""
        pts = self.per_n(stat)
        if len(pts) < 2:
            return 0.0
        x = np.log(list(pts))
        y = np.log(list(pts.values()))
        return float(np.polyfit(x, y, 1)[0])

    def summary(self) -> dict:
        return {"bound": self.bound, "a_n": self.a_n_kind, "pairs": len(self.rows),
                "max": self.max_ratio, "median": self.median_ratio,
                "max_over_median": self.max_ratio / self.median_ratio if self.rows else math.nan,
                "slope_median": self.slope(np.median), "slope_max": self.slope(np.max)}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "N", "count", "empirical", "stderr", "bound_value", "ratio", "regime"])
            for r in self.rows:
                w.writerow([r.n, json.dumps(r.N), r.count, repr(r.empirical), repr(r.stderr),
                            repr(r.bound_value), repr(r.ratio), r.regime])

    def to_json(self, path) -> None:
        doc = {"summary": self.summary(), "omega": self.omega, "eps1": self.eps1,
               "rows": [asdict(r) for r in self.rows]}
        Path(path).write_text(json.dumps(doc, indent=2))


def ratio_table(histograms, bound: str = "lld", omega: float | None = None, eps1: float = DEFAULT_EPS1,
                C: float = 1.0, min_count: int = DEFAULT_MIN_COUNT, max_scale: float | None = None,
                ell2=LOG, ell3=None) -> BoundReport:
    """Empirical mu(kappa_n = N) divided by the bound, over every well-populated (n, N).

    Parameters
    ----------
    bound
        ``"lld"`` uses :func:`lld_bound` with the sqrt(n log n) normalizer; ``"abstract"``
        uses :func:`abstract_bound` with ``ell2``/``ell3``.
    omega
        Regime constant; defaults to ``1/eps1`` so the two regimes cover every pair.
    max_scale
        If given, keep only ``|N| <= max_scale * a_n``.
    """
    omega = 1.0 / eps1 if omega is None else omega
    rows = []
    for h in histograms:
        d = h.dimension
        for N, cnt in sorted(h.counts.items()):
            if cnt < min_count:
                continue
            if max_scale is not None and _norm(N) > max_scale * a_n(h.n):
                continue
            p = cnt / h.total_samples
            if bound == "lld":
                b = lld_bound(h.n, N, d, C)
            elif bound == "abstract":
                b = abstract_bound(h.n, N, d, ell3, C, ell2)
            else:
                raise ValueError(f"unknown bound {bound!r}")
            key = N if d == 1 else list(N)
            rows.append(BoundRow(h.n, key, cnt, p, math.sqrt(p * (1 - p) / h.total_samples), b, p / b,
                                 regime_tag(h.n, N, omega, eps1)))
    return BoundReport(rows, bound, omega, eps1, "sqrt(n log n)" if bound == "lld" else "abstract")


def exact_ratio_table(laws: dict, d: int = 1, bound: str = "abstract", omega: float | None = None,
                      eps1: float = DEFAULT_EPS1, C: float = 1.0, min_prob: float = 1e-12,
                      max_scale: float | None = None, ell2=LOG, ell3=None) -> BoundReport:
    """As :func:`ratio_table`, for exact laws ``{n: {N: probability}}`` (e.g. from tower models).

    Pairs with probability below ``min_prob`` are skipped; ``count`` is 0 and
    ``stderr`` 0 since nothing is sampled.
    """
    omega = 1.0 / eps1 if omega is None else omega
    rows = []
    for n in sorted(laws):
        scale = abstract_a_n(ell2, n) if bound == "abstract" else a_n(n)
        for N, p in sorted(laws[n].items()):
            if p < min_prob:
                continue
            if max_scale is not None and _norm(N) > max_scale * scale:
                continue
            if bound == "lld":
                b = lld_bound(n, N, d, C)
            elif bound == "abstract":
                b = abstract_bound(n, N, d, ell3, C, ell2)
            else:
                raise ValueError(f"unknown bound {bound!r}")
            key = N if d == 1 else list(N)
            rows.append(BoundRow(n, key, 0, float(p), 0.0, b, p / b, regime_tag(n, N, omega, eps1)))
    return BoundReport(rows, bound, omega, eps1, "sqrt(n log n)" if bound == "lld" else "abstract")
