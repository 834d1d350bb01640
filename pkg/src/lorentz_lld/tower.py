"""Finite Gibbs-Markov bases, their Young towers and an exact law for kappa_n.

A base is a Markov chain on a finite alphabet with stationary measure mu_Y,
a return time sigma(a) >= 1 per symbol and integer displacements kappa(a, l)
for each level l < sigma(a).  The tower climbs one level per step and, from
the top level of column ``a``, jumps to the bottom of column ``b`` with
probability K(a, b).  I.i.d. bases (identical rows) are stored without the
dense transition matrix, so alphabets of size 10^4 stay cheap.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property, reduce
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

STOCHASTIC_TOL = 1e-12


class InvalidBase(ValueError):
    """A base violates one of its invariants; the message names it."""


class TruncationLoss(RuntimeError):
    """Probability mass left the displacement window of the exact law."""


@dataclass(frozen=True, eq=False)
class GibbsMarkovBase:
    """Finite full-branch Markov base with a return time and level displacements.

    Parameters
    ----------
    base_measure
        Stationary probability vector mu_Y.
    sigma
        Positive integer return time per symbol.
    kappa_levels
        One integer array of shape (sigma(a), d) per symbol.
    transition
        Row-stochastic matrix, or ``None`` for the i.i.d. case where every
        row equals ``base_measure``.
    q
        Period; every sigma(a) must be divisible by it.
    """

    base_measure: np.ndarray
    sigma: np.ndarray
    kappa_levels: tuple
    transition: np.ndarray | None = None
    q: int = 1
    name: str = ""

    def __post_init__(self):
        mu = np.asarray(self.base_measure, float)
        sig = np.asarray(self.sigma, np.int64)
        levels = tuple(np.atleast_2d(np.asarray(k, np.int64)).reshape(len(k), -1) for k in self.kappa_levels)
        object.__setattr__(self, "base_measure", mu)
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "kappa_levels", levels)
        if self.transition is not None:
            object.__setattr__(self, "transition", np.asarray(self.transition, float))

    @property
    def alphabet_size(self) -> int:
        return len(self.base_measure)

    @property
    def iid(self) -> bool:
        return self.transition is None

    @property
    def dimension(self) -> int:
        return self.kappa_levels[0].shape[1]

    def transition_matrix(self) -> np.ndarray:
        """Dense K(a, b); for i.i.d. bases every row is mu_Y."""
        if self.transition is None:
            return np.tile(self.base_measure, (self.alphabet_size, 1))
        return self.transition

    @cached_property
    def kappa_sigma(self) -> np.ndarray:
        """Displacement accumulated over one excursion, per symbol, shape (A, d)."""
        return np.array([k.sum(axis=0) for k in self.kappa_levels])

    @cached_property
    def psi(self) -> np.ndarray:
        """psi(a) = sum over levels of |kappa(a, l)| (Euclidean)."""
        return np.array([np.linalg.norm(k, axis=1).sum() for k in self.kappa_levels])

    def violations(self) -> list[str]:
        out = []
        A = self.alphabet_size
        mu = self.base_measure
        if A < 2:
            out.append("alphabet_size: must be >= 2")
        if mu.shape != (A,) or np.any(mu < 0) or abs(mu.sum() - 1) > STOCHASTIC_TOL:
            out.append("base_measure: must be a probability vector")
        if self.sigma.shape != (A,) or np.any(self.sigma < 1):
            out.append("sigma: must be positive integers, one per symbol")
        elif self.q < 1 or np.any(self.sigma % self.q):
            out.append(f"q: every sigma(a) must be divisible by q={self.q}")
        if len(self.kappa_levels) != A:
            out.append("kappa_levels: one entry per symbol required")
        else:
            dims = {k.shape[1] for k in self.kappa_levels}
            if len(dims) != 1 or dims.pop() not in (1, 2):
                out.append("kappa_levels: all entries must share d in {1, 2}")
            elif any(len(k) != s for k, s in zip(self.kappa_levels, self.sigma)):
                out.append("kappa_levels: entry a must have sigma(a) rows")
            elif np.any(np.abs(mu @ self.kappa_sigma) > 1e-12):
                out.append("kappa_levels: tower mean of kappa must vanish")
        if self.transition is not None:
            K = self.transition
            if K.shape != (A, A) or np.any(K < 0):
                out.append("transition: must be a nonnegative square array")
            elif np.any(np.abs(K.sum(axis=1) - 1) > STOCHASTIC_TOL):
                out.append("transition: rows must sum to 1")
            elif np.max(np.abs(mu @ K - mu)) > STOCHASTIC_TOL:
                out.append("base_measure: not stationary for transition")
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "alphabet_size": self.alphabet_size,
            "iid": self.iid,
            "transition": None if self.transition is None else self.transition.tolist(),
            "base_measure": self.base_measure.tolist(),
            "sigma": self.sigma.tolist(),
            "kappa_levels": [k.tolist() for k in self.kappa_levels],
            "q": self.q,
        }

    @staticmethod
    def from_dict(doc: dict) -> "GibbsMarkovBase":
        K = doc.get("transition")
        return GibbsMarkovBase(np.array(doc["base_measure"], float), np.array(doc["sigma"], np.int64),
                               tuple(np.array(k, np.int64) for k in doc["kappa_levels"]),
                               None if K is None else np.array(K, float), int(doc.get("q", 1)),
                               doc.get("name", ""))


def save_base(base: GibbsMarkovBase, path) -> None:
    Path(path).write_text(json.dumps(base.to_dict()))


def load_base(path) -> GibbsMarkovBase:
    return GibbsMarkovBase.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class TowerModel:
    """Tower over a base; states are (symbol, level) in lexicographic order."""

    base: GibbsMarkovBase
    sym: np.ndarray
    lev: np.ndarray
    kappa: np.ndarray
    measure: np.ndarray
    sigma_bar: float
    bottom: np.ndarray = field(repr=False)
    top: np.ndarray = field(repr=False)

    @property
    def n_states(self) -> int:
        return len(self.sym)

    @property
    def states(self) -> list[tuple[int, int]]:
        return list(zip(self.sym.tolist(), self.lev.tolist()))

    @property
    def dimension(self) -> int:
        return self.kappa.shape[1]

    @property
    def q(self) -> int:
        return self.base.q

    @property
    def psi(self) -> np.ndarray:
        return self.base.psi

    @cached_property
    def max_abs_kappa(self) -> int:
        return int(np.abs(self.kappa).max())

    @cached_property
    def _climb(self):
        # states whose successor is the next level of the same column
        src = np.flatnonzero(self.lev < self.base.sigma[self.sym] - 1)
        return src, src + 1

    def phases(self, t) -> np.ndarray:
        """e^{i t . kappa(state)} for a batch of t; shape (len(t), n_states)."""
        t = np.atleast_1d(np.asarray(t, float))
        if t.ndim == 1:
            t = t[:, None] if self.dimension == 1 else t[None, :]
        return np.exp(1j * (t @ self.kappa.T))

    def apply_P(self, V: np.ndarray, phase: np.ndarray | None = None) -> np.ndarray:
        """Transfer operator on the last axis of ``V``, optionally after multiplying by ``phase``.

        ``(P v)(a, l) = v(a, l-1)`` for ``l >= 1`` and
        ``(P v)(b, 0) = sum_a mu_Y(a) K(a, b) v(a, top) / mu_Y(b)``.
        """
        W = V * phase if phase is not None else V
        out = np.zeros(np.broadcast_shapes(W.shape), dtype=np.result_type(W, float))
        src, dst = self._climb
        out[..., dst] = W[..., src]
        tops = W[..., self.top]
        mu = self.base.base_measure
        if self.base.iid:
            out[..., self.bottom] = (tops @ mu)[..., None]
        else:
            out[..., self.bottom] = ((tops * mu) @ self.base.transition) / mu
        return out

    def apply_P_adjoint(self, V: np.ndarray, phase: np.ndarray | None = None) -> np.ndarray:
        """Transpose of ``v -> P(phase * v)`` on the last axis."""
        out = np.zeros(V.shape, dtype=np.result_type(V, float))
        src, dst = self._climb
        out[..., src] = V[..., dst]
        bots = V[..., self.bottom]
        mu = self.base.base_measure
        if self.base.iid:
            out[..., self.top] = mu * bots.sum(axis=-1, keepdims=True)
        else:
            out[..., self.top] = mu * ((bots / mu) @ self.base.transition.T)
        return out * phase if phase is not None else out

    def dense_P(self, t=None) -> np.ndarray:
        """Matrix of ``v -> P(e^{it.kappa} v)``; only sensible for small towers."""
        S = self.n_states
        eye = np.eye(S)
        P = self.apply_P(eye).T  # column j is P e_j
        if t is None:
            return P
        return P * self.phases(t)[0][None, :]

    def kernel(self) -> np.ndarray:
        """Forward Markov kernel of the tower map (row-stochastic)."""
        S = self.n_states
        Kd = np.zeros((S, S))
        src, dst = self._climb
        Kd[src, dst] = 1.0
        Kb = self.base.transition_matrix()
        Kd[np.ix_(self.top, self.bottom)] = Kb
        return Kd

    def to_dict(self) -> dict:
        return self.base.to_dict()


def build_tower(base: GibbsMarkovBase) -> TowerModel:
    """Enumerate tower states and the tower measure (mu_Y x counting) / sigma_bar.

    Raises
    ------
    InvalidBase
        Listing every violated base invariant.
    """
    bad = base.violations()
    if bad:
        raise InvalidBase("; ".join(bad))
    sig = base.sigma
    sym = np.repeat(np.arange(base.alphabet_size), sig)
    starts = np.concatenate([[0], np.cumsum(sig)[:-1]])
    lev = np.arange(len(sym)) - np.repeat(starts, sig)
    kappa = np.concatenate(base.kappa_levels, axis=0)
    sigma_bar = float(base.base_measure @ sig)
    measure = base.base_measure[sym] / sigma_bar
    return TowerModel(base, sym, lev, kappa, measure, sigma_bar, starts, starts + sig - 1)


# ----------------------------------------------------------------------------
# shipped models


def _split(m: int, s: int) -> list[int]:
    """Split |m| into s integer parts as evenly as possible, larger parts first, keeping the sign."""
    q, r = divmod(abs(m), s)
    parts = [q + 1] * r + [q] * (s - r)
    sign = 1 if m >= 0 else -1
    return [sign * p for p in parts]


def make_heavy_tailed_model(m_max: int, tail_exponent: float = 3.0,
                            sigma_profile: int | Callable[[int], int] | None = None) -> GibbsMarkovBase:
    """Symmetric i.i.d. base with mu_Y(kappa_sigma = +-m) = c / (2 m^tail_exponent).

    With the default exponent 3 the one-step tail decays like m^-2.
    ``sigma_profile`` gives sigma for the pair of symbols carrying +-m: ``None``
    means sigma = 1, an int is a constant return time, a callable maps m to
    sigma.  The displacement m is spread over the levels as evenly as possible.
    The period q is the gcd of the return times.
    """
    if m_max < 2:
        raise ValueError("m_max must be >= 2")
    m = np.arange(1, m_max + 1)
    w = m.astype(float) ** (-tail_exponent)
    c = 1.0 / w.sum()
    mu = np.repeat(c * w / 2.0, 2)  # symbols ordered a_1^+, a_1^-, a_2^+, ...
    if sigma_profile is None:
        sig_m = np.ones(m_max, np.int64)
    elif callable(sigma_profile):
        sig_m = np.array([int(sigma_profile(int(k))) for k in m], np.int64)
    else:
        sig_m = np.full(m_max, int(sigma_profile), np.int64)
    sigma = np.repeat(sig_m, 2)
    levels = []
    for k, s in zip(m, sig_m):
        for sign in (1, -1):
            levels.append(np.array(_split(sign * int(k), int(s)), np.int64).reshape(-1, 1))
    q = int(reduce(math.gcd, sigma.tolist()))
    return GibbsMarkovBase(mu, sigma, tuple(levels), None, q, f"heavy-tailed(m_max={m_max})")


def heavy_tailed_normalization(m_max: int, tail_exponent: float = 3.0) -> float:
    m = np.arange(1, m_max + 1, dtype=float)
    return float(1.0 / np.sum(m ** (-tail_exponent)))


def make_bernoulli_model() -> GibbsMarkovBase:
    """Fair +-1 steps: the trivial one-level tower."""
    return GibbsMarkovBase(np.array([0.5, 0.5]), np.array([1, 1]),
                           (np.array([[1]]), np.array([[-1]])), None, 1, "bernoulli")


def make_period_two_model() -> GibbsMarkovBase:
    """Period-2 tower: two symbols with sigma = 2 and +-1 on each level.

    At t = 0 the transfer operator has eigenvalues 1 and -1.
    """
    return GibbsMarkovBase(np.array([0.5, 0.5]), np.array([2, 2]),
                           (np.array([[1], [1]]), np.array([[-1], [-1]])), None, 2, "period-two")


def make_random_chain(n_pairs: int, max_sigma: int = 8, max_kappa: int = 3, seed: int = 0,
                      d: int = 1) -> GibbsMarkovBase:
    """Random mirror-symmetric base with ``2 * n_pairs`` symbols.

    Symbol ``2i`` and its mirror ``2i + 1`` share the return time and carry
    opposite displacements; the transition depends on the target pair only
    through a random positive matrix, and the mirror bit is a fair coin.  The
    model is therefore symmetric under kappa -> -kappa with zero mean.
    """
    if not (1 <= n_pairs <= 10):
        raise ValueError("n_pairs must lie in [1, 10] (alphabet <= 20)")
    rng = np.random.default_rng(seed)
    M = rng.uniform(0.1, 1.0, (n_pairs, n_pairs))
    M /= M.sum(axis=1, keepdims=True)
    K = np.kron(M, np.full((2, 2), 0.5))
    evals, evecs = np.linalg.eig(M.T)
    pm = np.real(evecs[:, np.argmin(np.abs(evals - 1))])
    pm = np.abs(pm) / np.abs(pm).sum()
    pi = np.repeat(pm / 2.0, 2)
    sig_p = rng.integers(1, max_sigma + 1, n_pairs)
    levels = []
    for s in sig_p:
        k = rng.integers(-max_kappa, max_kappa + 1, (int(s), d))
        levels += [k, -k]
    sigma = np.repeat(sig_p, 2)
    q = int(reduce(math.gcd, sigma.tolist()))
    return GibbsMarkovBase(pi, sigma, tuple(levels), K, q, f"random-chain(pairs={n_pairs}, seed={seed})")


def shipped_models() -> dict[str, GibbsMarkovBase]:
    """Models used by the default checks."""
    return {
        "bernoulli": make_bernoulli_model(),
        "heavy-2": make_heavy_tailed_model(2),
        "heavy-64": make_heavy_tailed_model(64),
        "heavy-64-spread": make_heavy_tailed_model(64, sigma_profile=lambda m: 1 + int(math.log2(m))),
        "period-two": make_period_two_model(),
        "random-chain": make_random_chain(6, seed=7),
    }


# ----------------------------------------------------------------------------
# exact law of kappa_n


def _shift_rows(dist: np.ndarray, kappa: np.ndarray, B: int):
    """Shift each state's displacement distribution by its kappa; returns (shifted, lost mass)."""
    S = dist.shape[0]
    W = 2 * B + 1
    idx = np.arange(W)
    if dist.ndim == 2:
        src = idx[None, :] - kappa[:, :1]
        ok = (src >= 0) & (src < W)
        out = np.where(ok, np.take_along_axis(dist, np.clip(src, 0, W - 1), axis=1), 0.0)
        dest = idx[None, :] + kappa[:, :1]
        lost = dist[(dest < 0) | (dest >= W)].sum()
    else:
        sx = idx[None, :] - kappa[:, 0:1]
        sy = idx[None, :] - kappa[:, 1:2]
        okx = (sx >= 0) & (sx < W)
        oky = (sy >= 0) & (sy < W)
        gx = np.clip(sx, 0, W - 1)
        gy = np.clip(sy, 0, W - 1)
        out = dist[np.arange(S)[:, None, None], gx[:, :, None], gy[:, None, :]]
        out = out * (okx[:, :, None] & oky[:, None, :])
        dx = idx[None, :] + kappa[:, 0:1]
        dy = idx[None, :] + kappa[:, 1:2]
        badx = (dx < 0) | (dx >= W)
        bady = (dy < 0) | (dy >= W)
        lost = dist[badx[:, :, None] | bady[:, None, :]].sum()
    return out, float(lost)


def initial_joint(tower: TowerModel, support_bound: int) -> np.ndarray:
    """Joint law of (state, kappa_0) under mu_Delta: all mass at displacement 0."""
    W = 2 * support_bound + 1
    shape = (tower.n_states, W) if tower.dimension == 1 else (tower.n_states, W, W)
    joint = np.zeros(shape)
    if tower.dimension == 1:
        joint[:, support_bound] = tower.measure
    else:
        joint[:, support_bound, support_bound] = tower.measure
    return joint


def propagate(tower: TowerModel, joint: np.ndarray, steps: int, support_bound: int):
    """Advance the joint law of (state, displacement) by ``steps`` tower steps.

    Returns the new joint law and the mass that left the window.
    """
    src, dst = tower._climb
    mu = tower.base.base_measure
    lost = 0.0
    for _ in range(steps):
        shifted, l = _shift_rows(joint, tower.kappa, support_bound)
        lost += l
        nxt = np.zeros_like(shifted)
        nxt[dst] = shifted[src]
        tops = shifted[tower.top]
        if tower.base.iid:
            nxt[tower.bottom] = mu.reshape((-1,) + (1,) * (tops.ndim - 1)) * tops.sum(axis=0)[None]
        else:
            K = tower.base.transition
            nxt[tower.bottom] = np.tensordot(K.T, tops, axes=1)
        joint = nxt
    return joint, lost


def exact_displacement_law(tower: TowerModel, n: int, support_bound: int | None = None,
                           as_array: bool = False):
    """P(kappa_n = N) under mu_Delta by dynamic programming over (state, displacement).

    Parameters
    ----------
    support_bound
        Half-width of the displacement window (per axis); defaults to
        ``n * max|kappa|`` which can never be exceeded.
    as_array
        Return the dense array indexed by ``N + support_bound`` instead of a dict.

    Raises
    ------
    TruncationLoss
        If any mass leaves the window.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    B = n * tower.max_abs_kappa if support_bound is None else int(support_bound)
    joint, lost = propagate(tower, initial_joint(tower, B), n, B)
    if lost > 0:
        raise TruncationLoss(f"{lost:.3g} of the mass left |N| <= {B}")
    law = joint.sum(axis=0)
    if as_array:
        return law
    out = {}
    if tower.dimension == 1:
        for i in np.flatnonzero(law > 0):
            out[int(i) - B] = float(law[i])
    else:
        for i, j in zip(*np.nonzero(law > 0)):
            out[(int(i) - B, int(j) - B)] = float(law[i, j])
    return out


# ----------------------------------------------------------------------------
# psi tails


@dataclass
class PsiTail:
    m: np.ndarray
    tail: np.ndarray
    inverse_square: np.ndarray
    envelope: np.ndarray
    sup_m2_tail: float
    envelope_ratio: float


def psi_tail_curve(base: GibbsMarkovBase, m_values: Sequence[int] | None = None, ell1=None) -> PsiTail:
    """Exact m -> mu_Y(psi > m) with the m^-2 and m^-2 (log m)^2 ell1(m / log m) overlays.

    ``envelope_ratio`` is the sup over the curve of tail / envelope.
    """
    from .bounds import safe_log

    psi = base.psi
    if m_values is None:
        m_values = np.unique(np.geomspace(1, max(2.0, psi.max()), 200).astype(int))
    m = np.asarray(m_values, float)
    order = np.argsort(psi)
    ps = psi[order]
    cum = np.concatenate([[0.0], np.cumsum(base.base_measure[order])])
    below = np.searchsorted(ps, m, side="right")
    tail = np.clip(1.0 - cum[below], 0.0, 1.0)
    inv2 = m ** -2.0
    lm = np.array([safe_log(x) for x in m])
    l1 = np.ones_like(m) if ell1 is None else np.array([ell1(x / l) for x, l in zip(m, lm)])
    env = inv2 * lm**2 * l1
    return PsiTail(m.astype(int), tail, inv2, env, float(np.max(m**2 * tail)), float(np.max(tail / env)))
