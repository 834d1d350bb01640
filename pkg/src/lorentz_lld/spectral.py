"""Perturbed transfer operators, renewal operators and Fourier inversion on towers.

Conventions
-----------
``P_t v = P(e^{i t.kappa} v)`` where ``P`` is the transfer operator of the
tower map for mu_Delta, so ``P 1 = 1`` and
``E[e^{i t.kappa_n}] = <mu_Delta, P_t^n 1>``.  Operator norms are induced by
the sup norm (maximum absolute row sum).

The renewal decomposition is written with all sums starting at n = 0:
``A_0`` embeds a base function at level 0, ``B_0`` restricts to level 0,
``E_0`` restricts to levels >= 1 and ``T_0 = I``.  With these conventions
``P_hat = A_hat T_hat B_hat + E_hat`` holds exactly, where
``P_hat(z, t) = sum_n z^n P_t^n`` and ``T_hat = (I - R_hat)^{-1}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, interpolate, linalg
from scipy.sparse.linalg import LinearOperator, eigs

from .bounds import DomainError, a_n as sqrt_nlogn, modulus_Mb, safe_log
from .tower import TowerModel

DELTA = 0.3
DENSE_MAX = 300
COLLISION_TOL = 1e-8


class EigenvalueCollision(RuntimeError):
    """Two tracked eigenvalue branches came too close to tell apart."""


class NoConvergence(RuntimeError):
    """Newton iteration for g_k(t) failed to converge."""


class NotPositiveDefinite(ValueError):
    """A fitted covariance-type matrix is not positive definite."""


class AliasError(ValueError):
    """Fourier grid too coarse for the support of kappa_n."""


class QuadratureBudget(RuntimeError):
    """Quadrature could not reach its tolerance within the node budget."""


def opnorm(M: np.ndarray) -> float:
    """Operator norm induced by the sup norm: largest absolute row sum."""
    M = np.atleast_2d(M)
    return float(np.abs(M).sum(axis=1).max())


def _tvec(tower: TowerModel, t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, float))
    if t.shape != (tower.dimension,):
        raise ValueError(f"t must have {tower.dimension} components")
    return t


# ----------------------------------------------------------------------------
# operators


def assemble_P_t(tower: TowerModel, t) -> np.ndarray:
    """Dense matrix of ``v -> P(e^{i t.kappa} v)`` over tower states."""
    return tower.dense_P(_tvec(tower, t))


def P_t_operator(tower: TowerModel, t) -> LinearOperator:
    """Matrix-free ``P_t`` for towers too large for dense algebra."""
    ph = tower.phases(_tvec(tower, t))[0]
    S = tower.n_states
    return LinearOperator((S, S), matvec=lambda v: tower.apply_P(np.ravel(v), ph),
                          rmatvec=lambda v: tower.apply_P_adjoint(np.ravel(v), ph), dtype=complex)


def partial_P_t(tower: TowerModel, t, j: int = 0) -> np.ndarray:
    """Derivative of ``P_t`` in ``t_j``: ``P(i kappa_j e^{i t.kappa} v)``."""
    return assemble_P_t(tower, t) * (1j * tower.kappa[:, j])[None, :]


def _prefix_phase(tower: TowerModel, t) -> np.ndarray:
    """e^{i t.kappa_l(y, 0)}: phase accumulated from level 0 up to (not including) each state."""
    t = _tvec(tower, t)
    kt = tower.kappa @ t
    out = np.empty(tower.n_states)
    for b, top in zip(tower.bottom, tower.top):
        seg = kt[b:top + 1]
        out[b:top + 1] = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    return out


@dataclass
class RenewalOperators:
    R: np.ndarray  # base -> base
    A: np.ndarray  # base -> tower
    B: np.ndarray  # tower -> base
    E: np.ndarray  # tower -> tower
    z: complex
    t: np.ndarray


def renewal_R(tower: TowerModel, z: complex, t) -> np.ndarray:
    """``R_hat(z, t) v = R(e^{i t.kappa_sigma} z^sigma v)`` on base functions."""
    base = tower.base
    t = _tvec(tower, t)
    mu = base.base_measure
    K = base.transition_matrix()
    w = mu * z ** base.sigma * np.exp(1j * (base.kappa_sigma @ t))
    return (K * w[:, None]).T / mu[:, None]


def renewal_dR_dz(tower: TowerModel, z: complex, t) -> np.ndarray:
    base = tower.base
    t = _tvec(tower, t)
    mu = base.base_measure
    K = base.transition_matrix()
    w = mu * base.sigma * z ** (base.sigma - 1) * np.exp(1j * (base.kappa_sigma @ t))
    return (K * w[:, None]).T / mu[:, None]


def assemble_renewal_operators(tower: TowerModel, z: complex, t) -> RenewalOperators:
    """Dense R_hat, A_hat, B_hat, E_hat at (z, t); the sums are finite since sigma is bounded."""
    base = tower.base
    t = _tvec(tower, t)
    A_sz, S = base.alphabet_size, tower.n_states
    mu = base.base_measure
    K = base.transition_matrix()
    kt = tower.kappa @ t
    pre = _prefix_phase(tower, t)
    sig = base.sigma
    R = renewal_R(tower, z, t)
    # A_hat: level l of column y carries z^l e^{i t.kappa_l(y, 0)} v(y)
    Ah = np.zeros((S, A_sz), complex)
    Ah[np.arange(S), tower.sym] = z ** tower.lev * np.exp(1j * pre)
    # B_hat: B_0 restricts to level 0; a state at level l >= 1 returns after n = sigma - l steps
    Bh = np.zeros((A_sz, S), complex)
    Bh[np.arange(A_sz), tower.bottom] = 1.0
    ksig = base.kappa_sigma @ t
    upper = np.flatnonzero(tower.lev >= 1)
    a = tower.sym[upper]
    n_ret = sig[a] - tower.lev[upper]
    phase_rest = ksig[a] - pre[upper]  # kappa over levels l .. sigma-1
    coef = z ** n_ret * np.exp(1j * phase_rest) * mu[a]
    Bh[:, upper] += (K[a, :] * coef[:, None]).T / mu[:, None]
    # E_hat: stay inside a column above level 0, from level l' >= 1 up to level l
    Eh = np.zeros((S, S), complex)
    for b, top in zip(tower.bottom, tower.top):
        for lp in range(b + 1, top + 1):
            for l in range(lp, top + 1):
                Eh[l, lp] = z ** (l - lp) * np.exp(1j * (pre[l] - pre[lp]))
    del kt
    return RenewalOperators(R, Ah, Bh, Eh, complex(z), t)


# ----------------------------------------------------------------------------
# eigen data


@dataclass
class SpectralDecomposition:
    """Leading eigen data of P_t at one t.

    ``projections[k] = right[:, k] left[:, k]^T`` with ``left^T right = I`` on
    the tracked block (only materialized for dense towers).
    """

    q: int
    t: np.ndarray
    lambdas: np.ndarray
    right: np.ndarray
    left: np.ndarray
    remainder_rate: float = math.nan
    Sigma_fit: np.ndarray | None = None

    @property
    def projections(self) -> list[np.ndarray]:
        return [np.outer(self.right[:, k], self.left[:, k]) for k in range(self.q)]


def _normalize_pair(r: np.ndarray, l: np.ndarray):
    r = r / r[np.argmax(np.abs(r))]
    l = l / (l @ r)
    return r, l


def _left_for(M: np.ndarray, lam: complex) -> np.ndarray:
    w, V = np.linalg.eig(M.T)
    return V[:, np.argmin(np.abs(w - lam))]


def _select(w: np.ndarray, q: int, targets, ref_vecs, V) -> list[int]:
    """Indices of q eigenvalues: largest modulus, or best matches to previous branches."""
    if targets is None:
        return list(np.argsort(-np.abs(w))[:q])
    chosen = []
    for k, lam0 in enumerate(targets):
        if ref_vecs is not None:
            ref = ref_vecs[:, k]
            overlap = np.abs(V.conj().T @ ref) / (np.linalg.norm(V, axis=0) * np.linalg.norm(ref))
            score = overlap - 1e-3 * np.abs(w - lam0)
        else:
            score = -np.abs(w - lam0)
        order = np.argsort(-score)
        idx = next(i for i in order if i not in chosen)
        chosen.append(int(idx))
    return chosen


def leading_spectrum(P: np.ndarray, q_hint: int = 1, previous: SpectralDecomposition | None = None,
                     t=None, remainder_steps: int = 50) -> SpectralDecomposition:
    """Leading q eigenvalues of a dense operator with eigenvectors and remainder rate.

    Without ``previous`` the q eigenvalues of largest modulus are taken (at
    t = 0 these are the q-th roots of unity).  With ``previous`` each branch
    is matched to the eigenvector with the largest overlap.

    Raises
    ------
    EigenvalueCollision
        If two tracked eigenvalues are within 1e-8 of each other.
    """
    w, V = np.linalg.eig(P)
    targets = None if previous is None else previous.lambdas
    refs = None if previous is None else previous.right
    idx = _select(w, q_hint, targets, refs, V)
    lam = w[idx]
    for i in range(len(lam)):
        for j in range(i + 1, len(lam)):
            if abs(lam[i] - lam[j]) < COLLISION_TOL:
                raise EigenvalueCollision(f"branches {i} and {j} meet at {lam[i]:.6g}")
    W, U = np.linalg.eig(P.T)
    right = np.empty((P.shape[0], q_hint), complex)
    left = np.empty((P.shape[0], q_hint), complex)
    for k, i in enumerate(idx):
        r = V[:, i]
        l = U[:, np.argmin(np.abs(W - w[i]))]
        right[:, k], left[:, k] = _normalize_pair(r, l)
    dec = SpectralDecomposition(q_hint, np.atleast_1d(t) if t is not None else np.zeros(1), lam, right, left)
    dec.remainder_rate = remainder_rate(P, dec, remainder_steps)
    return dec


def remainder_rate(P: np.ndarray, dec: SpectralDecomposition, steps: int = 50) -> float:
    """gamma fitted from ||P^n - sum_k lambda_k^n Pi_k|| over n = 1..steps (0 if the remainder vanishes)."""
    Pi = sum(dec.projections)
    Q = P - P @ Pi
    norms = []
    M = np.eye(P.shape[0])
    for _ in range(steps):
        M = M @ Q
        norms.append(opnorm(M))
    norms = np.array(norms)
    floor = 1e-12
    good = norms > floor
    if good.sum() < 2:
        return 0.0
    n = np.arange(1, steps + 1)[good]
    slope = np.polyfit(n, np.log(norms[good]), 1)[0]
    return float(min(1.0, math.exp(slope)))


def eigentriple(tower: TowerModel, t, near: complex, right_only: bool = False):
    """Eigenvalue of P_t closest to ``near`` with right and left eigenvectors (left^T right = 1)."""
    t = _tvec(tower, t)
    if tower.n_states <= DENSE_MAX:
        P = assemble_P_t(tower, t)
        if right_only:
            w, V = np.linalg.eig(P)
            i = int(np.argmin(np.abs(w - near)))
            return w[i], V[:, i], None
        w, U, V = linalg.eig(P, left=True, right=True)
        i = int(np.argmin(np.abs(w - near)))
        r, l = _normalize_pair(V[:, i], U[:, i].conj())
        return w[i], r, l
    op = P_t_operator(tower, t)
    k = min(tower.q + 1, tower.n_states - 2)
    v0 = np.ones(tower.n_states, complex)
    w, V = eigs(op, k=k, which="LM", v0=v0, tol=0)
    i = int(np.argmin(np.abs(w - near)))
    lam, r = w[i], V[:, i]
    if right_only:
        return lam, r, None
    opT = LinearOperator(op.shape, matvec=lambda v: op.rmatvec(v), dtype=complex)
    w2, U = eigs(opT, k=k, which="LM", v0=v0, tol=0)
    l = U[:, int(np.argmin(np.abs(w2 - lam)))]
    r, l = _normalize_pair(r, l)
    return lam, r, l


def unperturbed_lambdas(tower: TowerModel) -> np.ndarray:
    """lambda_k = e^{2 pi i k / q}, the peripheral eigenvalues at t = 0."""
    q = tower.q
    return np.exp(2j * np.pi * np.arange(q) / q)


def track_lambda(tower: TowerModel, t_grid, k: int = 0) -> np.ndarray:
    """lambda_{k,t} along a path of t values starting near 0, by continuation."""
    ts = [np.atleast_1d(np.asarray(t, float)) for t in t_grid]
    prev = unperturbed_lambdas(tower)[k]
    out = []
    for t in ts:
        lam, _, _ = eigentriple(tower, t, prev, right_only=True)
        out.append(lam)
        prev = lam
    return np.array(out)


# ----------------------------------------------------------------------------
# renewal route to the eigenvalues


def tau_triple(tower: TowerModel, z: complex, t, near: complex = 1.0):
    """Eigenvalue of R_hat(z, t) closest to ``near`` with its z-derivative and spectral projection."""
    base = tower.base
    t = _tvec(tower, t)
    if base.iid:
        # rank one: R_hat v = 1 * <w, v>, so the only nonzero eigenvalue is sum(w)
        w = base.base_measure * z ** base.sigma * np.exp(1j * (base.kappa_sigma @ t))
        dw = base.base_measure * base.sigma * z ** (base.sigma - 1.0) * np.exp(1j * (base.kappa_sigma @ t))
        tau = complex(w.sum())
        return tau, complex(dw.sum()), (np.ones(base.alphabet_size), w / tau)
    R = renewal_R(tower, z, t)
    wv, V = np.linalg.eig(R)
    i = int(np.argmin(np.abs(wv - near)))
    r = V[:, i]
    l = _left_for(R, wv[i])
    r, l = _normalize_pair(r, l)
    dtau = complex(l @ renewal_dR_dz(tower, z, t) @ r)
    return complex(wv[i]), dtau, (r, l)


@dataclass
class RenewalFactorization:
    k: int
    t: np.ndarray
    g: complex
    tau_prime: complex
    pi_right: np.ndarray
    pi_left: np.ndarray
    residual_H: tuple
    mu0_slope: complex
    mu0_expected: complex
    iterations: int

    @property
    def pi_tilde(self) -> np.ndarray:
        """Residue projection ``pi(g) / tau'(g)`` as a dense matrix."""
        return np.outer(self.pi_right, self.pi_left)


def _rank_two_norm(a, x, b, y) -> float:
    """Sup-induced norm of ``a x^T - b y^T`` without forming it when a and b are constant."""
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return float(np.abs(a[0] * x - b[0] * y).sum())
    return opnorm(np.outer(a, x) - np.outer(b, y))


def solve_gk(tower: TowerModel, k: int, t, seed: complex | None = None, tol: float = 1e-15,
             max_iter: int = 100) -> RenewalFactorization:
    """Solve tau_k(z, t) = 1 for z by Newton's method, starting at conj(lambda_k).

    Also reports the local slope (tau_k(z, 0) - 1) / (z - conj(lambda_k)) at
    z = conj(lambda_k) + 1e-6, which should approach lambda_k * sigma_bar, and
    the size of the holomorphic remainder
    ``(1 - tau)^{-1} pi(z) - (g - z)^{-1} pi_tilde`` at distances 1e-2, 1e-3, 1e-4 from g.

    Raises
    ------
    NoConvergence
        After ``max_iter`` iterations.
    """
    t = _tvec(tower, t)
    lam_k = unperturbed_lambdas(tower)[k]
    z = np.conj(lam_k) if seed is None else complex(seed)
    it = 0
    for it in range(1, max_iter + 1):
        tau, dtau, _ = tau_triple(tower, z, t)
        step = (tau - 1.0) / dtau
        z = z - step
        if abs(step) <= tol * max(1.0, abs(z)):
            break
    else:
        raise NoConvergence(f"g_{k}({t}) did not converge in {max_iter} iterations")
    tau, dtau, (r, l) = tau_triple(tower, z, t)
    pl = l / dtau
    resid = []
    for rho in (1e-2, 1e-3, 1e-4):
        zz = z + rho
        tz, _, (rz, lz) = tau_triple(tower, zz, t)
        resid.append(_rank_two_norm(rz, lz / (1.0 - tz), r, pl / (z - zz)))
    zeta0 = np.conj(lam_k)
    eps = 1e-6
    t0 = np.zeros_like(t)
    tz0, _, _ = tau_triple(tower, zeta0 + eps, t0)
    slope = (tz0 - 1.0) / eps
    return RenewalFactorization(k, t, complex(z), dtau, r, pl, tuple(resid), complex(slope),
                                complex(lam_k * tower.sigma_bar), it)


@dataclass
class LambdaGReport:
    max_discrepancy: float
    per_branch: dict
    min_abs_g: float


def verify_lambda_g(tower: TowerModel, t_grid, branches: Sequence[int] | None = None) -> LambdaGReport:
    """sup over the grid of |lambda_{k,t} - 1/g_k(t)|, both routes computed independently.

    The grid is traversed outward from 0 in both directions so that the
    eigenvalue branches and Newton seeds are continued smoothly.
    """
    branches = range(tower.q) if branches is None else branches
    ts = np.array(sorted(float(np.atleast_1d(t)[0]) for t in t_grid)) if tower.dimension == 1 else None
    if ts is None:
        raise NotImplementedError("verify_lambda_g is implemented for d = 1 towers")
    if np.any(np.abs(ts) >= DELTA + 1e-12):
        raise DomainError(f"t grid must lie in B_{DELTA}(0)")
    per = {}
    min_g = math.inf
    for k in branches:
        worst = 0.0
        for side in (ts[ts >= 0], ts[ts < 0][::-1]):
            prev_lam = unperturbed_lambdas(tower)[k]
            prev_g = np.conj(prev_lam)
            for t in side:
                lam, _, _ = eigentriple(tower, [t], prev_lam, right_only=True)
                fac = solve_gk(tower, k, [t], seed=prev_g)
                worst = max(worst, abs(lam - 1.0 / fac.g))
                min_g = min(min_g, abs(fac.g))
                prev_lam, prev_g = lam, fac.g
        per[k] = worst
    return LambdaGReport(max(per.values()), per, min_g)


def check_tau_branches(tower: TowerModel, t_grid) -> float:
    """max over t of |tau_k(conj(lambda_k), t) - tau_0(1, t)| across branches.

    On a finite tower with q dividing every sigma(a), conj(lambda_k)^sigma(a) = 1,
    so all branches see the same operator and the difference vanishes.
    """
    worst = 0.0
    lams = unperturbed_lambdas(tower)
    for t in t_grid:
        t0, _, _ = tau_triple(tower, 1.0, t)
        for k in range(1, tower.q):
            tk, _, _ = tau_triple(tower, np.conj(lams[k]), t)
            worst = max(worst, abs(tk - t0))
    return worst


# ----------------------------------------------------------------------------
# renewal identities


@dataclass
class RenewalResiduals:
    inverse: float  # ||T_hat - (I - R_hat)^{-1}||
    decomposition: float  # ||P_hat - (A_hat T_hat B_hat + E_hat)||
    worst_point: tuple
    bound: float  # |z|^{N+1} / (1 - |z|), the geometric tail allowance


def verify_renewal_identity(tower: TowerModel, z_grid, t_grid, N_max: int = 200) -> RenewalResiduals:
    """Residuals of the renewal equation and decomposition with power series truncated at N_max."""
    inv_res = dec_res = 0.0
    worst = None
    bound = 0.0
    for t in t_grid:
        P = assemble_P_t(tower, t)
        S = tower.n_states
        pows = [np.eye(S, dtype=complex)]
        for _ in range(N_max):
            pows.append(pows[-1] @ P)
        bot = tower.bottom
        for z in z_grid:
            if abs(z) >= 1 - 1e-3:
                raise DomainError("|z| must be at most 1 - 1e-3")
            zn = z ** np.arange(N_max + 1)
            Phat = np.tensordot(zn, np.array(pows), axes=1)
            That = Phat[np.ix_(bot, bot)]
            ops = assemble_renewal_operators(tower, z, t)
            A_sz = tower.base.alphabet_size
            exact = np.linalg.inv(np.eye(A_sz) - ops.R)
            r1 = opnorm(That - exact)
            r2 = opnorm(Phat - (ops.A @ That @ ops.B + ops.E))
            bound = max(bound, abs(z) ** (N_max + 1) / (1 - abs(z)))
            if max(r1, r2) >= max(inv_res, dec_res):
                worst = (complex(z), np.atleast_1d(t).tolist())
            inv_res = max(inv_res, r1)
            dec_res = max(dec_res, r2)
    return RenewalResiduals(inv_res, dec_res, worst, bound)


# ----------------------------------------------------------------------------
# key lemmas


def dlambda(tower: TowerModel, t, near: complex, j: int = 0):
    """(lambda_t, d lambda / d t_j) from the eigenvector pairing ``l^T (dP) r / l^T r``."""
    t = _tvec(tower, t)
    lam, r, l = eigentriple(tower, t, near)
    ph = tower.phases(t)[0]
    dr = tower.apply_P(r * 1j * tower.kappa[:, j], ph)
    return lam, complex(l @ dr)


@dataclass
class KeyLemmaReport:
    b_values: tuple
    mb_sup: dict
    mb_median: dict
    mb_ratios: dict
    expansion_ratios: np.ndarray
    expansion_max_over_min: float
    grad_rel_error: float
    dlambda_at_zero: float
    t_grid: np.ndarray
    h_grid: np.ndarray


def check_key_lemmas(tower: TowerModel, t_grid, h_grid, b_values=(0.5, 1.0, 2.0), k: int = 0,
                     fd_step: float = 1e-6) -> KeyLemmaReport:
    """Ratio tables for the eigenvalue modulus and expansion estimates (d = 1).

    ``|d lambda(t+h) - d lambda(t)| / M_b(t, h)`` over the (t, h) grid, and
    ``|lambda_k - lambda_{k,t}| / (|t|^2 L(t))`` over t; derivatives use the
    eigenvector pairing and are cross-checked by central differences.
    """
    if tower.dimension != 1:
        raise NotImplementedError("check_key_lemmas is implemented for d = 1 towers")
    lam0 = unperturbed_lambdas(tower)[k]
    t_grid = np.asarray(t_grid, float)
    h_grid = np.asarray(h_grid, float)
    pts = np.unique(np.concatenate([t_grid, (t_grid[:, None] + h_grid[None, :]).ravel()]))
    cache = {}
    prev = lam0
    for x in pts:
        cache[x] = dlambda(tower, [x], prev)
        prev = cache[x][0]
    grad_err = 0.0
    for x in t_grid:
        lp, _, _ = eigentriple(tower, [x + fd_step], cache[x][0], right_only=True)
        lm, _, _ = eigentriple(tower, [x - fd_step], cache[x][0], right_only=True)
        fd = (lp - lm) / (2 * fd_step)
        an = cache[x][1]
        grad_err = max(grad_err, abs(fd - an) / max(abs(an), 1e-300))
    _, d0 = dlambda(tower, [0.0], lam0)
    mb_ratios, mb_sup, mb_med = {}, {}, {}
    for b in b_values:
        rat = np.empty((len(t_grid), len(h_grid)))
        for i, x in enumerate(t_grid):
            for jh, h in enumerate(h_grid):
                num = abs(cache[x + h][1] - cache[x][1])
                rat[i, jh] = num / modulus_Mb([x], [h], b)
        mb_ratios[b] = rat
        mb_sup[b] = float(rat.max())
        mb_med[b] = float(np.median(rat))
    expansion = np.array([abs(lam0 - cache[x][0]) / (x * x * math.log(1 / abs(x))) for x in t_grid])
    return KeyLemmaReport(tuple(b_values), mb_sup, mb_med, mb_ratios, expansion, float(expansion.max() / expansion.min()),
                          grad_err, abs(d0), t_grid, h_grid)


# ----------------------------------------------------------------------------
# Sigma


@dataclass
class SigmaFit:
    Sigma: np.ndarray
    residual: float
    standard_errors: np.ndarray | None = None


def _check_pd(S: np.ndarray):
    if not np.all(np.isfinite(S)) or np.linalg.eigvalsh((S + S.T) / 2).min() <= 0:
        raise NotPositiveDefinite(f"fitted Sigma {S.tolist()} is not positive definite")


def fit_Sigma(tower: TowerModel, t_grid, k: int = 0) -> SigmaFit:
    """Least-squares fit of 1 - Re lambda_{0,t} = (Sigma t . t) L(t) over a small-t grid.

    ``residual`` is the largest relative deviation of a single point from the fit.

    Raises
    ------
    NotPositiveDefinite
        If the fitted matrix is not positive definite.
    """
    d = tower.dimension
    ts = [np.atleast_1d(np.asarray(t, float)) for t in t_grid]
    order = np.argsort([np.linalg.norm(t) for t in ts])
    ts = [ts[i] for i in order]
    lams = track_lambda(tower, ts, k)
    y = 1.0 - np.real(lams)
    rows = []
    for t in ts:
        L = math.log(1.0 / np.linalg.norm(t))
        if d == 1:
            rows.append([t[0] ** 2 * L])
        else:
            rows.append([t[0] ** 2 * L, 2 * t[0] * t[1] * L, t[1] ** 2 * L])
    X = np.array(rows)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    Sigma = np.array([[coef[0]]]) if d == 1 else np.array([[coef[0], coef[1]], [coef[1], coef[2]]])
    _check_pd(Sigma)
    fitted = X @ coef
    return SigmaFit(Sigma, float(np.max(np.abs(y - fitted) / np.abs(fitted))))


def fit_Sigma_from_histogram(hist) -> SigmaFit:
    """Covariance of kappa_n / a_n from a displacement histogram, with standard errors."""
    keys = hist.support
    cnt = np.array([hist.counts[k] for k in keys], float)
    X = np.array(keys, float).reshape(len(keys), -1) / sqrt_nlogn(hist.n)
    tot = cnt.sum()
    mean = (cnt[:, None] * X).sum(0) / tot
    C = ((cnt[:, None, None] * (X - mean)[:, :, None] * (X - mean)[:, None, :]).sum(0)) / tot
    fourth = (cnt[:, None, None] * ((X - mean)[:, :, None] * (X - mean)[:, None, :]) ** 2).sum(0) / tot
    se = np.sqrt(np.maximum(fourth - C**2, 0.0) / tot)
    _check_pd(C)
    return SigmaFit(C, 0.0, se)


# ----------------------------------------------------------------------------
# smoothing kernel and the smoothed point mass


def _bspline4(u: np.ndarray) -> np.ndarray:
    """Cardinal cubic B-spline on [0, 4] (integral 1)."""
    u = np.asarray(u, float)
    out = np.zeros_like(u)
    m = (u >= 0) & (u < 1)
    out[m] = u[m] ** 3 / 6
    m = (u >= 1) & (u < 2)
    out[m] = (-3 * u[m] ** 3 + 12 * u[m] ** 2 - 12 * u[m] + 4) / 6
    m = (u >= 2) & (u < 3)
    out[m] = (3 * u[m] ** 3 - 24 * u[m] ** 2 + 60 * u[m] - 44) / 6
    m = (u >= 3) & (u <= 4)
    out[m] = (4 - u[m]) ** 3 / 6
    return out


@dataclass(frozen=True)
class SmoothingKernel:
    """Product of per-axis cubic B-splines, even, C^2, nonnegative with integral 1.

    Each axis factor is the density of a sum of four uniforms on
    ``[-a/2, a/2]``, with ``a = delta / (4 sqrt(d))``, so the support is the
    cube of half-width ``delta / (2 sqrt(d))`` inside the ball of radius
    ``delta``.  Its Fourier coefficients are products of ``sinc(m a / 2)^4``
    and therefore nonnegative.
    """

    delta: float
    d: int = 1

    @property
    def width(self) -> float:
        return self.delta / (4.0 * math.sqrt(self.d))

    @property
    def half_support(self) -> float:
        return 2.0 * self.width

    def axis(self, x) -> np.ndarray:
        a = self.width
        return _bspline4(np.asarray(x, float) / a + 2.0) / a

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        if self.d == 1:
            return self.axis(t)
        return np.prod(self.axis(t), axis=-1)

    def fourier(self, m) -> np.ndarray:
        """``r_check(m) = int e^{i t.m} r(t) dt``."""
        m = np.asarray(m, float)
        x = m * self.width / 2.0
        s = np.sinc(x / np.pi) ** 4
        return s if self.d == 1 else np.prod(s, axis=-1)

    def knots(self) -> np.ndarray:
        a = self.width
        return np.array([-2 * a, -a, 0.0, a, 2 * a])


def smoothing_kernel(delta: float, d: int = 1) -> SmoothingKernel:
    if delta <= 0 or d not in (1, 2):
        raise ValueError("need delta > 0 and d in {1, 2}")
    return SmoothingKernel(float(delta), d)


def _gauss_nodes(kernel: SmoothingKernel, m: int):
    """Tensor Gauss-Legendre nodes on the spline pieces, weights times r(t)."""
    x, w = np.polynomial.legendre.leggauss(m)
    kn = kernel.knots()
    nodes, weights = [], []
    for lo, hi in zip(kn[:-1], kn[1:]):
        nodes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
        weights.append(0.5 * (hi - lo) * w)
    t1 = np.concatenate(nodes)
    w1 = np.concatenate(weights) * kernel.axis(t1)
    if kernel.d == 1:
        return t1[:, None], w1
    T = np.stack(np.meshgrid(t1, t1, indexing="ij"), axis=-1).reshape(-1, 2)
    W = np.outer(w1, w1).ravel()
    return T, W


def characteristic_function(tower: TowerModel, n: int, t_nodes: np.ndarray) -> np.ndarray:
    """E[e^{i t.kappa_n}] = <mu_Delta, P_t^n 1> for a batch of t, shape (len(t),)."""
    t_nodes = np.asarray(t_nodes, float).reshape(-1, tower.dimension)
    ph = np.exp(1j * (t_nodes @ tower.kappa.T))
    V = np.ones((len(t_nodes), tower.n_states), complex)
    for _ in range(n):
        V = tower.apply_P(V, ph)
    return V @ tower.measure


def _nodes_for(kernel: SmoothingKernel, freq: float) -> int:
    # enough Gauss points per spline piece to resolve the oscillation e^{i t freq}
    return int(min(4000, max(24, math.ceil(0.75 * freq * kernel.width) + 24)))


def smoothed_law(tower: TowerModel, n: int, N_set, kernel: SmoothingKernel, m: int | None = None) -> dict:
    """``int e^{-i t.N} r(t) E[e^{i t.kappa_n}] dt`` for every N in ``N_set``.

    Each value is an upper bound for P(kappa_n = N).  The characteristic
    function is evaluated once on tensor Gauss-Legendre nodes placed on the
    spline pieces, with enough nodes per piece to resolve the highest
    frequency involved.
    """
    d = tower.dimension
    keys = list(N_set)
    Ns = np.array(keys, float).reshape(len(keys), d)
    freq = float(np.abs(Ns).max(initial=0.0) + n * tower.max_abs_kappa)
    m = _nodes_for(kernel, freq) if m is None else m
    T, W = _gauss_nodes(kernel, m)
    wphi = W * characteristic_function(tower, n, T)
    vals = np.real(np.exp(-1j * (Ns @ T.T)) @ wphi)
    return {k: float(v) for k, v in zip(keys, vals)}


def smoothed_probability(tower: TowerModel, n: int, N, kernel: SmoothingKernel, m: int | None = None) -> float:
    """Single-N version of :func:`smoothed_law`."""
    key = int(N) if np.ndim(N) == 0 else tuple(int(x) for x in N)
    return smoothed_law(tower, n, [key], kernel, m)[key]


@dataclass
class AnNResult:
    matrix: np.ndarray
    norm: float
    norm_ratio: float
    decay_ratio: float
    regime: str
    nodes: int
    error_estimate: float


def compute_A_nN(tower: TowerModel, n: int, N, kernel: SmoothingKernel, tol: float = 1e-8,
                 max_nodes: int = 2048, normalizer=sqrt_nlogn, omega: float = 10.0, eps1: float = 0.1) -> AnNResult:
    """Matrix quadrature of ``int e^{-i t.N} r(t) P_t^n dt`` with node doubling to ``tol``.

    Raises
    ------
    QuadratureBudget
        If doubling the Gauss nodes per piece beyond ``max_nodes`` is needed.
    """
    from .bounds import regime_tag

    if n < 1:
        raise ValueError("n must be >= 1")
    Nv = np.atleast_1d(np.asarray(N, float))
    d = tower.dimension

    def quad(m):
        T, W = _gauss_nodes(kernel, m)
        acc = np.zeros((tower.n_states, tower.n_states), complex)
        for t, w in zip(T, W):
            acc += w * np.exp(-1j * (t @ Nv)) * np.linalg.matrix_power(assemble_P_t(tower, t), n)
        return acc

    # |lambda_t|^n concentrates the integrand near t = 0, so start coarse and refine
    m = 16
    cur = quad(m)
    while True:
        if 2 * m > max_nodes:
            raise QuadratureBudget(f"A_(n,N) did not reach tol={tol} with {m} nodes per piece")
        nxt = quad(2 * m)
        err = float(np.abs(nxt - cur).max())
        m *= 2
        cur = nxt
        if err <= tol:
            break
    nrm = opnorm(cur)
    an = normalizer(n) ** d
    r = float(np.linalg.norm(Nv))
    decay = nrm * r * r * an / (n * safe_log(r)) if r > 0 else math.nan
    key = int(Nv[0]) if d == 1 else tuple(int(x) for x in Nv)
    return AnNResult(cur, nrm, nrm * an, decay, regime_tag(n, key, omega, eps1), m, err)


# ----------------------------------------------------------------------------
# Fourier inversion


def fourier_inversion_law(tower: TowerModel, n: int, N_set=None, grid: int | None = None) -> dict:
    """P(kappa_n = N) by the trapezoidal rule on the torus [-pi, pi]^d.

    With ``K >= 2 S + 1`` points per axis, where ``S = n max|kappa|``, the
    rule is exact up to rounding because the characteristic function is a
    trigonometric polynomial of degree at most ``S``.

    Raises
    ------
    AliasError
        If ``grid`` is smaller than ``2 S + 1``.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    S = n * tower.max_abs_kappa
    need = 2 * S + 1
    K = need if grid is None else int(grid)
    if K < need:
        raise AliasError(f"grid {K} < 2*{S}+1 aliases the support of kappa_{n}")
    d = tower.dimension
    t1 = 2 * np.pi * np.arange(K) / K
    if d == 1:
        T = t1[:, None]
    else:
        T = np.stack(np.meshgrid(t1, t1, indexing="ij"), axis=-1).reshape(-1, 2)
    phi = characteristic_function(tower, n, T)
    if d == 1:
        law = np.real(np.fft.fft(phi)) / K
    else:
        law = np.real(np.fft.fft2(phi.reshape(K, K))) / (K * K)
    if N_set is None:
        rng = range(-S, S + 1)
        N_set = list(rng) if d == 1 else [(a, b) for a in rng for b in rng]
    out = {}
    for N in N_set:
        if d == 1:
            out[N] = float(law[N % K]) if abs(N) <= S else 0.0
        else:
            inside = abs(N[0]) <= S and abs(N[1]) <= S
            out[tuple(N)] = float(law[N[0] % K, N[1] % K]) if inside else 0.0
    return out


# ----------------------------------------------------------------------------
# integrated eigenvalue powers


@dataclass
class CorIntCurve:
    n_grid: np.ndarray
    integrals: np.ndarray
    ratios: np.ndarray
    beta: float
    r_exp: float

    @property
    def max_over_median(self) -> float:
        return float(self.ratios.max() / np.median(self.ratios))


def _log_abs_lambda_spline(tower: TowerModel, t_max: float, k: int, points: int):
    ts = np.geomspace(1e-7, t_max, points)
    lams = track_lambda(tower, [[t] for t in ts], k)
    y = np.log(np.abs(lams))
    # log|lambda| ~ -c t^2 L(t): interpolate y / t^2 against log t, which is gentle
    return interpolate.CubicSpline(np.log(ts), y / ts**2), ts[0]


def quadrature_cor_int(tower: TowerModel, beta: float, r_exp: float, n_grid, delta: float = DELTA,
                       k: int = 0, normalizer=sqrt_nlogn, points: int = 120) -> CorIntCurve:
    """ratio(n) = int_{|t| < 2 delta} |t|^beta L(t)^r |lambda_{k,t}|^n dt * a_n^(1+beta) / (log n)^r.

    |lambda_{k,t}| is computed by the eigen solver on a log-spaced grid and
    interpolated; since |lambda_{-t}| = |lambda_t| the integral is twice the
    integral over (0, 2 delta).  Implemented for d = 1.

    Raises
    ------
    QuadratureBudget
        If the adaptive quadrature cannot certify a relative error of 1e-6.
    """
    if tower.dimension != 1:
        raise NotImplementedError("quadrature_cor_int is implemented for d = 1 towers")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    top = 2 * delta
    if top >= 1:
        raise DomainError("2 delta must be < 1 so that L(t) > 0")
    spl, t_lo = _log_abs_lambda_spline(tower, top, k, points)
    ns = np.asarray(list(n_grid), float)
    ints, rats = [], []
    for n in ns:
        def f(t):
            if t <= 0:
                return 0.0
            ly = float(spl(math.log(max(t, t_lo)))) * t * t
            return t**beta * math.log(1 / t) ** r_exp * math.exp(n * ly)
        an = normalizer(int(n))
        brk = [x / an for x in (0.5, 1, 2, 4, 8, 16) if x / an < top]
        val, err = integrate.quad(f, 0.0, top, points=brk, limit=400, epsabs=0.0, epsrel=1e-9)
        if not err <= 1e-6 * abs(val):
            raise QuadratureBudget(f"cor-int quadrature at n={int(n)} reached only {err:.3g}")
        val *= 2
        ints.append(val)
        rats.append(val * an ** (1 + beta) / safe_log(n) ** r_exp)
    return CorIntCurve(ns, np.array(ints), np.array(rats), beta, r_exp)
