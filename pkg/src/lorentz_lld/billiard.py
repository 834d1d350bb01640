"""Collision map of the periodic Lorentz gas and the free-flight displacement.

Points of the collision space M = boundary x (-pi/2, pi/2) are stored as
:class:`PhasePoint`; ``phi`` is the angle from the outward normal to the
outgoing velocity.  Displacements are measured in cover cells.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels as K
from .geometry import LatticeConfig, cell_of, validate_config

DEFAULT_MAX_CELLS = 10**8
DEFAULT_STEP_LAW_TOL = 1e-7
# |kappa| for S_n and M_n: Euclidean norm of the cover-axis projection.
STEP_NORM = "euclidean"


class BilliardError(Exception):
    pass


class Grazing(BilliardError):
    pass


class FlightOverflow(BilliardError):
    pass


class InvalidPoint(BilliardError):
    pass


class BudgetExceeded(BilliardError):
    pass


@dataclass(frozen=True)
class PhasePoint:
    disk_index: int
    boundary_angle: float
    phi: float
    cell: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class FlightResult:
    next: PhasePoint
    kappa: object  # int when d == 1, (int, int) when d == 2
    flight_length: float


@dataclass(frozen=True)
class _Tables:
    tx: np.ndarray
    ty: np.ndarray
    tr: np.ndarray
    tdisk: np.ndarray
    tox: np.ndarray
    toy: np.ndarray
    centers: np.ndarray
    radii: np.ndarray
    cumw: np.ndarray


@lru_cache(maxsize=64)
def _tables_cached(key) -> _Tables:
    centers = np.array([c for c, _ in key], float).reshape(-1, 2)
    radii = np.array([r for _, r in key], float)
    rows = []
    for j, (c, r) in enumerate(zip(centers, radii)):
        for ox in (-1, 0, 1):
            for oy in (-1, 0, 1):
                cx, cy = c[0] + ox, c[1] + oy
                # distance from the translate's centre to the unit square
                qx = min(max(cx, 0.0), 1.0)
                qy = min(max(cy, 0.0), 1.0)
                if math.hypot(cx - qx, cy - qy) < r:
                    rows.append((cx, cy, r, j, ox, oy))
    arr = np.array(rows, dtype=float)
    cumw = np.cumsum(radii) / radii.sum()
    cumw[-1] = 1.0
    return _Tables(
        tx=arr[:, 0].copy(), ty=arr[:, 1].copy(), tr=arr[:, 2].copy(),
        tdisk=arr[:, 3].astype(np.int64), tox=arr[:, 4].astype(np.int64),
        toy=arr[:, 5].astype(np.int64), centers=centers, radii=radii, cumw=cumw,
    )


def kernel_tables(config: LatticeConfig) -> _Tables:
    key = tuple((s.center, s.radius) for s in config.scatterers)
    return _tables_cached(key)


def _project(kx: int, ky: int, d: int):
    return int(kx) if d == 1 else (int(kx), int(ky))


def _check_point(config: LatticeConfig, x: PhasePoint):
    if not (0 <= x.disk_index < len(config.scatterers)):
        raise InvalidPoint(f"disk_index {x.disk_index} out of range")
    if not (-math.pi / 2 < x.phi < math.pi / 2):
        raise InvalidPoint(f"phi {x.phi} outside (-pi/2, pi/2)")
    if not math.isfinite(x.boundary_angle):
        raise InvalidPoint("boundary_angle not finite")


def _to_state(config: LatticeConfig, x: PhasePoint):
    s = config.scatterers[x.disk_index]
    px = s.center[0] + s.radius * math.cos(x.boundary_angle)
    py = s.center[1] + s.radius * math.sin(x.boundary_angle)
    ex = x.cell[0] - math.floor(px)
    ey = x.cell[1] - math.floor(py)
    ang = x.boundary_angle + x.phi
    return px, py, ex, ey, math.cos(ang), math.sin(ang)


def cover_position(config: LatticeConfig, x: PhasePoint) -> tuple[float, float]:
    """Location of ``x`` on the planar cover."""
    px, py, ex, ey, _, _ = _to_state(config, x)
    return ex + px, ey + py


def _from_state(config: LatticeConfig, j, px, py, ex, ey, vx, vy) -> PhasePoint:
    s = config.scatterers[j]
    ux = (px - s.center[0]) / s.radius
    uy = (py - s.center[1]) / s.radius
    theta = math.atan2(uy, ux) % (2 * math.pi)
    phi = math.atan2(ux * vy - uy * vx, ux * vx + uy * vy)
    return PhasePoint(int(j), theta, phi, (int(ex + math.floor(px)), int(ey + math.floor(py))))


def next_collision(config: LatticeConfig, x: PhasePoint, max_cells: int = DEFAULT_MAX_CELLS) -> FlightResult:
    """Apply the collision map once and report the cell displacement."""
    _check_point(config, x)
    t = kernel_tables(config)
    px, py, ex, ey, vx, vy = _to_state(config, x)
    st, nj, fx, fy, npx, npy, nvx, nvy, length = K.advance(
        x.disk_index, px, py, vx, vy, t.tx, t.ty, t.tr, t.tdisk, t.tox, t.toy,
        t.centers, t.radii, max_cells)
    if st == K.GRAZING:
        raise Grazing(f"tangential hit from {x}")
    if st == K.OVERFLOW:
        raise FlightOverflow(f"no collision within {max_cells} cells from {x}")
    nxt = _from_state(config, nj, npx, npy, ex + fx, ey + fy, nvx, nvy)
    kx = nxt.cell[0] - x.cell[0]
    ky = nxt.cell[1] - x.cell[1]
    return FlightResult(nxt, _project(kx, ky, config.dimension), float(length))


def reverse_point(x: PhasePoint) -> PhasePoint:
    """Time reversal: reflect the velocity about the normal."""
    return PhasePoint(x.disk_index, x.boundary_angle, -x.phi, x.cell)


@dataclass(frozen=True)
class OrbitSummary:
    kappa: object
    sum_norm: float
    max_norm: float
    final: PhasePoint


def orbit_displacement(config: LatticeConfig, x: PhasePoint, n: int, max_cells: int = DEFAULT_MAX_CELLS) -> OrbitSummary:
    """kappa_n together with S_n (sum of step norms) and M_n (largest step norm)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    d = config.dimension
    kx = ky = 0
    total = 0.0
    biggest = 0.0
    cur = x
    for step in range(n):
        try:
            res = next_collision(config, cur, max_cells)
        except BilliardError as exc:
            raise type(exc)(f"step {step}: {exc}") from exc
        k = res.kappa
        dx, dy = (k, 0) if d == 1 else k
        kx += dx
        ky += dy
        a = abs(dx) if d == 1 else math.hypot(dx, dy)
        total += a
        biggest = max(biggest, a)
        cur = res.next
    return OrbitSummary(_project(kx, ky, d), total, biggest, cur)


TRAJECTORY_COLUMNS = ["step", "disk_index", "boundary_angle", "phi", "cell_x", "cell_y",
                      "kappa_x", "kappa_y", "flight_length"]


def dump_trajectory(config: LatticeConfig, x: PhasePoint, n: int, path) -> None:
    """Write ``n`` collisions of the orbit of ``x`` as CSV rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        cur = x
        for step in range(n):
            res = next_collision(config, cur)
            nxt = res.next
            kx = nxt.cell[0] - cur.cell[0]
            ky = nxt.cell[1] - cur.cell[1]
            w.writerow([step + 1, nxt.disk_index, repr(nxt.boundary_angle), repr(nxt.phi),
                        nxt.cell[0], nxt.cell[1], kx, ky, repr(res.flight_length)])
            cur = nxt


# ----------------------------------------------------------------------------
# exact one-step law


@dataclass
class StepLaw:
    masses: dict
    errors: dict
    unresolved: float
    error_bound: float
    reach: int

    def __getitem__(self, key):
        return self.masses[key]


def _candidates(config: LatticeConfig, j: int, reach: int):
    """Disk translates that can be the first hit of a flight ending within ``reach`` cells.

    The search radius is large enough that any flight landing inside the
    target box is certainly resolved; flights whose first candidate hit lies
    outside the box go to the unresolved slot, so every integrand component
    is continuous in the boundary angle.
    """
    t = kernel_tables(config)
    rmax = float(t.radii.max())
    radius = math.sqrt(2.0) * (reach + 2.5) + 1.0 + rmax
    span = int(math.ceil(radius)) + 2
    gx, gy = np.meshgrid(np.arange(-span, span + 1), np.arange(-span, span + 1), indexing="ij")
    shifts = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(float)
    cand = (shifts[:, None, :] + t.centers[None, :, :]).reshape(-1, 2)
    cand_r = np.tile(t.radii, len(shifts))
    own_idx = np.where((shifts[:, 0] == 0) & (shifts[:, 1] == 0))[0][0] * len(t.radii) + j
    keep = np.ones(len(cand), bool)
    keep[own_idx] = False
    return np.ascontiguousarray(cand[keep, 0]), np.ascontiguousarray(cand[keep, 1]), cand_r[keep].copy(), radius


def boundary_masses(config: LatticeConfig, j: int, theta: float, reach: int) -> np.ndarray:
    """Landing-cell masses (cos(phi)/2 weight) for one boundary point of disk ``j``.

    Returns a (2*reach+1, 2*reach+1) grid indexed by displacement + reach and
    the unresolved mass.  Integrating over theta and dividing by 2*pi gives
    the one-step law conditioned on starting from disk ``j``.
    """
    t = kernel_tables(config)
    cx, cy, cr, radius = _candidates(config, j, reach)
    out = np.empty((2 * reach + 1) ** 2 + 1)
    K.boundary_integrand(float(theta), t.centers[j, 0], t.centers[j, 1], t.radii[j],
                         cx, cy, cr, radius, reach, out)
    return out[:-1].reshape(2 * reach + 1, 2 * reach + 1), float(out[-1])


def exact_step_law(config: LatticeConfig, targets, tol: float = DEFAULT_STEP_LAW_TOL, reach: int | None = None,
                   max_evals: int = 2_000_000) -> StepLaw:
    """mu(kappa_1 = N) for each N in ``targets`` by quadrature over the boundary.

    For a fixed boundary point the set of outgoing directions landing in each
    cell is a union of angular sectors found by an exact visibility sweep, and
    its cos(phi)/2 mass is integrated in closed form.  The remaining integral
    over the boundary angle is adaptive Gauss-Kronrod, refined until the
    summed error estimate is below ``tol``.  Flights that travel further than
    ``reach`` cells are counted as unresolved mass.  For d = 1 the returned
    masses only include flights resolved within ``reach``; their error bound
    therefore includes the unresolved mass.

    Raises
    ------
    BudgetExceeded
        If more than ``max_evals`` integrand evaluations would be needed.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not validate_config(config):
        raise ValueError("invalid configuration")
    d = config.dimension
    targets = list(targets)
    norms = [abs(N) if d == 1 else max(abs(N[0]), abs(N[1])) for N in targets]
    if reach is None:
        reach = int(max(norms, default=1)) + 1
    t = kernel_tables(config)
    weights = t.radii / t.radii.sum()
    total = np.zeros((2 * reach + 1) ** 2 + 1)
    err_total = 0.0
    used = 0
    for j, wj in enumerate(weights):
        cx, cy, cr, radius = _candidates(config, j, reach)
        # the angular integral is divided by 2*pi; scale the tolerance to match
        local_tol = tol * 2 * math.pi / (wj * len(weights))
        val, err, evals, ok = K.integrate_boundary(
            t.centers[j, 0], t.centers[j, 1], t.radii[j], cx, cy, cr, radius, reach,
            0.0, 2 * math.pi, local_tol, max_evals - used)
        used += evals
        if not ok:
            raise BudgetExceeded(f"step-law quadrature needs more than {max_evals} evaluations for tol={tol}")
        total += wj * val / (2 * math.pi)
        err_total += wj * err / (2 * math.pi)
    width = reach
    grid = total[:-1].reshape(2 * width + 1, 2 * width + 1)
    unresolved = float(total[-1])
    masses, errors = {}, {}
    for N in targets:
        if d == 1:
            ix = N + width
            val = float(grid[ix, :].sum()) if 0 <= ix < grid.shape[0] else 0.0
            masses[N] = val
            errors[N] = err_total + unresolved
        else:
            ix, iy = N[0] + width, N[1] + width
            inside = 0 <= ix < grid.shape[0] and 0 <= iy < grid.shape[1]
            masses[tuple(N)] = float(grid[ix, iy]) if inside else 0.0
            errors[tuple(N)] = err_total
    return StepLaw(masses, errors, unresolved, err_total, reach)


def step_law_grid(config: LatticeConfig, reach: int, tol: float = DEFAULT_STEP_LAW_TOL):
    """Full resolved d = 2 law on the square |N|_inf <= reach, plus unresolved mass."""
    targets = [(a, b) for a in range(-reach, reach + 1) for b in range(-reach, reach + 1)]
    return exact_step_law(config.with_dimension(2), targets, tol=tol, reach=reach)
