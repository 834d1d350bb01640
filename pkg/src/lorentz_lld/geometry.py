"""Periodic disk scatterers on the unit torus.

A configuration lists the disks of one fundamental cell; the billiard table is
the torus minus their union, and the Lorentz gas lives on the Z^d cover.
``d = 1`` unfolds only the x axis (tubular cover), ``d = 2`` both axes.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

SEPARATION_TOL = 1e-9
DEFAULT_DIRECTION_CUTOFF = 4


@dataclass(frozen=True)
class DiskScatterer:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "radius", float(self.radius))


@dataclass(frozen=True)
class LatticeConfig:
    scatterers: tuple[DiskScatterer, ...]
    dimension: int = 2

    def __post_init__(self):
        object.__setattr__(self, "scatterers", tuple(self.scatterers))

    @property
    def cover_axes(self) -> tuple[str, ...]:
        return ("x",) if self.dimension == 1 else ("x", "y")

    @property
    def perimeter(self) -> float:
        """Total boundary length of the scatterers in one cell."""
        return sum(2.0 * math.pi * s.radius for s in self.scatterers)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        centers = np.array([s.center for s in self.scatterers], dtype=float).reshape(-1, 2)
        radii = np.array([s.radius for s in self.scatterers], dtype=float)
        return centers, radii

    def to_dict(self) -> dict:
        return {
            "lattice": {"d": self.dimension},
            "disk": [{"center": list(s.center), "radius": s.radius} for s in self.scatterers],
        }

    def digest(self) -> str:
        """Stable short hash used to tag histograms and run records."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_dimension(self, d: int) -> "LatticeConfig":
        return LatticeConfig(self.scatterers, dimension=d)


def single_disk(radius: float = 0.25, d: int = 2) -> LatticeConfig:
    """One disk at the cell centre, the standard infinite-horizon example."""
    return LatticeConfig((DiskScatterer((0.5, 0.5), radius),), dimension=d)


def config_from_dict(doc: dict) -> LatticeConfig:
    lattice = doc.get("lattice", {})
    d = int(lattice.get("d", 2))
    disks = [DiskScatterer(tuple(item["center"]), item["radius"]) for item in doc.get("disk", [])]
    return LatticeConfig(tuple(disks), dimension=d)


def load_config(path: str | Path) -> LatticeConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def loads_config(text: str) -> LatticeConfig:
    return config_from_dict(tomllib.loads(text))


# ----------------------------------------------------------------------------
# validation


@dataclass
class ValidationResult:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_config(config: LatticeConfig) -> ValidationResult:
    """Check dimension, radii and pairwise disjointness under periodic translation.

    Each violation string starts with the offending field path, e.g.
    ``disk[0].radius``, so callers can surface it unchanged.
    """
    out = ValidationResult()
    if config.dimension not in (1, 2):
        out.violations.append(f"lattice.d: must be 1 or 2, got {config.dimension}")
    if not config.scatterers:
        out.violations.append("disk: at least one scatterer is required")
    for i, s in enumerate(config.scatterers):
        if not (0.0 < s.radius < 0.5):
            out.violations.append(f"disk[{i}].radius: must lie in (0, 0.5), got {s.radius}")
        if not all(math.isfinite(c) for c in s.center):
            out.violations.append(f"disk[{i}].center: not finite")
        elif not all(0.0 <= c < 1.0 for c in s.center):
            out.violations.append(f"disk[{i}].center: must lie in [0, 1)^2, got {s.center}")
    shifts = [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)]
    n = len(config.scatterers)
    for i in range(n):
        for j in range(i, n):
            si, sj = config.scatterers[i], config.scatterers[j]
            for a, b in shifts:
                if i == j and (a, b) == (0, 0):
                    continue
                dx = sj.center[0] + a - si.center[0]
                dy = sj.center[1] + b - si.center[1]
                gap = math.hypot(dx, dy) - (si.radius + sj.radius)
                if gap <= SEPARATION_TOL:
                    out.violations.append(
                        f"disk[{i}]/disk[{j}]: overlap under shift ({a},{b}), "
                        f"centre distance {math.hypot(dx, dy):.6g} <= radii sum {si.radius + sj.radius:.6g}"
                    )
                    break
    return out


# ----------------------------------------------------------------------------
# corridors


@dataclass(frozen=True)
class Corridor:
    direction: tuple[int, int]
    width: float
    offset: float  # lower edge of the free strip, measured along the unit normal (-q, p)/|v|


def primitive_directions(max_norm: int) -> list[tuple[int, int]]:
    """Primitive integer directions with max(|p|, |q|) <= max_norm, first nonzero entry positive."""
    dirs = []
    for p in range(0, max_norm + 1):
        for q in range(-max_norm, max_norm + 1):
            if p == 0 and q <= 0:
                continue
            if math.gcd(p, abs(q)) != 1:
                continue
            dirs.append((p, q))
    return dirs


def _free_gaps(offsets: np.ndarray, radii: np.ndarray, period: float) -> list[tuple[float, float]]:
    """Uncovered arcs (start, length) of a circle of length ``period`` after removing [o - r, o + r]."""
    if np.any(2 * radii >= period):
        return []
    lo = np.mod(offsets - radii, period)
    hi = lo + 2 * radii
    # unroll: copies shifted down by one period catch arcs wrapping past the seam
    lo = np.concatenate([lo, lo - period])
    hi = np.concatenate([hi, hi - period])
    order = np.argsort(lo)
    gaps = []
    reach = 0.0
    for a, b in zip(lo[order], hi[order]):
        if a > reach:
            gaps.append([reach, min(a, period)])
        reach = max(reach, b)
        if reach >= period:
            break
    if reach < period:
        gaps.append([reach, period])
    gaps = [g for g in gaps if g[1] > g[0]]
    # merge the arc that straddles the seam
    if len(gaps) > 1 and gaps[0][0] == 0.0 and gaps[-1][1] == period:
        first = gaps.pop(0)
        gaps[-1][1] = period + first[1]
    return [(g[0] % period, g[1] - g[0]) for g in gaps]


def detect_corridors(config: LatticeConfig, max_direction_norm: int = DEFAULT_DIRECTION_CUTOFF) -> list[Corridor]:
    """All scatterer-free infinite strips with direction norm at most ``max_direction_norm``.

    For a primitive direction v = (p, q) the lattice translates of a disk centre
    project onto the normal axis at spacing 1/|v|, so the free strips are the
    gaps left on a circle of that length by the projected disks.
    """
    if max_direction_norm < 1:
        raise ValueError("max_direction_norm must be >= 1")
    centers, radii = config.arrays()
    found = []
    for p, q in primitive_directions(max_direction_norm):
        norm = math.hypot(p, q)
        normal = np.array([-q, p]) / norm
        spacing = 1.0 / norm
        offsets = centers @ normal
        for start, width in _free_gaps(offsets, radii, spacing):
            found.append(Corridor((p, q), float(width), float(start)))
    return found


@dataclass(frozen=True)
class HorizonVerdict:
    horizon: str  # "finite" or "infinite"
    cutoff: int
    corridors: tuple[Corridor, ...]

    @property
    def infinite(self) -> bool:
        return self.horizon == "infinite"


def classify_horizon(config: LatticeConfig, max_direction_norm: int = DEFAULT_DIRECTION_CUTOFF) -> HorizonVerdict:
    """Infinite iff some corridor exists among directions up to the cutoff.

    A "finite" verdict only means no corridor was found below the cutoff.
    """
    corridors = tuple(detect_corridors(config, max_direction_norm))
    return HorizonVerdict("infinite" if corridors else "finite", max_direction_norm, corridors)


def cell_of(point: Sequence[float], d: int = 2):
    """Cover cell containing ``point``: componentwise floor, x only when d = 1."""
    cx = math.floor(point[0])
    if d == 1:
        return cx
    return (cx, math.floor(point[1]))


def _translates_near_segments(config: LatticeConfig, origins: np.ndarray, ends: np.ndarray):
    lo = np.floor(np.minimum(origins, ends).min(axis=0)) - 1
    hi = np.floor(np.maximum(origins, ends).max(axis=0)) + 1
    gx, gy = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1))
    shifts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    centers, radii = config.arrays()
    pts = (shifts[:, None, :] + centers[None, :, :]).reshape(-1, 2)
    rad = np.tile(radii, len(shifts))
    return pts, rad


def segments_hit_scatterer(config: LatticeConfig, origins, direction, length: float, tol: float = SEPARATION_TOL) -> np.ndarray:
    """Brute force: which segments origin + s*direction, 0 <= s <= length, enter a disk?

    Every disk translate in the bounding box is tested against every segment,
    so this is only meant for checking other routines on short segments.
    """
    origins = np.atleast_2d(np.asarray(origins, float))
    direction = np.asarray(direction, float)
    direction = direction / np.linalg.norm(direction)
    ends = origins + length * direction
    pts, rad = _translates_near_segments(config, origins, ends)
    rel = pts[None, :, :] - origins[:, None, :]
    s = np.clip(rel @ direction, 0.0, length)
    perp = rel - s[..., None] * direction
    dist = np.linalg.norm(perp, axis=-1)
    return np.any(dist < rad[None, :] - tol, axis=1)


def corridor_rays_clear(config: LatticeConfig, corridor: Corridor, n_rays: int = 1000, length: float = 20.0) -> bool:
    """Cast rays strictly inside the corridor strip and confirm none meets a scatterer."""
    p, q = corridor.direction
    v = np.array([p, q], float) / math.hypot(p, q)
    normal = np.array([-v[1], v[0]])
    margin = 1e-7
    fracs = (np.arange(n_rays) + 0.5) / n_rays
    offs = corridor.offset + margin + fracs * (corridor.width - 2 * margin)
    starts = offs[:, None] * normal[None, :]
    hit = np.zeros(n_rays, bool)
    for lo in range(0, n_rays, 100):
        hit[lo:lo + 100] = segments_hit_scatterer(config, starts[lo:lo + 100], v, length)
    return not hit.any()
