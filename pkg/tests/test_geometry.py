import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lorentz_lld.geometry import (
    DiskScatterer,
    LatticeConfig,
    cell_of,
    classify_horizon,
    corridor_rays_clear,
    detect_corridors,
    loads_config,
    primitive_directions,
    single_disk,
    validate_config,
)


def test_single_disk_is_valid():
    assert validate_config(single_disk(0.25)).ok


def test_overlapping_pair_is_reported():
    cfg = LatticeConfig((DiskScatterer((0.25, 0.25), 0.3), DiskScatterer((0.5, 0.5), 0.3)))
    res = validate_config(cfg)
    assert not res.ok
    assert any(v.startswith("disk[0]/disk[1]") for v in res.violations)


def test_radius_too_large_names_field():
    res = validate_config(single_disk(0.6))
    assert any(v.startswith("disk[0].radius") for v in res.violations)


def test_toml_roundtrip():
    text = """
[lattice]
d = 1

[[disk]]
center = [0.5, 0.5]
radius = 0.25
"""
    cfg = loads_config(text)
    assert cfg.dimension == 1
    assert cfg.cover_axes == ("x",)
    assert cfg.scatterers[0].radius == 0.25
    assert cfg.digest() == single_disk(0.25, d=1).digest()


def _widths(cfg, norm):
    return {c.direction: c.width for c in detect_corridors(cfg, norm)}


def test_axis_corridors_single_disk():
    w = _widths(single_disk(0.25), 1)
    assert w[(1, 0)] == pytest.approx(0.5, abs=1e-12)
    assert w[(0, 1)] == pytest.approx(0.5, abs=1e-12)


def test_diagonal_corridor_single_disk():
    w = _widths(single_disk(0.25), 2)
    assert w[(1, 1)] == pytest.approx(1 / math.sqrt(2) - 0.5, abs=1e-12)


def test_fat_disk_keeps_only_axis_corridors():
    w = _widths(single_disk(0.49), 2)
    assert set(w) == {(1, 0), (0, 1)}
    assert w[(1, 0)] == pytest.approx(0.02, abs=1e-12)


def test_corridor_rays_are_clear():
    cfg = single_disk(0.25)
    for c in detect_corridors(cfg, 2):
        assert corridor_rays_clear(cfg, c, n_rays=200)


def test_blocking_disk_leaves_vertical_corridor():
    cfg = LatticeConfig((DiskScatterer((0.5, 0.5), 0.25), DiskScatterer((0.0, 0.5), 0.2)))
    assert validate_config(cfg).ok
    verdict = classify_horizon(cfg, 3)
    assert verdict.infinite
    assert (0, 1) in {c.direction for c in verdict.corridors}
    for c in verdict.corridors:
        assert corridor_rays_clear(cfg, c, n_rays=200)


def test_finite_horizon_at_cutoff():
    # four disks on a half-cell lattice with radius close to the touching limit
    r = 0.24
    cfg = LatticeConfig(tuple(DiskScatterer((x, y), r) for x in (0.0, 0.5) for y in (0.0, 0.5)) +
                        (DiskScatterer((0.25, 0.25), 0.1), DiskScatterer((0.75, 0.75), 0.1),
                         DiskScatterer((0.25, 0.75), 0.1), DiskScatterer((0.75, 0.25), 0.1)))
    assert validate_config(cfg).ok
    assert classify_horizon(cfg, 3).horizon == "finite"


def test_primitive_directions_normalized():
    for p, q in primitive_directions(4):
        assert math.gcd(p, q) == 1
        assert p > 0 or (p == 0 and q > 0)


@given(st.integers(1, 3), st.integers(4, 6))
def test_horizon_is_monotone_in_cutoff(m, m2):
    cfg = single_disk(0.45)
    if classify_horizon(cfg, m).infinite:
        assert classify_horizon(cfg, m2).infinite


@given(st.floats(-50, 50, allow_nan=False), st.floats(-50, 50, allow_nan=False))
def test_cell_of_is_floor(x, y):
    assert cell_of((x, y)) == (math.floor(x), math.floor(y))
    assert cell_of((x, y), d=1) == math.floor(x)


@settings(max_examples=50)
@given(st.floats(0.01, 0.49))
def test_single_disk_radius_range_valid(r):
    assert validate_config(single_disk(r)).ok
