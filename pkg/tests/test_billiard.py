import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from lorentz_lld.billiard import (
    STEP_NORM,
    TRAJECTORY_COLUMNS,
    BilliardError,
    BudgetExceeded,
    InvalidPoint,
    PhasePoint,
    cover_position,
    dump_trajectory,
    exact_step_law,
    next_collision,
    orbit_displacement,
    reverse_point,
    step_law_grid,
)
from lorentz_lld.geometry import DiskScatterer, LatticeConfig, cell_of, single_disk
from oracles import oracle_flight

CFG = single_disk(0.25)
TWO = LatticeConfig((DiskScatterer((0.5, 0.5), 0.25), DiskScatterer((0.0, 0.0), 0.15)))

# exact_step_law values for the single disk of radius 0.25 (tol 1e-9)
MU_AXIS = 0.081375789721
MU_DIAG = 0.05687921074


def test_vertical_flight():
    res = next_collision(CFG, PhasePoint(0, math.pi / 2, 0.0))
    assert res.kappa == (0, 1)
    assert res.flight_length == pytest.approx(0.5, abs=1e-12)
    assert res.next.boundary_angle == pytest.approx(3 * math.pi / 2, abs=1e-12)
    assert res.next.phi == pytest.approx(0.0, abs=1e-12)


def test_horizontal_flight():
    res = next_collision(CFG, PhasePoint(0, 0.0, 0.0))
    assert res.kappa == (1, 0)
    assert res.flight_length == pytest.approx(0.5, abs=1e-12)


def test_high_precision_oracle():
    x = PhasePoint(0, 0.3, 0.7)
    res = next_collision(CFG, x)
    t, ox, oy = oracle_flight(CFG, x)
    lx, ly = cover_position(CFG, res.next)
    assert abs(lx - float(ox)) < 1e-9 and abs(ly - float(oy)) < 1e-9
    assert res.flight_length == pytest.approx(float(t), abs=1e-9)
    assert res.kappa == cell_of((float(ox), float(oy)))


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 2 * math.pi, exclude_max=True), st.floats(-1.5, 1.5))
def test_oracle_two_disk_config(theta, phi):
    x = PhasePoint(0, theta, phi)
    try:
        res = next_collision(TWO, x)
    except BilliardError:
        assume(False)
    hit = oracle_flight(TWO, x, box=max(3, int(res.flight_length) + 3), dps=30)
    assume(hit is not None)
    lx, ly = cover_position(TWO, res.next)
    assert abs(lx - float(hit[1])) < 1e-9 and abs(ly - float(hit[2])) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 2 * math.pi, exclude_max=True), st.floats(-1.55, 1.55))
def test_landing_and_cover_consistency(theta, phi):
    x = PhasePoint(0, theta, phi, (3, -2))
    try:
        res = next_collision(CFG, x)
    except BilliardError:
        assume(False)
    lx, ly = cover_position(CFG, res.next)
    cx = res.next.cell[0] + 0.5
    cy = res.next.cell[1] + 0.5
    assert abs(math.hypot(lx - cx, ly - cy) - 0.25) <= 1e-9
    sx, sy = cover_position(CFG, x)
    assert res.kappa == tuple(np.subtract(cell_of((lx, ly)), cell_of((sx, sy))))
    assert math.hypot(lx - sx, ly - sy) == pytest.approx(res.flight_length, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 2 * math.pi, exclude_max=True), st.floats(-1.5, 1.5))
def test_time_reversal(theta, phi):
    x = PhasePoint(0, theta, phi)
    try:
        y = next_collision(CFG, x).next
        back = next_collision(CFG, reverse_point(y)).next
    except BilliardError:
        assume(False)
    z = reverse_point(back)
    assert z.cell == x.cell
    assert abs(math.remainder(z.boundary_angle - x.boundary_angle, 2 * math.pi)) < 1e-9
    assert abs(z.phi - x.phi) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2 * math.pi, exclude_max=True), st.floats(-1.5, 1.5))
def test_d1_is_first_component(theta, phi):
    x = PhasePoint(0, theta, phi)
    try:
        k2 = next_collision(CFG, x).kappa
    except BilliardError:
        assume(False)
    assert next_collision(CFG.with_dimension(1), x).kappa == k2[0]


def test_reverse_point():
    x = PhasePoint(0, 1.0, 0.4)
    assert reverse_point(x).phi == -0.4
    assert reverse_point(PhasePoint(0, 1.0, 0.0)) == PhasePoint(0, 1.0, 0.0)
    assert reverse_point(reverse_point(x)) == x


def test_invalid_point():
    with pytest.raises(InvalidPoint):
        next_collision(CFG, PhasePoint(0, 0.0, 2.0))
    with pytest.raises(InvalidPoint):
        next_collision(CFG, PhasePoint(3, 0.0, 0.0))


def test_orbit_n0_and_n1():
    x = PhasePoint(0, 0.3, 0.7)
    o = orbit_displacement(CFG, x, 0)
    assert o.kappa == (0, 0) and o.sum_norm == 0 and o.max_norm == 0
    o1 = orbit_displacement(CFG, x, 1)
    k = next_collision(CFG, x).kappa
    assert o1.kappa == k
    assert o1.sum_norm == o1.max_norm == pytest.approx(math.hypot(*k))
    assert STEP_NORM == "euclidean"


def test_orbit_matches_step_by_step_fold():
    x = PhasePoint(0, 1.234, -0.321)
    o = orbit_displacement(CFG, x, 64)
    kx = ky = 0
    norms = []
    cur = x
    for _ in range(64):
        r = next_collision(CFG, cur)
        kx += r.kappa[0]
        ky += r.kappa[1]
        norms.append(math.hypot(*r.kappa))
        cur = r.next
    assert o.kappa == (kx, ky)
    assert o.sum_norm == pytest.approx(sum(norms))
    assert o.max_norm == max(norms)
    assert o.final == cur


def test_dump_trajectory(tmp_path):
    path = tmp_path / "traj.csv"
    dump_trajectory(CFG, PhasePoint(0, 0.3, 0.7), 5, path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == TRAJECTORY_COLUMNS
    assert len(lines) == 6


def test_step_law_square_symmetry():
    law = exact_step_law(CFG, [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (5, 0)])
    axis = [law[k] for k in [(1, 0), (0, 1), (-1, 0), (0, -1)]]
    assert max(axis) - min(axis) < 1e-9
    assert axis[0] == pytest.approx(MU_AXIS, abs=1e-8)
    assert law[(1, 1)] == pytest.approx(MU_DIAG, abs=1e-8)
    # (5, 0) is shadowed by the disks of the own row
    assert law[(5, 0)] == 0.0
    assert law.error_bound <= 1e-7


def test_step_law_total_probability():
    g = step_law_grid(CFG, 6)
    total = sum(g.masses.values()) + g.unresolved
    assert total == pytest.approx(1.0, abs=1e-7)
    assert g.unresolved == pytest.approx(0.012012566, abs=1e-7)


def test_step_law_d1_values():
    law = exact_step_law(CFG.with_dimension(1), [-2, -1, 0, 1, 2])
    assert law[0] == pytest.approx(0.16275157960, abs=1e-8)
    assert law[1] == pytest.approx(0.28308432752, abs=1e-8)
    assert law[-1] == pytest.approx(law[1], abs=1e-9)
    assert law[2] == pytest.approx(0.07708481809, abs=1e-8)


def test_step_law_budget():
    with pytest.raises(BudgetExceeded):
        exact_step_law(CFG, [(1, 0)], tol=1e-12, max_evals=100)
