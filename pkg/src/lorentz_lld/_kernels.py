"""Compiled inner loops for the collision map and Monte Carlo sampling.

State of a particle inside the kernels: index ``j`` of the disk it sits on,
integer lattice translate ``(ex, ey)`` of that disk, position ``(px, py)``
relative to the translate (so ``p = c_j + r_j u``), and unit velocity.  The
cover cell of the point is ``e + floor(p)``.
"""
import math

import numpy as np
from numba import njit, prange

OK = 0
GRAZING = 1
OVERFLOW = 2

GRAZE_TOL = 1e-12

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True)
def splitmix64(x):
    z = x + _M1
    z = (z ^ (z >> _S30)) * _M2
    z = (z ^ (z >> _S27)) * _M3
    return z ^ (z >> _S31)


@njit(cache=True)
def sample_key(seed, index):
    return splitmix64(np.uint64(seed) ^ splitmix64(np.uint64(index)))


@njit(cache=True)
def uniform(key, k):
    """k-th uniform on (0, 1) of the stream ``key``; never returns 0 or 1."""
    z = splitmix64(key + np.uint64(k))
    return (float(z >> _S11) + 0.5) * _INV53


@njit(cache=True)
def _floor_i(x):
    return np.int64(math.floor(x))


@njit(cache=True)
def advance(j, px, py, vx, vy, tx, ty, tr, tdisk, tox, toy, centers, radii, max_cells):
    """One free flight from disk ``j`` (frame of its translate) to the next collision.

    ``tx, ty`` are centres of the disk translates meeting the unit cell, relative
    to the cell origin, ``tox, toy`` their lattice offsets.  Returns
    (status, k_hit, fx, fy, new_px, new_py, new_vx, new_vy, flight_length) where
    ``(fx, fy)`` is the lattice translate of the hit disk relative to the old frame.
    """
    cx = _floor_i(px)
    cy = _floor_i(py)
    inf = np.inf
    if vx > 0.0:
        sx = 1
        tmx = (cx + 1 - px) / vx
        tdx = 1.0 / vx
    elif vx < 0.0:
        sx = -1
        tmx = (cx - px) / vx
        tdx = -1.0 / vx
    else:
        sx = 0
        tmx = inf
        tdx = inf
    if vy > 0.0:
        sy = 1
        tmy = (cy + 1 - py) / vy
        tdy = 1.0 / vy
    elif vy < 0.0:
        sy = -1
        tmy = (cy - py) / vy
        tdy = -1.0 / vy
    else:
        sy = 0
        tmy = inf
        tdy = inf

    best = inf
    best_k = -1
    best_cx = 0
    best_cy = 0
    best_graze = False
    ntab = tx.shape[0]
    found = False
    for _ in range(max_cells):
        t_exit = min(tmx, tmy)
        for k in range(ntab):
            ox = cx + tox[k]
            oy = cy + toy[k]
            if tdisk[k] == j and ox == 0 and oy == 0:
                continue
            ocx = px - (cx + tx[k])
            ocy = py - (cy + ty[k])
            b = ocx * vx + ocy * vy
            if b >= 0.0:
                continue
            r = tr[k]
            perp = ocx * vy - ocy * vx
            disc = r * r - perp * perp
            if disc < -GRAZE_TOL:
                continue
            graze = disc <= GRAZE_TOL
            if disc < 0.0:
                disc = 0.0
            sq = math.sqrt(disc)
            dist = math.hypot(ocx, ocy)
            c = (dist - r) * (dist + r)
            s = c / (-b + sq)
            if s < best:
                best = s
                best_k = k
                best_cx = cx
                best_cy = cy
                best_graze = graze
        if best_k >= 0 and best <= t_exit:
            found = True
            break
        if tmx < tmy:
            cx += sx
            tmx += tdx
        else:
            cy += sy
            tmy += tdy
    if not found:
        return OVERFLOW, -1, 0, 0, px, py, vx, vy, inf

    if best_graze:
        return GRAZING, best_k, 0, 0, px, py, vx, vy, best
    k = best_k
    ccx = best_cx + tx[k]
    ccy = best_cy + ty[k]
    hx = (px - ccx) + best * vx
    hy = (py - ccy) + best * vy
    hn = math.hypot(hx, hy)
    ux = hx / hn
    uy = hy / hn
    dot = vx * ux + vy * uy
    nvx = vx - 2.0 * dot * ux
    nvy = vy - 2.0 * dot * uy
    vn = math.hypot(nvx, nvy)
    nvx /= vn
    nvy /= vn
    nj = tdisk[k]
    r = radii[nj]
    npx = centers[nj, 0] + r * ux
    npy = centers[nj, 1] + r * uy
    fx = best_cx + tox[k]
    fy = best_cy + toy[k]
    return OK, nj, fx, fy, npx, npy, nvx, nvy, best


@njit(cache=True)
def start_state(key, centers, radii, cumw):
    """Liouville sample: disk by arclength, uniform angle, sin(phi) uniform on (-1, 1)."""
    u0 = uniform(key, 0)
    j = 0
    while j < cumw.shape[0] - 1 and u0 > cumw[j]:
        j += 1
    theta = 2.0 * math.pi * uniform(key, 1)
    sphi = 2.0 * uniform(key, 2) - 1.0
    phi = math.asin(sphi)
    px = centers[j, 0] + radii[j] * math.cos(theta)
    py = centers[j, 1] + radii[j] * math.sin(theta)
    vx = math.cos(theta + phi)
    vy = math.sin(theta + phi)
    return j, theta, phi, px, py, vx, vy


@njit(cache=True)
def sample_points(seed, start, count, centers, radii, cumw):
    disk = np.empty(count, np.int64)
    theta = np.empty(count)
    phi = np.empty(count)
    for i in range(count):
        key = sample_key(seed, start + i)
        j, th, ph, px, py, vx, vy = start_state(key, centers, radii, cumw)
        disk[i] = j
        theta[i] = th
        phi[i] = ph
    return disk, theta, phi


@njit(cache=True)
def _step_norm(kx, ky, d):
    if d == 1:
        return abs(float(kx))
    return math.hypot(float(kx), float(ky))


@njit(parallel=True, cache=True)
def run_trajectories(seed, start, count, n_steps, checkpoints, d,
                     tx, ty, tr, tdisk, tox, toy, centers, radii, cumw, max_cells):
    """Advance ``count`` Liouville samples ``n_steps`` collisions each.

    Sample ``i`` uses the stream ``sample_key(seed, start + i)`` so results do
    not depend on how samples are split across threads or chunks.
    Returns kappa at each checkpoint (count, C, 2), the number of checkpoints
    reached, S_n and M_n of the step norms (count, 2), sin(phi) after the last
    step and a status code.  A trajectory aborted by grazing or overflow keeps
    the checkpoints it reached before the failure.
    """
    nchk = checkpoints.shape[0]
    kap = np.zeros((count, nchk, 2), np.int64)
    sm = np.zeros((count, 2))
    sphi = np.zeros(count)
    status = np.zeros(count, np.int8)
    reached = np.zeros(count, np.int64)
    for i in prange(count):
        key = sample_key(seed, start + i)
        j, th, ph, px, py, vx, vy = start_state(key, centers, radii, cumw)
        ex = -_floor_i(px)
        ey = -_floor_i(py)
        kx = np.int64(0)
        ky = np.int64(0)
        ssum = 0.0
        smax = 0.0
        c = 0
        while c < nchk and checkpoints[c] == 0:
            c += 1
        st = OK
        for step in range(n_steps):
            cell_x = ex + _floor_i(px)
            cell_y = ey + _floor_i(py)
            st, nj, fx, fy, npx, npy, nvx, nvy, fl = advance(
                j, px, py, vx, vy, tx, ty, tr, tdisk, tox, toy, centers, radii, max_cells)
            if st != OK:
                break
            ex += fx
            ey += fy
            j = nj
            px = npx
            py = npy
            vx = nvx
            vy = nvy
            dx = ex + _floor_i(px) - cell_x
            dy = ey + _floor_i(py) - cell_y
            kx += dx
            ky += dy
            a = _step_norm(dx, dy, d)
            ssum += a
            if a > smax:
                smax = a
            while c < nchk and checkpoints[c] == step + 1:
                kap[i, c, 0] = kx
                kap[i, c, 1] = ky
                c += 1
        status[i] = st
        reached[i] = c
        sm[i, 0] = ssum
        sm[i, 1] = smax
        # sin of the angle from the outward normal to the velocity
        r = radii[j]
        ux = (px - centers[j, 0]) / r
        uy = (py - centers[j, 1]) / r
        sphi[i] = ux * vy - uy * vx
    return kap, reached, sm, sphi, status


@njit(parallel=True, cache=True)
def run_step_sequences(seed, start, count, n_steps,
                       tx, ty, tr, tdisk, tox, toy, centers, radii, cumw, max_cells):
    """Per-step displacements (count, n_steps, 2) for lag-correlation statistics."""
    steps = np.zeros((count, n_steps, 2), np.int64)
    status = np.zeros(count, np.int8)
    for i in prange(count):
        key = sample_key(seed, start + i)
        j, th, ph, px, py, vx, vy = start_state(key, centers, radii, cumw)
        ex = -_floor_i(px)
        ey = -_floor_i(py)
        st = OK
        for step in range(n_steps):
            cell_x = ex + _floor_i(px)
            cell_y = ey + _floor_i(py)
            st, nj, fx, fy, npx, npy, nvx, nvy, fl = advance(
                j, px, py, vx, vy, tx, ty, tr, tdisk, tox, toy, centers, radii, max_cells)
            if st != OK:
                break
            ex += fx
            ey += fy
            j = nj
            px = npx
            py = npy
            vx = nvx
            vy = nvy
            steps[i, step, 0] = ex + _floor_i(px) - cell_x
            steps[i, step, 1] = ey + _floor_i(py) - cell_y
        status[i] = st
    return steps, status


# ----------------------------------------------------------------------------
# exact one-step law: angular sweep from a boundary point


@njit(cache=True)
def _ray_hit(px, py, ang, cx, cy, r):
    """Distance to circle along direction ``ang`` or inf on a miss."""
    vx = math.cos(ang)
    vy = math.sin(ang)
    ocx = px - cx
    ocy = py - cy
    b = ocx * vx + ocy * vy
    if b >= 0.0:
        return np.inf
    perp = ocx * vy - ocy * vx
    disc = r * r - perp * perp
    if disc < 0.0:
        return np.inf
    dist = math.hypot(ocx, ocy)
    return (dist - r) * (dist + r) / (-b + math.sqrt(disc))


@njit(cache=True)
def _wrap(g):
    while g > math.pi:
        g -= 2 * math.pi
    while g <= -math.pi:
        g += 2 * math.pi
    return g


@njit(cache=True)
def _cell_breaks(px, py, theta, a, b, cx, cy, r):
    """Directions in (a, b) whose landing point on the circle lies on a grid line."""
    out = np.empty(16)
    m = 0
    for axis in range(2):
        c0 = cx if axis == 0 else cy
        c1 = cy if axis == 0 else cx
        k0 = math.floor(c0 - r)
        k1 = math.floor(c0 + r) + 1
        for kk in range(k0, k1 + 1):
            off = kk - c0
            if abs(off) >= r:
                continue
            h = math.sqrt(r * r - off * off)
            for sgn in (-1.0, 1.0):
                if axis == 0:
                    qx = float(kk)
                    qy = c1 + sgn * h
                else:
                    qy = float(kk)
                    qx = c1 + sgn * h
                # only the side of the circle facing the start point is ever hit
                if (qx - cx) * (qx - px) + (qy - cy) * (qy - py) >= 0.0:
                    continue
                beta = _wrap(math.atan2(qy - py, qx - px) - theta)
                if a < beta < b and m < 16:
                    out[m] = beta
                    m += 1
    return np.sort(out[:m])


@njit(cache=True)
def sweep_masses(px, py, theta, cand_x, cand_y, cand_r, width, out):
    """Add the Liouville mass (density cos(beta)/2) of each landing cell to ``out``.

    ``out`` is a (2*width+1, 2*width+1) grid indexed by displacement + width;
    the mass of sectors that hit no candidate, or land outside the grid, is
    returned as unresolved.  The start cell is floor(p).  Directions are beta
    in (-pi/2, pi/2) relative to the outward normal.
    """
    ncand = cand_x.shape[0]
    lo = np.empty(ncand)
    hi = np.empty(ncand)
    near = np.empty(ncand)
    half = 0.5 * math.pi
    for k in range(ncand):
        dx = cand_x[k] - px
        dy = cand_y[k] - py
        dist = math.hypot(dx, dy)
        near[k] = dist - cand_r[k]
        w = math.asin(min(1.0, cand_r[k] / dist))
        g = _wrap(math.atan2(dy, dx) - theta)
        lo[k] = max(g - w, -half)
        hi[k] = min(g + w, half)
    order = np.argsort(near)
    ev = np.empty(2 * ncand + 2)
    ev[0] = -half
    ev[1] = half
    m = 2
    for k in range(ncand):
        if hi[k] > lo[k]:
            ev[m] = lo[k]
            ev[m + 1] = hi[k]
            m += 2
    ev = np.sort(ev[:m])
    sx = _floor_i(px)
    sy = _floor_i(py)
    unresolved = 0.0
    for e in range(m - 1):
        a = ev[e]
        b = ev[e + 1]
        if b - a <= 0.0:
            continue
        mid = 0.5 * (a + b)
        best = np.inf
        bk = -1
        # candidates in order of closest approach; stop once none can beat the best hit
        for q in range(ncand):
            k = order[q]
            if near[k] >= best:
                break
            if lo[k] <= a and hi[k] >= b:
                s = _ray_hit(px, py, theta + mid, cand_x[k], cand_y[k], cand_r[k])
                if s < best:
                    best = s
                    bk = k
        if bk < 0:
            unresolved += 0.5 * (math.sin(b) - math.sin(a))
            continue
        # split the sector wherever the landing point crosses a grid line
        brk = _cell_breaks(px, py, theta, a, b, cand_x[bk], cand_y[bk], cand_r[bk])
        prev = a
        for q in range(brk.shape[0] + 1):
            nxt = brk[q] if q < brk.shape[0] else b
            if nxt <= prev:
                continue
            mm = 0.5 * (prev + nxt)
            sm = _ray_hit(px, py, theta + mm, cand_x[bk], cand_y[bk], cand_r[bk])
            hx = px + sm * math.cos(theta + mm)
            hy = py + sm * math.sin(theta + mm)
            mass = 0.5 * (math.sin(nxt) - math.sin(prev))
            ix = _floor_i(hx) - sx + width
            iy = _floor_i(hy) - sy + width
            if 0 <= ix < out.shape[0] and 0 <= iy < out.shape[1]:
                out[ix, iy] += mass
            else:
                unresolved += mass
            prev = nxt
    return unresolved


@njit(cache=True)
def boundary_integrand(theta, cx, cy, r, cand_x, cand_y, cand_r, radius, width, out):
    """Landing-cell masses for the boundary point at angle ``theta``; flattened into ``out``.

    The last slot of ``out`` holds the unresolved mass.
    """
    px = cx + r * math.cos(theta)
    py = cy + r * math.sin(theta)
    n = 0
    for k in range(cand_x.shape[0]):
        if math.hypot(cand_x[k] - px, cand_y[k] - py) < radius:
            n += 1
    sx = np.empty(n)
    sy = np.empty(n)
    sr = np.empty(n)
    n = 0
    for k in range(cand_x.shape[0]):
        if math.hypot(cand_x[k] - px, cand_y[k] - py) < radius:
            sx[n] = cand_x[k]
            sy[n] = cand_y[k]
            sr[n] = cand_r[k]
            n += 1
    side = 2 * width + 1
    grid = np.zeros((side, side))
    lost = sweep_masses(px, py, theta, sx, sy, sr, width, grid)
    flat = grid.ravel()
    for i in range(flat.shape[0]):
        out[i] = flat[i]
    out[flat.shape[0]] = lost


# 15-point Gauss-Kronrod rule on [-1, 1]; the embedded 7-point Gauss rule uses the odd nodes
_GK_X = np.array([0.991455371120812639, 0.949107912342758525, 0.864864423359769073,
                  0.741531185599394440, 0.586087235467691130, 0.405845151377397167,
                  0.207784955007898468, 0.0])
_GK_WK = np.array([0.022935322010529225, 0.063092092629978553, 0.104790010322250184,
                   0.140653259715525919, 0.169004726639267903, 0.190350578064785410,
                   0.204432940075298892, 0.209482141084727828])
_GK_WG = np.array([0.0, 0.129484966168869693, 0.0, 0.279705391489276668,
                   0.0, 0.381830050505118945, 0.0, 0.417959183673469388])


@njit(cache=True)
def _gk15(a, b, cx, cy, r, cand_x, cand_y, cand_r, radius, width, size, buf):
    mid = 0.5 * (a + b)
    hl = 0.5 * (b - a)
    kron = np.zeros(size)
    gauss = np.zeros(size)
    for i in range(8):
        nodes = 1 if i == 7 else 2
        for sgn in range(nodes):
            x = mid + (hl * _GK_X[i] if sgn == 0 else -hl * _GK_X[i])
            boundary_integrand(x, cx, cy, r, cand_x, cand_y, cand_r, radius, width, buf)
            for q in range(size):
                kron[q] += _GK_WK[i] * buf[q]
                gauss[q] += _GK_WG[i] * buf[q]
    err = 0.0
    for q in range(size):
        kron[q] *= hl
        gauss[q] *= hl
        err = max(err, abs(kron[q] - gauss[q]))
    return kron, err


@njit(cache=True)
def integrate_boundary(cx, cy, r, cand_x, cand_y, cand_r, radius, width, a, b, tol, max_evals):
    """Adaptive Gauss-Kronrod over boundary angle in [a, b] with a vector integrand.

    A subinterval is accepted once its |K15 - G7| estimate (max over
    components) is at most tol * length / (b - a), so the accepted estimates
    sum to at most tol.  Returns (integral, error estimate, evaluations, ok).
    """
    size = (2 * width + 1) ** 2 + 1
    buf = np.empty(size)
    total = np.zeros(size)
    err_total = 0.0
    evals = 0
    span = b - a
    stack_a = np.empty(4096)
    stack_b = np.empty(4096)
    stack_a[0] = a
    stack_b[0] = b
    top = 1
    while top > 0:
        top -= 1
        lo = stack_a[top]
        hi = stack_b[top]
        val, err = _gk15(lo, hi, cx, cy, r, cand_x, cand_y, cand_r, radius, width, size, buf)
        evals += 15
        if err <= tol * (hi - lo) / span or hi - lo < 1e-14 * span:
            for q in range(size):
                total[q] += val[q]
            err_total += err
        elif evals >= max_evals or top + 2 > stack_a.shape[0]:
            for q in range(size):
                total[q] += val[q]
            err_total += err
            return total, err_total, evals, False
        else:
            m = 0.5 * (lo + hi)
            stack_a[top] = m
            stack_b[top] = hi
            stack_a[top + 1] = lo
            stack_b[top + 1] = m
            top += 2
    return total, err_total, evals, True
