"""Independent high-precision oracles shared by the test modules."""

import mpmath as mp


def oracle_flight(cfg, x, box=40, dps=50):
    """Nearest forward ray-circle hit over every disk translate in a box, in high precision."""
    mp.mp.dps = dps
    s = cfg.scatterers[x.disk_index]
    th, ph = mp.mpf(x.boundary_angle), mp.mpf(x.phi)
    px = x.cell[0] + s.center[0] + s.radius * mp.cos(th)
    py = x.cell[1] + s.center[1] + s.radius * mp.sin(th)
    vx, vy = mp.cos(th + ph), mp.sin(th + ph)
    best = None
    for j, d in enumerate(cfg.scatterers):
        for i in range(-box, box + 1):
            for k in range(-box, box + 1):
                cx, cy = i + d.center[0], k + d.center[1]
                ox, oy = px - cx, py - cy
                b = ox * vx + oy * vy
                c = ox * ox + oy * oy - mp.mpf(d.radius) ** 2
                disc = b * b - c
                if disc <= 0:
                    continue
                t = -b - mp.sqrt(disc)
                if t > mp.mpf("1e-20") and (best is None or t < best[0]):
                    best = (t, px + t * vx, py + t * vy)
    return best
