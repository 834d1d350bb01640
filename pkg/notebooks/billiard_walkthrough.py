"""
Flights, tails and local probabilities in the single-disk Lorentz gas
=====================================================================

Runs in well under a minute.  Every printed number comes from a fixed seed.
"""

# %% the configuration: one disk of radius 0.25 per unit cell, infinite horizon
import math

import numpy as np

from lorentz_lld.billiard import PhasePoint, exact_step_law, next_collision, orbit_displacement
from lorentz_lld.bounds import a_n, ratio_table
from lorentz_lld.geometry import classify_horizon, single_disk
from lorentz_lld.montecarlo import estimate_displacement_laws, estimate_tail

cfg = single_disk(0.25)
verdict = classify_horizon(cfg, 3)
print("horizon:", verdict.horizon, "corridors:", [(c.direction, round(c.width, 4)) for c in verdict.corridors])

# %% a single flight and a short orbit
x = PhasePoint(0, 0.3, 0.7)
hit = next_collision(cfg, x)
print("kappa", hit.kappa, "flight length", round(hit.flight_length, 6))
orbit = orbit_displacement(cfg, x, 64)
print("kappa_64", orbit.kappa, "S_64", round(orbit.sum_norm, 3), "M_64", round(orbit.max_norm, 3))

# %% exact one-step law with its certified error bound
law = exact_step_law(cfg, [(1, 0), (1, 1), (2, 0)])
print({N: round(p, 8) for N, p in law.masses.items()}, "error bound", law.error_bound)

# %% the m^-2 tail of one flight
tail = estimate_tail(cfg, 2_000_000, 7, [1, 2, 4, 8, 16, 32, 64, 128, 256])
for m, s in zip(tail.thresholds, tail.survival):
    print(f"m={m:4d}  mu(|kappa|>m)={s:.3e}  m^2 mu={m * m * s:.3f}")
print("fitted exponent", round(tail.fitted_exponent, 3))

# %% local probabilities against the bound, d = 1 projection
hists = estimate_displacement_laws(cfg.with_dimension(1), [16, 64, 256], 100_000, 2024)
rep = ratio_table(hists.values(), "lld", max_scale=4.0)
summary = rep.summary()
print({k: summary[k] for k in ("pairs", "max", "median", "max_over_median", "slope_max")})
for n, h in hists.items():
    xs = np.array(sorted(h.counts))
    spread = math.sqrt(sum(k * k * h.counts[k] for k in xs) / h.total_samples) / a_n(n)
    print(f"n={n:4d}  std(kappa_n)/a_n={spread:.3f}")
