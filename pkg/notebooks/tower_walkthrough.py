"""
Young tower models: exact laws, eigenvalues and the renewal route
=================================================================

"""

# %% models
import numpy as np

from lorentz_lld import spectral as S
from lorentz_lld import tower as T

heavy = T.build_tower(T.make_heavy_tailed_model(64))
period_two = T.build_tower(T.make_period_two_model())
print("heavy-64 states:", heavy.n_states, " period-two q:", period_two.q)

# %% exact law of kappa_n by dynamic programming and by Fourier inversion
dp = T.exact_displacement_law(heavy, 8)
inv = S.fourier_inversion_law(heavy, 8)
print("max |DP - Fourier| =", max(abs(dp[N] - inv.get(N, 0.0)) for N in dp))

# %% leading eigenvalue of the twisted operator and 1/g from the renewal equation
ts = np.linspace(0.0, 0.25, 6)
lam = S.track_lambda(heavy, [[t] for t in ts])
for t, l in zip(ts, lam):
    g = S.solve_gk(heavy, 0, t).g
    print(f"t={t:.2f}  lambda={l.real:.12f}  1/g={(1 / g).real:.12f}")
print("period-two branches at t=0:", S.solve_gk(period_two, 0, 0.0).g, S.solve_gk(period_two, 1, 0.0).g)

# %% the renewal identities on a small grid
res = S.verify_renewal_identity(period_two, [0.5, 0.9j], [0.0, 0.1])
print("renewal residuals:", res.inverse, res.decomposition)

# %% smoothing kernel: the smoothed law dominates the exact one
kern = S.smoothing_kernel(S.DELTA)
smooth = S.smoothed_law(heavy, 8, list(dp), kern)
print("min(smoothed - exact) =", min(smooth[N] - p for N, p in dp.items()))

# %% psi tail of the spread model
pt = T.psi_tail_curve(T.shipped_models()["heavy-64-spread"])
print("sup m^2 mu(psi>m) =", round(pt.sup_m2_tail, 4), " envelope ratio =", round(pt.envelope_ratio, 4))
