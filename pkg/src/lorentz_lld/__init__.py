"""Local large deviations for the infinite-horizon Lorentz gas.

Modules
-------
geometry
    Periodic disk configurations, validation, corridors.
billiard
    Exact collision dynamics on the Z^d cover and the exact one-step law.
montecarlo
    Reproducible Liouville sampling, displacement histograms, tails.
bounds
    Closed-form bounds, normalizers and ratio tables.
tower
    Finite Young tower models with exact displacement laws.
spectral
    Perturbed transfer operators, renewal operators, Fourier inversion.
cli
    TOML experiments, run records and reports.
"""

__version__ = "0.1.0"
