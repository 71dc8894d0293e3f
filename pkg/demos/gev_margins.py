"""Fit a GEV trend surface to synthetic annual maxima and map them to unit Frechet.

    python3 demos/gev_margins.py
"""
import numpy as np

from genmaxstable.marginals import GevSurface, fit_gev_surface, sample_gev_surface, to_unit_frechet

lat, lon = np.meshgrid(np.linspace(47, 55, 6), np.linspace(6, 15, 6), indexing="ij")
years = np.arange(1951, 2021)
truth = GevSurface([60.0, 1.5, -0.8, 0.05], 15.0, 0.1)
data = sample_gev_surface(truth, years, lat, lon, seed=4)
fit = fit_gev_surface(data)

for name, value in fit.coefficients().items():
    print(f"{name:12s} {value:9.4f} +/- {fit.se[name]:.4f}   (true {truth.coefficients()[name]:.4f})")
z = to_unit_frechet(data, fit)
print("median of transformed values:", np.median(z.values), "(unit Frechet median", 1 / np.log(2), ")")
