"""Closed-form extremal coefficients against simulation.

Simulates a Brown-Resnick field on a transect, estimates theta(h) with the
F-madogram at a few lags and prints them next to the closed form.

    python3 demos/extremal_coefficient.py
"""
import numpy as np

from genmaxstable.simulator import simulate_sites
from genmaxstable.spatial_core import Family, ParameterVector, theta

p = ParameterVector(2.0, 1.0, Family.BROWN_RESNICK)
xs = np.column_stack([np.arange(15.0), np.zeros(15)])
Z, _ = simulate_sites(p, xs, np.random.default_rng(0), 3000)
F = np.exp(-1.0 / Z)

print(" h   closed form   madogram")
for h in (1, 2, 4, 8):
    nu_f = 0.5 * np.abs(F[:, h:] - F[:, :-h]).mean()
    print(f"{h:2d}   {float(theta(h, p)):11.4f}   {(1 + 2 * nu_f) / (1 - 2 * nu_f):8.4f}")
