"""GEV response surfaces, unit Frechet transforms and gridded data ingestion.

The location varies linearly with latitude, longitude and year,

    mu(i, t) = b0 + b1 lat(i) + b2 lon(i) + b3 year(t),

while scale and shape are shared by all sites. Fitting maximises the
independence likelihood with BFGS on standardised covariates.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .simulator import GridSpec
from .spatial_core import DomainError

GUMBEL_TOL = 1e-8
COEF_NAMES = ("beta0_mu", "beta1_mu", "beta2_mu", "beta3_mu", "beta0_sigma", "beta0_gamma")


class SupportError(DomainError):
    """Values outside the GEV support; ``cells`` lists (year, i, j)."""

    def __init__(self, cells):
        self.cells = [tuple(int(v) for v in c) for c in cells]
        shown = ", ".join(map(str, self.cells[:10]))
        more = "" if len(self.cells) <= 10 else f" and {len(self.cells) - 10} more"
        super().__init__(f"{len(self.cells)} cells outside the GEV support: {shown}{more}")


@dataclass
class GriddedSeries:
    """Annual block maxima on a regular grid.

    ``values`` has shape (n_years, nx, ny); ``lat``/``lon`` are (nx, ny).
    """

    years: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    values: np.ndarray = field(repr=False)
    km_per_unit: float | None = None
    scale: str = "natural"

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.lat = np.asarray(self.lat, dtype=float)
        self.lon = np.asarray(self.lon, dtype=float)
        if self.values.ndim != 3 or self.values.shape[0] != len(self.years):
            raise DomainError("values must have shape (n_years, nx, ny)")
        if self.lat.shape != self.values.shape[1:] or self.lon.shape != self.values.shape[1:]:
            raise DomainError("lat/lon do not match the value grid")
        missing = np.argwhere(~np.isfinite(self.values))
        if len(missing):
            raise DomainError(f"missing cells (year index, i, j): {missing[:10].tolist()}")

    @property
    def grid(self) -> GridSpec:
        """Simulation grid with one unit per cell."""
        nx, ny = self.values.shape[1:]
        return GridSpec(nx, ny, (0.0, max(nx - 1, 1), 0.0, max(ny - 1, 1)))

    def provenance(self) -> dict:
        return {"km_per_unit": self.km_per_unit, "cell_units": 1.0, "scale": self.scale}


@dataclass
class GevSurface:
    beta_mu: np.ndarray
    beta_sigma: float
    beta_gamma: float
    se: dict = field(default_factory=dict)
    loglik: float = math.nan
    loglik_start: float = math.nan
    grad_norm: float = math.nan
    converged: bool = True
    message: str = ""

    def __post_init__(self):
        self.beta_mu = np.asarray(self.beta_mu, dtype=float)
        if self.beta_sigma <= 0:
            raise DomainError("GEV scale must be positive")

    @property
    def shape_flag(self) -> bool:
        """True if the shape lies outside (-0.5, 0.5)."""
        return not (-0.5 < self.beta_gamma < 0.5)

    def location(self, lat, lon, years) -> np.ndarray:
        """mu for every (year, cell): shape (n_years, *lat.shape)."""
        b = self.beta_mu
        years = np.asarray(years, dtype=float)
        return b[0] + b[1] * np.asarray(lat)[None] + b[2] * np.asarray(lon)[None] + b[3] * years.reshape(-1, *([1] * np.ndim(lat)))

    def coefficients(self) -> dict:
        return dict(zip(COEF_NAMES, [*self.beta_mu.tolist(), float(self.beta_sigma), float(self.beta_gamma)]))

    def to_dict(self) -> dict:
        coef = self.coefficients()
        return {
            "coefficients": [{"name": k, "estimate": v, "se": self.se.get(k)} for k, v in coef.items()],
            "loglik": self.loglik,
            "loglik_start": self.loglik_start,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "shape_outside_half": self.shape_flag,
            "message": self.message,
        }


# --------------------------------------------------------------------------
# likelihood


def gev_logpdf(z, mu, sigma, gamma):
    """Elementwise GEV log density; ``-inf`` outside the support."""
    y = (np.asarray(z) - mu) / sigma
    if abs(gamma) < GUMBEL_TOL:
        return -np.log(sigma) - y - np.exp(-y)
    t = 1.0 + gamma * y
    with np.errstate(divide="ignore", invalid="ignore"):
        lt = np.log(np.where(t > 0, t, 1.0))
        out = -np.log(sigma) - (1.0 + 1.0 / gamma) * lt - np.exp(-lt / gamma)
    return np.where(t > 0, out, -np.inf)


def _design(series: GriddedSeries):
    T = len(series.years)
    k = series.lat.size
    lat = np.broadcast_to(series.lat.ravel(), (T, k)).ravel()
    lon = np.broadcast_to(series.lon.ravel(), (T, k)).ravel()
    yr = np.repeat(series.years, k)
    X = np.column_stack([lat, lon, yr])
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = np.column_stack([np.ones(len(X)), (X - center) / scale])
    return Xs, series.values.reshape(-1), center, scale


class _Objective:
    """Negative log-likelihood on (a0..a3, log sigma, gamma) with standardised covariates."""

    def __init__(self, X, z):
        self.X, self.z = X, z

    def __call__(self, x):
        mu = self.X @ x[:4]
        v = gev_logpdf(self.z, mu, math.exp(x[4]), x[5])
        s = v.sum()
        return -s if np.isfinite(s) else np.inf

    def grad(self, x):
        sigma, gamma = math.exp(x[4]), x[5]
        y = (self.z - self.X @ x[:4]) / sigma
        if abs(gamma) < GUMBEL_TOL:
            e = np.exp(-y)
            dmu = (1.0 - e) / sigma
        else:
            t = 1.0 + gamma * y
            if np.any(t <= 0):
                return np.full(6, np.nan)
            tp = t ** (-1.0 / gamma - 1.0)
            dmu = ((1.0 + gamma) / t - tp) / sigma
        g = np.empty(6)
        g[:4] = self.X.T @ dmu
        g[4] = np.sum(-1.0 + y * dmu * sigma)
        # shape derivative by central difference (smooth across the Gumbel switch)
        h = 1e-6
        xp, xm = x.copy(), x.copy()
        xp[5] += h
        xm[5] -= h
        g[5] = -(self(xp) - self(xm)) / (2 * h)
        return -g


def _hessian(fun_grad, x, rel=1e-5):
    n = len(x)
    H = np.empty((n, n))
    for i in range(n):
        h = rel * max(1.0, abs(x[i]))
        e = np.zeros(n)
        e[i] = h
        H[i] = (fun_grad(x + e) - fun_grad(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def moment_start(series: GriddedSeries) -> np.ndarray:
    """Gumbel method-of-moments start on the standardised scale."""
    z = series.values.ravel()
    s = math.sqrt(6.0) * z.std() / math.pi
    m = z.mean() - 0.5772156649015329 * s
    return np.array([m, 0.0, 0.0, 0.0, math.log(s), 0.0])


def fit_gev_surface(data: GriddedSeries, min_years: int = 20, gtol: float = 1e-7) -> GevSurface:
    """Maximum independence-likelihood GEV surface with observed-information SEs."""
    if len(data.years) < min_years:
        raise DomainError(f"need at least {min_years} years of maxima, got {len(data.years)}")
    X, z, center, scale = _design(data)
    obj = _Objective(X, z)
    n = len(z)
    x0 = moment_start(data)
    # per-observation scaling keeps the tolerances size independent
    res = optimize.minimize(lambda x: obj(x) / n, x0, jac=lambda x: obj.grad(x) / n,
                            method="BFGS", options={"gtol": gtol, "maxiter": 2000})
    x = res.x
    g = obj.grad(x) / n
    grad_norm = float(np.linalg.norm(g))
    H = _hessian(obj.grad, x)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = np.full((6, 6), np.nan)
    # back to the natural covariate scale
    J = np.zeros((6, 6))
    J[0, 0] = 1.0
    J[0, 1:4] = -center / scale
    J[1:4, 1:4] = np.diag(1.0 / scale)
    sigma = math.exp(x[4])
    J[4, 4] = sigma
    J[5, 5] = 1.0
    beta = J[:4, :4] @ x[:4]
    cov_nat = J @ cov @ J.T
    se = dict(zip(COEF_NAMES, np.sqrt(np.clip(np.diag(cov_nat), 0, None)).tolist()))
    converged = bool(np.isfinite(grad_norm) and grad_norm < 1e-4)
    msg = "ok" if converged else f"no convergence: {res.message} (gradient norm {grad_norm:.3g})"
    return GevSurface(beta, sigma, float(x[5]), se, -float(obj(x)), -float(obj(x0)), grad_norm,
                      converged, msg)


def sample_gev_surface(surface: GevSurface, years, lat, lon, seed=None) -> GriddedSeries:
    """Independent GEV maxima at every cell and year from ``surface``."""
    rng = np.random.default_rng(seed)
    lat, lon = np.asarray(lat, dtype=float), np.asarray(lon, dtype=float)
    mu = surface.location(lat, lon, years)
    u = rng.uniform(size=mu.shape)
    e = -np.log(u)  # unit exponential; Z = 1/e is unit Frechet
    g, s = surface.beta_gamma, surface.beta_sigma
    vals = mu + s * (-np.log(e)) if abs(g) < GUMBEL_TOL else mu + s * (e ** (-g) - 1.0) / g
    return GriddedSeries(np.asarray(years, dtype=float), lat, lon, vals)


# --------------------------------------------------------------------------
# transforms


def to_unit_frechet(data: GriddedSeries, surface: GevSurface) -> GriddedSeries:
    """``u = (1 + gamma (z - mu) / sigma)^(1/gamma)``; Gumbel limit ``exp((z - mu)/sigma)``."""
    mu = surface.location(data.lat, data.lon, data.years)
    y = (data.values - mu) / surface.beta_sigma
    g = surface.beta_gamma
    if abs(g) < GUMBEL_TOL:
        u = np.exp(y)
    else:
        t = 1.0 + g * y
        bad = np.argwhere(~(t > 0))
        if len(bad):
            raise SupportError(bad)
        u = t ** (1.0 / g)
    return GriddedSeries(data.years, data.lat, data.lon, u, data.km_per_unit, "frechet")


def from_unit_frechet(data: GriddedSeries, surface: GevSurface) -> GriddedSeries:
    """Inverse of :func:`to_unit_frechet`."""
    u = data.values
    if np.any(~(u > 0)):
        raise DomainError("unit Frechet values must be positive")
    mu = surface.location(data.lat, data.lon, data.years)
    g, s = surface.beta_gamma, surface.beta_sigma
    z = mu + s * np.log(u) if abs(g) < GUMBEL_TOL else mu + s * (u ** g - 1.0) / g
    return GriddedSeries(data.years, data.lat, data.lon, z, data.km_per_unit, "natural")


# --------------------------------------------------------------------------
# ingestion


class SchemaError(DomainError):
    pass


CSV_HEADER = ["year", "lat", "lon", "value"]


def _read_csv(path: Path, km_per_unit):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != CSV_HEADER:
            raise SchemaError(f"{path}: header must be {','.join(CSV_HEADER)}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise SchemaError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    arr = np.asarray(rows)
    years, lats, lons = (np.unique(arr[:, c]) for c in range(3))
    vals = np.full((len(years), len(lats), len(lons)), np.nan)
    iy, ia, io = (np.searchsorted(u, arr[:, c]) for c, u in enumerate((years, lats, lons)))
    seen = np.zeros(vals.shape, dtype=bool)
    dup = seen.copy()
    for a, b, c in zip(iy, ia, io):
        dup[a, b, c] |= seen[a, b, c]
        seen[a, b, c] = True
    if dup.any():
        d = np.argwhere(dup)[0]
        raise SchemaError(f"{path}: duplicate entry at year={years[d[0]]}, lat={lats[d[1]]}, lon={lons[d[2]]}")
    vals[iy, ia, io] = arr[:, 3]
    miss = np.argwhere(~seen)
    if len(miss):
        coords = [(years[a], lats[b], lons[c]) for a, b, c in miss[:10]]
        raise SchemaError(f"{path}: {len(miss)} missing cells (year, lat, lon), e.g. {coords}")
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))[0]
        raise SchemaError(f"{path}: non-finite value at year={years[bad[0]]}, lat={lats[bad[1]]}, lon={lons[bad[2]]}")
    LAT, LON = np.meshgrid(lats, lons, indexing="ij")
    return GriddedSeries(years, LAT, LON, vals, km_per_unit)


def save_series(series: GriddedSeries, path) -> Path:
    """Dataset directory: manifest.json, fields.bin (years x nx x ny), coords.bin (k x 2 lat/lon)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    nx, ny = series.values.shape[1:]
    manifest = {
        "format": "genmaxstable-gridded",
        "version": 1,
        "grid": series.grid.to_dict(),
        "years": series.years.tolist(),
        "count": len(series.years),
        "dtype": "float64",
        "byte_order": "little",
        "scale": series.scale,
        "provenance": series.provenance(),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (path / "fields.bin").write_bytes(np.ascontiguousarray(series.values, dtype="<f8").tobytes())
    coords = np.column_stack([series.lat.ravel(), series.lon.ravel()])
    (path / "coords.bin").write_bytes(np.ascontiguousarray(coords, dtype="<f8").tobytes())
    return path


def _read_dir(path: Path, km_per_unit):
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise SchemaError(f"{path}: manifest.json not found")
    meta = json.loads(mpath.read_text())
    for key in ("grid", "years"):
        if key not in meta:
            raise SchemaError(f"{mpath}: missing key {key!r}")
    grid = GridSpec.from_dict(meta["grid"])
    years = np.asarray(meta["years"], dtype=float)
    vals = np.fromfile(path / "fields.bin", dtype="<f8")
    if vals.size != len(years) * grid.k:
        raise SchemaError(f"{path}/fields.bin: expected {len(years) * grid.k} values, found {vals.size}")
    coords = np.fromfile(path / "coords.bin", dtype="<f8")
    if coords.size != 2 * grid.k:
        raise SchemaError(f"{path}/coords.bin: expected {2 * grid.k} values, found {coords.size}")
    coords = coords.reshape(grid.k, 2)
    kpu = km_per_unit if km_per_unit is not None else meta.get("provenance", {}).get("km_per_unit")
    return GriddedSeries(years, coords[:, 0].reshape(grid.shape), coords[:, 1].reshape(grid.shape),
                         vals.reshape((len(years),) + grid.shape), kpu, meta.get("scale", "natural"))


def ingest_grid(path, format: str | None = None, km_per_unit: float | None = None,
                years: tuple | None = None) -> GriddedSeries:
    """Read a gridded series from CSV (``year,lat,lon,value``) or a dataset directory.

    ``km_per_unit`` records the physical size of one grid unit; ``years``
    restricts to an inclusive ``(first, last)`` range.
    """
    path = Path(path)
    fmt = format or ("dataset-dir" if path.is_dir() else "csv")
    if fmt == "csv":
        s = _read_csv(path, km_per_unit)
    elif fmt == "dataset-dir":
        s = _read_dir(path, km_per_unit)
    else:
        raise SchemaError(f"unknown format {fmt!r}")
    if years is not None:
        a, b = years
        sel = (s.years >= a) & (s.years <= b)
        if not sel.any():
            raise SchemaError(f"no data in years {a}-{b}")
        s = GriddedSeries(s.years[sel], s.lat, s.lon, s.values[sel], s.km_per_unit, s.scale)
    return s
