"""Simulation of max-stable fields with unit Frechet margins on regular grids.

All families are simulated exactly with the extremal-functions algorithm of
Dombry, Engelke and Oesting (2016). ``method="approx"`` selects a cheaper
approximation: a finite maximum over 1000 spectral functions for
Brown-Resnick/Smith, and the threshold stopping rule for Schlather models.

Randomness is always passed in as a seed (anything accepted by
``numpy.random.default_rng``). Independent sub-streams are derived by
appending counters to the seed, e.g. ``default_rng([seed, i])``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .spatial_core import (
    SQRT_2PI,
    DomainError,
    Family,
    ParameterVector,
    correlation,
    variogram_powered,
)

__all__ = [
    "SimulationError",
    "GridSpec",
    "FieldSample",
    "PriorBox",
    "TrainingSet",
    "cholesky_factor",
    "gaussian_field",
    "simulate",
    "simulate_sites",
    "generate_training_set",
    "augment",
    "apply_transform",
    "save_dataset",
    "load_dataset",
    "export_csv",
]

MAX_SITES = 4096
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class SimulationError(RuntimeError):
    """Raised when a field cannot be simulated (e.g. a non-PD covariance)."""


@dataclass(frozen=True)
class GridSpec:
    """Regular ``nx`` x ``ny`` lattice spanning ``extent = (x0, x1, y0, y1)``.

    Sites include the corners, as in ``numpy.linspace``.
    """

    nx: int = 30
    ny: int = 30
    extent: tuple = (0.0, 30.0, 0.0, 30.0)

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))
        x0, x1, y0, y1 = self.extent
        if self.nx < 1 or self.ny < 1 or not (x1 > x0 or self.nx == 1) or not (y1 > y0 or self.ny == 1):
            raise DomainError(f"invalid grid {self}")

    @classmethod
    def square(cls, n: int, size: float | None = None) -> "GridSpec":
        size = float(n if size is None else size)
        return cls(n, n, (0.0, size, 0.0, size))

    @property
    def k(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple:
        return (self.nx, self.ny)

    @property
    def is_square(self) -> bool:
        x0, x1, y0, y1 = self.extent
        return self.nx == self.ny and math.isclose(x1 - x0, y1 - y0)

    def axes(self):
        x0, x1, y0, y1 = self.extent
        return np.linspace(x0, x1, self.nx), np.linspace(y0, y1, self.ny)

    def coords(self) -> np.ndarray:
        """Site coordinates, shape ``(k, 2)``, in row-major (x-major) order."""
        xs, ys = self.axes()
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "extent": list(self.extent)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["nx"]), int(d["ny"]), tuple(d["extent"]))


@dataclass
class FieldSample:
    grid: GridSpec
    values: np.ndarray = field(repr=False)
    params: ParameterVector | None = None
    seed: object = None
    info: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class PriorBox:
    """Independent uniform prior on ``lam`` and ``nu``."""

    lambda_range: tuple = (0.5, 5.0)
    nu_range: tuple = (0.3, 1.8)

    def __post_init__(self):
        (la, lb), (na, nb) = self.lambda_range, self.nu_range
        if not (la < lb and na < nb):
            raise DomainError(f"prior ranges need a < b, got {self.lambda_range}, {self.nu_range}")
        if la < 0 or na < 0:
            raise DomainError("prior ranges must be non-negative")

    def check_family(self, family: Family) -> None:
        if family is Family.SMITH:
            raise DomainError("use a Brown-Resnick prior box for Smith models")
        if family is not Family.SCHLATHER_WHITTLE_MATERN and self.nu_range[1] > 2:
            raise DomainError(f"nu range {self.nu_range} exceeds (0, 2] for {family.value}")

    def sample(self, n: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        lam = _open_uniform(rng, *self.lambda_range, n)
        nu = _open_uniform(rng, *self.nu_range, n)
        return np.column_stack([lam, nu])

    def contains(self, params) -> np.ndarray:
        params = np.atleast_2d(params)
        (la, lb), (na, nb) = self.lambda_range, self.nu_range
        return (params[:, 0] >= la) & (params[:, 0] <= lb) & (params[:, 1] >= na) & (params[:, 1] <= nb)

    def to_dict(self) -> dict:
        return {"lambda_range": list(self.lambda_range), "nu_range": list(self.nu_range)}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorBox":
        return cls(tuple(d["lambda_range"]), tuple(d["nu_range"]))


def _open_uniform(rng, a, b, n):
    # uniform on (a, b): numpy's [a, b) can return a, which may be inadmissible (0)
    u = rng.uniform(a, b, n)
    return np.where(u <= a, np.nextafter(a, b), u)


@dataclass
class TrainingSet:
    """Parameter-field pairs. ``fields`` may be a read-only memmap."""

    params: np.ndarray
    fields: np.ndarray = field(repr=False)
    family: Family
    grid: GridSpec
    prior: PriorBox | None = None
    seed: object = None
    val_fraction: float = 0.2
    families: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.params)

    def split(self):
        """Indices of the training and validation parts (validation = tail)."""
        n = len(self)
        n_val = int(round(self.val_fraction * n))
        if n > 1:
            n_val = min(max(n_val, 1 if self.val_fraction > 0 else 0), n - 1)
        else:
            n_val = 0
        return np.arange(n - n_val), np.arange(n - n_val, n)

    def parameter(self, i: int) -> ParameterVector:
        fam = self.family if self.families is None else Family(self.families[i])
        lam, nu = self.params[i]
        if fam is Family.SMITH:
            return ParameterVector(lam, 2.0, fam)
        return ParameterVector(lam, nu, fam)

    def sample(self, i: int) -> FieldSample:
        return FieldSample(self.grid, np.asarray(self.fields[i]), self.parameter(i))

    def manifest(self) -> dict:
        return {
            "format": "genmaxstable-dataset",
            "version": 1,
            "grid": self.grid.to_dict(),
            "family": self.family.value,
            "families": None if self.families is None else [str(f) for f in self.families],
            "prior": None if self.prior is None else self.prior.to_dict(),
            "seed": _jsonable_seed(self.seed),
            "count": len(self),
            "val_fraction": self.val_fraction,
            "dtype": "float64",
            "byte_order": "little",
        }

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.params, dtype="<f8").tobytes())
        for i in range(len(self)):
            h.update(np.ascontiguousarray(self.fields[i], dtype="<f8").tobytes())
        return h.hexdigest()


def _jsonable_seed(seed):
    if seed is None or isinstance(seed, (int, str)):
        return seed
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return str(seed)


# --------------------------------------------------------------------------
# Gaussian fields


def cholesky_factor(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with diagonal jitter escalation 1e-10 -> 1e-6.

    Jitter is relative to the mean diagonal.
    """
    cov = np.asarray(cov, dtype=float)
    scale = float(np.mean(np.diag(cov))) if cov.size else 1.0
    scale = scale if scale > 0 else 1.0
    for jit in JITTERS:
        try:
            return np.linalg.cholesky(cov + jit * scale * np.eye(len(cov)))
        except np.linalg.LinAlgError:
            continue
    raise SimulationError(
        f"covariance of size {len(cov)} is not positive definite even with jitter {JITTERS[-1]:g}"
    )


def gaussian_field(grid, kernel, seed=None, n: int | None = None) -> np.ndarray:
    """Centered Gaussian field(s) with correlation ``kernel(h)`` on ``grid``.

    Parameters
    ----------
    grid : GridSpec or array of shape (k, 2)
    kernel : callable mapping a distance array to correlations/covariances
    n : number of independent draws; ``None`` returns a single field

    Returns
    -------
    array of shape ``grid.shape`` (or ``(n,) + grid.shape``); ``(k,)`` /
    ``(n, k)`` when coordinates were given.
    """
    coords = grid.coords() if isinstance(grid, GridSpec) else np.asarray(grid, dtype=float)
    L = cholesky_factor(kernel(cdist(coords, coords)))
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((1 if n is None else n, len(coords))) @ L.T
    shape = grid.shape if isinstance(grid, GridSpec) else (len(coords),)
    out = draws.reshape((-1,) + shape)
    return out[0] if n is None else out


# --------------------------------------------------------------------------
# max-stable simulation


def _schlather_threshold(p, coords, rng, n_rep):
    # Poisson points are consumed until xi * sqrt(2 pi) drops below the running
    # minimum. Y = sqrt(2 pi) max(0, eps) is not bounded by sqrt(2 pi), so this
    # misses rare large spectral values and is only approximate.
    k = len(coords)
    L = cholesky_factor(correlation(cdist(coords, coords), p))
    Z = np.zeros((n_rep, k))
    gam = np.zeros(n_rep)
    count = np.zeros(n_rep, dtype=np.int64)
    active = np.arange(n_rep)
    while active.size:
        gam[active] += rng.exponential(size=active.size)
        xi = 1.0 / gam[active]
        Y = SQRT_2PI * np.maximum(rng.standard_normal((active.size, k)) @ L.T, 0.0)
        Z[active] = np.maximum(Z[active], xi[:, None] * Y)
        count[active] += 1
        keep = xi * SQRT_2PI > Z[active].min(axis=1)
        active = active[keep]
    return Z, {"poisson_points": count}


class _SchlatherSampler:
    """Spectral functions normalised at site j (extremal-t with alpha = 1).

    ``Y(x) = max(0, T(x))`` with ``T`` Student with 2 degrees of freedom,
    location ``rho(x - x_j)`` and scale ``(R - rho_j rho_j') / 2``; built from
    one Cholesky factor of ``R`` via ``eps - rho_j eps(x_j)``.
    """

    def __init__(self, p, coords):
        self.R = correlation(cdist(coords, coords), p)
        self.L = cholesky_factor(self.R)

    def draw(self, rng, n, j):
        eps = rng.standard_normal((n, len(self.R))) @ self.L.T
        chi2 = 2.0 * rng.exponential(size=(n, 1))
        rho = self.R[j]
        T = rho + (eps - rho * eps[:, j : j + 1]) / np.sqrt(chi2)
        T[:, j] = 1.0
        return np.maximum(T, 0.0)


class _IncrementSampler:
    """Gaussian W with Var(W(x) - W(y)) = 2 gamma(|x - y|), W(anchor) = 0."""

    def __init__(self, p, coords):
        self.k = len(coords)
        self.p = p
        if p.nu == 2.0:
            # rank-2 case: W(x) = <x - x0, N> sqrt(2) / lam
            self.linear = (coords - coords[0]) * (math.sqrt(2.0) / p.lam)
            self.L = None
        else:
            self.linear = None
            rest = coords[1:]
            g0 = variogram_powered(np.linalg.norm(rest - coords[0], axis=1), p)
            cov = g0[:, None] + g0[None, :] - variogram_powered(cdist(rest, rest), p)
            self.L = cholesky_factor(cov)

    def draw(self, rng, n):
        if self.linear is not None:
            return rng.standard_normal((n, 2)) @ self.linear.T
        out = np.zeros((n, self.k))
        if self.k > 1:
            out[:, 1:] = rng.standard_normal((n, self.k - 1)) @ self.L.T
        return out


class _BrownResnickSampler:
    """Spectral functions ``exp(W - W(x_j) - gamma(x - x_j))``, equal to 1 at site j."""

    def __init__(self, p, coords):
        self.inc = _IncrementSampler(p, coords)
        self.gam = variogram_powered(cdist(coords, coords), p)

    def draw(self, rng, n, j):
        W = self.inc.draw(rng, n)
        Y = np.exp(W - W[:, j : j + 1] - self.gam[j])
        Y[:, j] = 1.0
        return Y


def _extremal_functions(sampler, k, rng, n_rep):
    """Exact simulation: extremal functions site by site, vectorised over replicates."""
    Z = np.zeros((n_rep, k))
    count = np.zeros(n_rep, dtype=np.int64)
    for j in range(k):
        gam = rng.exponential(size=n_rep)
        active = np.flatnonzero(1.0 / gam > Z[:, j])
        while active.size:
            zeta = 1.0 / gam[active]
            cand = zeta[:, None] * sampler.draw(rng, active.size, j)
            count[active] += 1
            if j == 0:
                ok = np.ones(active.size, dtype=bool)
            else:
                ok = np.all(cand[:, :j] < Z[active, :j], axis=1)
            rows = active[ok]
            Z[rows] = np.maximum(Z[rows], cand[ok])
            gam[active] += rng.exponential(size=active.size)
            active = active[1.0 / gam[active] > Z[active, j]]
    return Z, count


def _brown_resnick_exact(p, coords, rng, n_rep):
    Z, count = _extremal_functions(_BrownResnickSampler(p, coords), len(coords), rng, n_rep)
    return Z, {"spectral_functions": count}


def _schlather_exact(p, coords, rng, n_rep):
    Z, count = _extremal_functions(_SchlatherSampler(p, coords), len(coords), rng, n_rep)
    return Z, {"poisson_points": count}


def _brown_resnick_approx(p, coords, rng, n_rep, n_spectral=1000):
    k = len(coords)
    center = coords.mean(axis=0)
    # anchor at the site closest to the centre to keep variances small
    order = np.argsort(np.linalg.norm(coords - center, axis=1))
    coords_c = coords[order]
    sampler = _IncrementSampler(p, coords_c)
    drift = variogram_powered(np.linalg.norm(coords_c - coords_c[0], axis=1), p)
    Z = np.zeros((n_rep, k))
    for r in range(n_rep):
        gam = np.cumsum(rng.exponential(size=n_spectral))
        W = sampler.draw(rng, n_spectral)
        Zc = np.max(np.exp(W - drift) / gam[:, None], axis=0)
        Z[r, order] = Zc
    return Z, {"spectral_functions": np.full(n_rep, n_spectral)}


def simulate_sites(p: ParameterVector, coords, seed=None, n_rep: int = 1,
                   method: str = "exact", n_spectral: int = 1000):
    """Simulate ``n_rep`` independent replicates at arbitrary sites.

    Returns
    -------
    Z : array (n_rep, k)
    info : dict with per-replicate counts of Poisson points / spectral functions
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if len(coords) > MAX_SITES:
        raise DomainError(f"at most {MAX_SITES} sites are supported, got {len(coords)}")
    rng = np.random.default_rng(seed)
    if method not in ("exact", "approx"):
        raise DomainError(f"unknown simulation method {method!r}")
    if p.family.is_schlather:
        sim = _schlather_exact if method == "exact" else _schlather_threshold
        Z, info = sim(p, coords, rng, n_rep)
    elif method == "exact":
        Z, info = _brown_resnick_exact(p, coords, rng, n_rep)
    else:
        Z, info = _brown_resnick_approx(p, coords, rng, n_rep, n_spectral)
    return Z, info


def simulate(p: ParameterVector, grid: GridSpec | None = None, seed=None,
             method: str = "exact", n_spectral: int = 1000) -> FieldSample:
    """One realization of the max-stable process on ``grid``."""
    grid = grid or GridSpec()
    Z, info = simulate_sites(p, grid.coords(), seed, 1, method, n_spectral)
    return FieldSample(grid, Z[0].reshape(grid.shape), p, seed, {k: int(v[0]) for k, v in info.items()})


# --------------------------------------------------------------------------
# training sets


def _params_for(family: Family, lam: float, nu: float) -> ParameterVector:
    if family is Family.SMITH:
        return ParameterVector(lam, 2.0, family)
    return ParameterVector(lam, nu, family)


def generate_training_set(prior: PriorBox, n: int, family, grid: GridSpec | None = None,
                          seed=0, out_dir=None, memory_budget: int = 2**27,
                          val_fraction: float = 0.2, method: str = "exact",
                          params: np.ndarray | None = None) -> TrainingSet:
    """Draw ``n`` parameters from ``prior`` and simulate one field for each.

    Field ``i`` uses the sub-stream ``[seed, 1, i]``; the prior draws use
    ``[seed, 0]``. If ``out_dir`` is given, or ``n * k * 8`` bytes exceed
    ``memory_budget``, fields are streamed to ``out_dir/fields.bin`` and the
    returned set holds a read-only memmap.
    """
    if n < 1:
        raise DomainError("training set size must be >= 1")
    family = Family.parse(family)
    grid = grid or GridSpec()
    if params is None:
        prior.check_family(family)
        params = prior.sample(n, [seed, 0] if isinstance(seed, int) else seed)
    params = np.asarray(params, dtype=float)
    if family is Family.SMITH:
        params[:, 1] = 2.0
    coords = grid.coords()
    stream = out_dir is not None or n * grid.k * 8 > memory_budget
    if stream and out_dir is None:
        raise DomainError("training set exceeds the memory budget; pass out_dir to stream it")
    ts = TrainingSet(params, None, family, grid, prior, seed, val_fraction)
    if stream:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "fields.bin", "wb")
    else:
        fields = np.empty((n,) + grid.shape)
    try:
        for i in range(n):
            p = _params_for(family, *params[i])
            try:
                Z, _ = simulate_sites(p, coords, _substream(seed, 1, i), 1, method)
            except Exception as exc:
                raise SimulationError(f"simulation {i} failed for {p}: {exc}") from exc
            if stream:
                fh.write(np.ascontiguousarray(Z[0], dtype="<f8").tobytes())
            else:
                fields[i] = Z[0].reshape(grid.shape)
    finally:
        if stream:
            fh.close()
    if stream:
        _write_meta(ts, out_dir)
        return load_dataset(out_dir)
    ts.fields = fields
    return ts


def _substream(seed, *counters):
    if seed is None:
        return None
    base = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    return base + list(counters)


# --------------------------------------------------------------------------
# augmentation


def apply_transform(values: np.ndarray, mask) -> np.ndarray:
    """Apply ``(rotate180, vflip, hflip)`` flags to the last two axes."""
    rot, vflip, hflip = (bool(m) for m in mask)
    out = values
    if rot:
        out = out[..., ::-1, ::-1]
    if vflip:
        out = out[..., ::-1, :]
    if hflip:
        out = out[..., :, ::-1]
    return np.ascontiguousarray(out)


def augment_masks(n: int, seed=None, p_rot: float = 0.5, p_vflip: float = 0.3,
                  p_hflip: float = 0.2) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=(n, 3))
    return u < np.array([p_rot, p_vflip, p_hflip])


def augment(fs: FieldSample, seed=None, p_rot: float = 0.5, p_vflip: float = 0.3,
            p_hflip: float = 0.2) -> FieldSample:
    """Distance-preserving random flips and 180 degree rotation of a square field."""
    if not fs.grid.is_square:
        raise DomainError("augmentation needs a square grid")
    mask = augment_masks(1, seed, p_rot, p_vflip, p_hflip)[0]
    info = dict(fs.info, augment_mask=mask.tolist())
    return FieldSample(fs.grid, apply_transform(fs.values, mask), fs.params, fs.seed, info)


def pairwise_distances(grid: GridSpec) -> np.ndarray:
    return pdist(grid.coords())


# --------------------------------------------------------------------------
# dataset directories: manifest.json + params.bin + fields.bin (<f8, row-major)


def _write_meta(ts: TrainingSet, path: Path) -> None:
    with open(path / "params.bin", "wb") as fh:
        fh.write(np.ascontiguousarray(ts.params, dtype="<f8").tobytes())
    with open(path / "manifest.json", "w") as fh:
        json.dump(ts.manifest(), fh, indent=2, sort_keys=True)


def save_dataset(ts: TrainingSet, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "fields.bin", "wb") as fh:
        for i in range(len(ts)):
            fh.write(np.ascontiguousarray(ts.fields[i], dtype="<f8").tobytes())
    _write_meta(ts, path)
    return path


def load_dataset(path, mmap: bool = True) -> TrainingSet:
    path = Path(path)
    with open(path / "manifest.json") as fh:
        man = json.load(fh)
    grid = GridSpec.from_dict(man["grid"])
    n = int(man["count"])
    params = np.fromfile(path / "params.bin", dtype="<f8").reshape(n, 2)
    shape = (n,) + grid.shape
    if mmap:
        fields = np.memmap(path / "fields.bin", dtype="<f8", mode="r", shape=shape)
    else:
        fields = np.fromfile(path / "fields.bin", dtype="<f8").reshape(shape)
    prior = PriorBox.from_dict(man["prior"]) if man.get("prior") else None
    fams = man.get("families")
    return TrainingSet(
        params, fields, Family(man["family"]), grid, prior, man.get("seed"),
        float(man.get("val_fraction", 0.2)), None if fams is None else np.array(fams),
    )


def export_csv(ts: TrainingSet, path) -> Path:
    """Write ``params.csv`` (index, lambda, nu) and ``fields.csv`` (index, ix, iy, value)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "params.csv", "w") as fh:
        fh.write("index,lambda,nu\n")
        for i, (lam, nu) in enumerate(ts.params):
            fh.write(f"{i},{lam!r},{nu!r}\n")
    ix, iy = np.meshgrid(np.arange(ts.grid.nx), np.arange(ts.grid.ny), indexing="ij")
    with open(path / "fields.csv", "w") as fh:
        fh.write("index,ix,iy,value\n")
        for i in range(len(ts)):
            vals = np.asarray(ts.fields[i])
            rows = np.column_stack([np.full(ix.size, i), ix.ravel(), iy.ravel()])
            for (a, b, c), v in zip(rows, vals.ravel()):
                fh.write(f"{a},{b},{c},{v!r}\n")
    return path
