"""Proper scoring rules and error metrics for posterior samples.

All scores are negatively oriented (lower is better).

``energy_score`` only uses broadcasting, ``**`` and ``.sum``/``.mean`` so the
same function serves numpy arrays and torch tensors (the training loss calls
it directly).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .spatial_core import (
    DomainError,
    Family,
    HGrid,
    ParameterVector,
    ThetaCurve,
    bivariate_log_density,
    theta,
)

__all__ = [
    "PosteriorSample",
    "IntervalEstimate",
    "energy_score",
    "functional_energy_score",
    "interval_score",
    "integrated_interval_score",
    "mse_theta",
    "log_score",
    "LogScoreResult",
    "metric_record",
]


@dataclass
class IntervalEstimate:
    alpha: float
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise DomainError("interval lower bound exceeds upper bound")


@dataclass
class PosteriorSample:
    """``m`` draws of parameters (``kind="params"``, shape (m, 2)) or of
    theta curves (``kind="theta"``, shape (m, k))."""

    values: np.ndarray = field(repr=False)
    kind: str = "params"
    family: Family | None = None
    grid: HGrid | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in ("params", "theta"):
            raise DomainError(f"unknown posterior kind {self.kind!r}")
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise DomainError("a posterior sample needs at least 2 draws")
        if self.kind == "params" and self.values.shape[1] != 2:
            raise DomainError("parameter draws must have two columns (lambda, nu)")
        if self.kind == "theta" and self.grid is not None and self.values.shape[1] != self.grid.k:
            raise DomainError("theta draws do not match the distance grid")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def interval(self, alpha: float = 0.05) -> IntervalEstimate:
        lo, hi = np.quantile(self.values, [alpha / 2, 1 - alpha / 2], axis=0)
        return IntervalEstimate(alpha, lo, hi)

    def theta_draws(self, grid: HGrid | None = None) -> np.ndarray:
        """Theta curves of every draw; parameter draws are mapped through ``theta``."""
        if self.kind == "theta":
            return self.values
        grid = grid or self.grid or HGrid()
        if self.family is None:
            raise DomainError("mapping parameter draws to theta needs a model family")
        return theta_curves(self.values, self.family, grid)


def theta_curves(params: np.ndarray, family: Family, grid: HGrid) -> np.ndarray:
    """``theta(h_i; params_j)`` for an array of parameter rows, shape (m, k)."""
    params = np.atleast_2d(params)
    h = grid.points
    out = np.empty((len(params), grid.k))
    for j, (lam, nu) in enumerate(params):
        p = ParameterVector(lam, 2.0 if family is Family.SMITH else nu, family)
        out[j] = theta(h, p)
    return out


def energy_score(samples, truth):
    """Unbiased energy score estimator with beta = 1.

    ``(1/m) sum_j |x_j - y| - 1/(2 m (m-1)) sum_{j != k} |x_j - x_k|``; the
    double sum runs over ordered pairs, computed as twice the sum over j < k.

    Parameters
    ----------
    samples : array (..., m, d)
    truth : array (..., d)

    Returns
    -------
    array (...) of scores (a float for unbatched input).
    """
    if samples.ndim < 2:
        raise DomainError("samples must have shape (..., m, d)")
    m, d = samples.shape[-2], samples.shape[-1]
    if m < 2:
        raise DomainError("the energy score estimator needs m >= 2 samples")
    if truth.shape[-1] != d or tuple(truth.shape[:-1]) != tuple(samples.shape[:-2]):
        raise DomainError(f"dimension mismatch: samples {tuple(samples.shape)}, truth {tuple(truth.shape)}")
    fit = (((samples - truth[..., None, :]) ** 2).sum(-1) ** 0.5).mean(-1)
    iu, ju = np.triu_indices(m, k=1)
    spread = (((samples[..., iu, :] - samples[..., ju, :]) ** 2).sum(-1) ** 0.5).sum(-1)
    out = fit - spread / (m * (m - 1))
    if isinstance(out, np.ndarray) and out.ndim == 0:
        return float(out)
    return out


def _curve_values(c, grid=None):
    if isinstance(c, ThetaCurve):
        if grid is not None and c.grid != grid:
            raise DomainError("theta curves live on different distance grids")
        return c.values, c.grid
    return np.asarray(c, dtype=float), grid


def functional_energy_score(curves, truth, grid: HGrid | None = None) -> float:
    """Energy score of ``m`` theta curves against the true curve (raw Euclidean norm).

    ``curves`` is a sequence of :class:`ThetaCurve` or an array (m, k).
    """
    if isinstance(truth, ThetaCurve):
        grid = truth.grid if grid is None else grid
        if truth.grid != grid:
            raise DomainError("theta curves live on different distance grids")
        t = truth.values
    else:
        t = np.asarray(truth, dtype=float)
    if isinstance(curves, np.ndarray):
        arr = curves
    else:
        arr = np.stack([_curve_values(c, grid)[0] for c in curves])
    if arr.shape[-1] != t.shape[-1]:
        raise DomainError("theta curves live on different distance grids")
    return energy_score(arr, t)


def interval_score(lower, upper, alpha: float, x):
    """Interval score of the central (1 - alpha) interval ``[lower, upper]``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.asarray(x, dtype=float)
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    if np.any(lower > upper):
        raise DomainError("interval lower bound exceeds upper bound")
    score = (upper - lower) + (2.0 / alpha) * (lower - x) * (x < lower) + (2.0 / alpha) * (x - upper) * (x > upper)
    return float(score) if score.ndim == 0 else score


def integrated_interval_score(lower, upper, alpha: float, truth, grid: HGrid | None = None) -> float:
    """Riemann sum ``sum_i IS(l(h_i), u(h_i); theta(h_i)) * dh``."""
    lo, grid = _curve_values(lower, grid)
    hi, grid = _curve_values(upper, grid)
    t, grid = _curve_values(truth, grid)
    if grid is None:
        raise DomainError("integrated interval score needs the distance grid")
    if not (lo.shape == hi.shape == t.shape == (grid.k,)):
        raise DomainError("curves do not match the distance grid")
    return float(np.sum(interval_score(lo, hi, alpha, t)) * grid.dh)


def mse_theta(estimate, truth, grid: HGrid | None = None) -> float:
    """Squared L2 distance of theta curves on the grid, ``sum (diff)^2 * dh``.

    ``estimate`` and ``truth`` may each be a :class:`ParameterVector`, a
    :class:`ThetaCurve` or an array of curve values.
    """
    if grid is None:
        for obj in (estimate, truth):
            if isinstance(obj, ThetaCurve):
                grid = obj.grid
                break
        else:
            grid = HGrid()

    def values(obj):
        if isinstance(obj, ParameterVector):
            return theta(grid.points, obj)
        return _curve_values(obj, grid)[0]

    a, b = values(estimate), values(truth)
    if a.shape != (grid.k,) or b.shape != (grid.k,):
        raise DomainError("curves do not match the distance grid")
    return float(np.sum((a - b) ** 2) * grid.dh)


@dataclass
class LogScoreResult:
    value: float
    n_pairs: int
    n_underflow: int


def site_pairs(coords: np.ndarray, cutoff: float):
    """Index pairs ``i < j`` with distance ``<= cutoff`` and their distances."""
    from scipy.spatial import cKDTree

    tree = cKDTree(coords)
    pairs = tree.query_pairs(cutoff, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    d = np.linalg.norm(coords[pairs[:, 0]] - coords[pairs[:, 1]], axis=1)
    return pairs, d


def log_score(p: ParameterVector, field, coords=None, cutoff: float = 5.0,
              max_pairs: int = 10_000, seed=0) -> LogScoreResult:
    """Mean negative bivariate log density over site pairs of one observed field.

    Pairs within ``cutoff`` are used, subsampled (without replacement, seeded)
    to at most ``max_pairs``. Pairs where the density underflows contribute
    ``+inf`` and are counted in ``n_underflow``.
    """
    from .simulator import FieldSample

    if isinstance(field, FieldSample):
        coords = field.grid.coords() if coords is None else coords
        z = np.asarray(field.values, dtype=float).ravel()
    else:
        z = np.asarray(field, dtype=float).ravel()
    if coords is None:
        raise DomainError("site coordinates are required")
    pairs, d = site_pairs(np.asarray(coords, dtype=float), cutoff)
    if len(pairs) > max_pairs:
        idx = np.sort(np.random.default_rng(seed).choice(len(pairs), max_pairs, replace=False))
        pairs, d = pairs[idx], d[idx]
    if len(pairs) == 0:
        raise DomainError("no site pairs within the cutoff distance")
    ld = bivariate_log_density(z[pairs[:, 0]], z[pairs[:, 1]], d, p)
    bad = ~np.isfinite(ld)
    value = math.inf if bad.any() else float(-np.mean(ld))
    return LogScoreResult(value, len(pairs), int(bad.sum()))


def metric_record(metric: str, value: float, std: float | None = None, scenario: str = "",
                  method: str = "", seed=None) -> dict:
    """Flat JSON-ready metric record."""
    return {
        "metric": metric,
        "value": None if value is None or not np.isfinite(value) else float(value),
        "std": None if std is None or not np.isfinite(std) else float(std),
        "scenario": scenario,
        "method": method,
        "seed": seed,
    }


def dumps_records(records) -> str:
    return json.dumps(list(records), indent=2)
