"""Closed-form dependence machinery for stationary isotropic max-stable models.

Everything here is a pure function of its arguments. Distances ``h`` and
marginal values ``z`` may be scalars or numpy arrays and broadcast together.

Supported families
------------------
brown-resnick
    Spectral process ``exp(W(x) - gamma(x))`` with semivariogram
    ``gamma(h) = (h / lam) ** nu``, ``nu`` in (0, 2].
schlather-powexp, schlather-whittle-matern
    Spectral process ``sqrt(2 pi) * max(0, eps(x))`` with ``eps`` a standard
    Gaussian field with powered exponential or Whittle-Matern correlation.
smith
    Brown-Resnick with ``nu = 2`` and ``lam = sqrt(2 sigma)`` (isotropic
    covariance ``sigma * I``).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.stats import norm

__all__ = [
    "DomainError",
    "Family",
    "ParameterVector",
    "HGrid",
    "ThetaCurve",
    "variogram_powered",
    "corr_powexp",
    "corr_whittle_matern",
    "correlation",
    "theta",
    "theta_curve",
    "theta_mc",
    "bivariate_cdf",
    "bivariate_density",
    "bivariate_log_density",
    "bivariate_density_fd",
    "smith_to_brown_resnick",
]

SQRT_2PI = math.sqrt(2.0 * math.pi)

# switch points of the Brown-Resnick CDF between the generic and limit forms
A_SMALL = 1e-8
A_LARGE = 1e8


class DomainError(ValueError):
    """Raised for inadmissible parameters or arguments outside the support."""


class Family(str, enum.Enum):
    BROWN_RESNICK = "brown-resnick"
    SCHLATHER_POWEXP = "schlather-powexp"
    SCHLATHER_WHITTLE_MATERN = "schlather-whittle-matern"
    SMITH = "smith"

    @classmethod
    def parse(cls, value: "str | Family") -> "Family":
        if isinstance(value, Family):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {
            "br": cls.BROWN_RESNICK,
            "brownresnick": cls.BROWN_RESNICK,
            "powexp": cls.SCHLATHER_POWEXP,
            "schlather": cls.SCHLATHER_POWEXP,
            "whittle-matern": cls.SCHLATHER_WHITTLE_MATERN,
            "whitmat": cls.SCHLATHER_WHITTLE_MATERN,
        }
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise DomainError(f"unknown model family {value!r}") from None

    @property
    def is_schlather(self) -> bool:
        return self in (Family.SCHLATHER_POWEXP, Family.SCHLATHER_WHITTLE_MATERN)

    @property
    def is_brown_resnick(self) -> bool:
        return self in (Family.BROWN_RESNICK, Family.SMITH)


@dataclass(frozen=True)
class ParameterVector:
    """Range ``lam`` and smoothness ``nu`` of a max-stable model.

    A Smith model is stored through its Brown-Resnick equivalent
    (``lam = sqrt(2 sigma)``, ``nu = 2``); use :meth:`smith` to build one from
    ``sigma`` and :attr:`sigma` to read it back.
    """

    lam: float
    nu: float
    family: Family = Family.BROWN_RESNICK

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "nu", float(self.nu))
        check_admissible(self.lam, self.nu, self.family)

    @classmethod
    def smith(cls, sigma: float) -> "ParameterVector":
        if not sigma > 0:
            raise DomainError(f"Smith scale must be positive, got {sigma}")
        return cls(math.sqrt(2.0 * sigma), 2.0, Family.SMITH)

    @property
    def sigma(self) -> float:
        if self.family is not Family.SMITH:
            raise AttributeError("sigma is only defined for the Smith family")
        return self.lam**2 / 2.0

    def as_array(self) -> np.ndarray:
        return np.array([self.lam, self.nu])

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "nu": self.nu, "family": self.family.value}


def check_admissible(lam, nu, family: Family) -> None:
    """Raise :class:`DomainError` unless ``(lam, nu)`` is admissible for ``family``."""
    lam = np.asarray(lam, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise DomainError(f"range parameter must be positive and finite, got {lam}")
    if family is Family.SCHLATHER_WHITTLE_MATERN:
        ok = np.all(np.isfinite(nu)) and np.all(nu > 0)
    elif family is Family.SMITH:
        ok = np.all(nu == 2.0)
    else:
        ok = np.all(nu > 0) and np.all(nu <= 2)
    if not ok:
        raise DomainError(f"smoothness {nu} not admissible for {family.value}")


@dataclass(frozen=True)
class HGrid:
    """Regular distance grid ``h_i = i * dh`` for ``i = 1..k``."""

    dh: float = 0.1
    k: int = 425

    def __post_init__(self):
        if not self.dh > 0 or self.k < 1:
            raise DomainError("HGrid needs dh > 0 and k >= 1")

    @property
    def points(self) -> np.ndarray:
        return self.dh * np.arange(1, self.k + 1)

    @property
    def upper(self) -> float:
        return self.dh * self.k

    def __len__(self) -> int:
        return self.k


@dataclass
class ThetaCurve:
    """Extremal coefficient values on an :class:`HGrid`."""

    grid: HGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.k,):
            raise DomainError(
                f"curve has shape {self.values.shape}, grid has {self.grid.k} points"
            )

    @property
    def is_valid(self) -> bool:
        return bool(np.all((self.values >= 1.0) & (self.values <= 2.0)))

    @property
    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.values) >= 0))


def _nonneg(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if np.any(h < 0) or np.any(np.isnan(h)):
        raise DomainError("distances must be non-negative")
    return h


def variogram_powered(h, p: ParameterVector):
    """Semivariogram ``(h / lam) ** nu`` of the Brown-Resnick model."""
    if not p.family.is_brown_resnick:
        raise DomainError(f"variogram is defined for Brown-Resnick models, not {p.family.value}")
    h = _nonneg(h)
    return (h / p.lam) ** p.nu


def corr_powexp(h, p: ParameterVector):
    """Powered exponential correlation ``exp(-(h / lam) ** nu)``."""
    if p.family is not Family.SCHLATHER_POWEXP:
        raise DomainError(f"powered exponential kernel needs schlather-powexp, got {p.family.value}")
    h = _nonneg(h)
    return np.exp(-((h / p.lam) ** p.nu))


def _whittle_matern(h, lam: float, nu: float):
    x = np.asarray(h, dtype=float) / lam
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    # K_nu(x) = kve(nu, x) * exp(-x); the log form avoids overflow of x**nu
    log_val = (
        (1.0 - nu) * math.log(2.0)
        - special.gammaln(nu)
        + nu * np.log(xp)
        + np.log(special.kve(nu, xp))
        - xp
    )
    out[pos] = np.exp(log_val)
    return np.minimum(out, 1.0)


def corr_whittle_matern(h, p: ParameterVector):
    """Whittle-Matern correlation, continuously extended to 1 at ``h = 0``."""
    if p.family is not Family.SCHLATHER_WHITTLE_MATERN:
        raise DomainError(f"Whittle-Matern kernel needs schlather-whittle-matern, got {p.family.value}")
    h = _nonneg(h)
    return _whittle_matern(h, p.lam, p.nu)


def correlation(h, p: ParameterVector):
    """Correlation function of the Gaussian field behind a Schlather model."""
    if p.family is Family.SCHLATHER_POWEXP:
        return corr_powexp(h, p)
    if p.family is Family.SCHLATHER_WHITTLE_MATERN:
        return corr_whittle_matern(h, p)
    raise DomainError(f"{p.family.value} has no correlation kernel")


def _br_a(h, p: ParameterVector):
    # a^2 = 2 gamma(h)
    return np.sqrt(2.0 * variogram_powered(h, p))


def theta(h, p: ParameterVector):
    """Pairwise extremal coefficient ``theta(h)`` in [1, 2].

    Brown-Resnick and Smith: ``2 Phi(a / 2)`` with ``a**2 = 2 gamma(h)``.
    Schlather: ``1 + sqrt((1 - rho(h)) / 2)``, which is
    ``E[max(Y1, Y2)]`` for ``Y = sqrt(2 pi) max(0, eps)``.
    """
    if p.family.is_brown_resnick:
        return 2.0 * norm.cdf(_br_a(h, p) / 2.0)
    rho = correlation(h, p)
    return 1.0 + np.sqrt(np.clip((1.0 - rho) / 2.0, 0.0, None))


def theta_curve(p: ParameterVector, grid: HGrid | None = None) -> ThetaCurve:
    grid = grid or HGrid()
    return ThetaCurve(grid, theta(grid.points, p))


def theta_mc(h: float, p: ParameterVector, n_draws: int = 100_000, seed=None):
    """Monte Carlo estimate of ``E[max(Y(x1), Y(x2))]`` at distance ``h``.

    Returns
    -------
    (estimate, standard_error)
    """
    if n_draws < 10_000:
        raise DomainError("theta_mc needs at least 1e4 draws")
    h = float(_nonneg(h))
    rng = np.random.default_rng(seed)
    if p.family.is_brown_resnick:
        # Spectral functions normalised at x1: Y(x1) = 1 and
        # log Y(x2) ~ N(-gamma, 2 gamma). max(Y1, Y2) is lognormal-tailed, so
        # estimate through max = Y1 + Y2 - min with E[Y1] = E[Y2] = 1; min <= 1.
        g = float(variogram_powered(h, p))
        w = rng.standard_normal(n_draws) * math.sqrt(2.0 * g)
        m = np.minimum(1.0, np.exp(w - g))
        return float(2.0 - m.mean()), float(m.std(ddof=1) / math.sqrt(n_draws))
    rho = float(correlation(h, p))
    e1 = rng.standard_normal(n_draws)
    e2 = rho * e1 + math.sqrt(max(1.0 - rho * rho, 0.0)) * rng.standard_normal(n_draws)
    m = SQRT_2PI * np.maximum(np.maximum(e1, e2), 0.0)
    return float(m.mean()), float(m.std(ddof=1) / math.sqrt(n_draws))


def _check_z(z1, z2):
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if np.any(~(z1 > 0)) or np.any(~(z2 > 0)):
        raise DomainError("bivariate CDF/density need strictly positive arguments")
    return z1, z2


def _exponent_terms(z1, z2, h, p: ParameterVector):
    """Exponent measure V and its derivatives V1, V2, V12 at (z1, z2)."""
    z1, z2 = _check_z(z1, z2)
    h = _nonneg(h)
    z1, z2, h = np.broadcast_arrays(z1, z2, h)
    if p.family.is_brown_resnick:
        a = _br_a(h, p)
        # the limit branches are overwritten below; silence 0/0 there
        with np.errstate(divide="ignore", invalid="ignore"):
            a_safe = np.where((a < A_SMALL) | (a > A_LARGE), 1.0, a)
            lr = np.log(z2 / z1)
            u1 = a_safe / 2.0 + lr / a_safe
            u2 = a_safe / 2.0 - lr / a_safe
            P1, P2 = norm.cdf(u1), norm.cdf(u2)
            V = P1 / z1 + P2 / z2
            V1 = -P1 / z1**2
            V2 = -P2 / z2**2
            V12 = -norm.pdf(u1) / (a_safe * z1**2 * z2)
        small = a < A_SMALL
        large = a > A_LARGE
        if np.any(small):
            V = np.where(small, 1.0 / np.minimum(z1, z2), V)
            # complete dependence has no density; the mixed derivative degenerates
            V1 = np.where(small, np.where(z1 < z2, -1.0 / z1**2, 0.0), V1)
            V2 = np.where(small, np.where(z2 < z1, -1.0 / z2**2, 0.0), V2)
            V12 = np.where(small, 0.0, V12)
        if np.any(large):
            V = np.where(large, 1.0 / z1 + 1.0 / z2, V)
            V1 = np.where(large, -1.0 / z1**2, V1)
            V2 = np.where(large, -1.0 / z2**2, V2)
            V12 = np.where(large, 0.0, V12)
        return V, V1, V2, V12
    rho = correlation(h, p)
    # (z1 - z2)^2 + 2 (1 - rho) z1 z2 avoids cancellation as rho -> 1
    c = np.sqrt(np.maximum((z1 - z2) ** 2 + 2.0 * (1.0 - rho) * z1 * z2, 0.0))
    V = (z1 + z2 + c) / (2.0 * z1 * z2)
    with np.errstate(divide="ignore", invalid="ignore"):
        V1 = -(1.0 + (z1 - rho * z2) / c) / (2.0 * z1**2)
        V2 = -(1.0 + (z2 - rho * z1) / c) / (2.0 * z2**2)
        V12 = -(1.0 - rho**2) / (2.0 * c**3)
    return V, V1, V2, V12


def bivariate_cdf(z1, z2, h, p: ParameterVector):
    """``P(Z(x1) <= z1, Z(x2) <= z2)`` for two sites at distance ``h``."""
    V = _exponent_terms(z1, z2, h, p)[0]
    return np.exp(-V)


def bivariate_log_density(z1, z2, h, p: ParameterVector):
    """Log of the bivariate density ``exp(-V) (V1 V2 - V12)``.

    Returns ``-inf`` where the density underflows or is degenerate.
    """
    V, V1, V2, V12 = _exponent_terms(z1, z2, h, p)
    inner = V1 * V2 - V12
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(inner > 0, -V + np.log(np.where(inner > 0, inner, 1.0)), -np.inf)
    if p.family.is_brown_resnick and not np.all(np.isfinite(out)):
        out = np.where(np.isfinite(out), out, _br_log_density_tail(z1, z2, h, p, V))
    return out


def _br_log_density_tail(z1, z2, h, p: ParameterVector, V):
    """Brown-Resnick log density in log space, for points where the linear form underflows.

    ``V1 V2 - V12 = P1 P2 / (z1 z2)^2 + phi(u1) / (a z1^2 z2)``, both terms positive.
    """
    z1, z2 = _check_z(z1, z2)
    z1, z2, h = np.broadcast_arrays(z1, z2, _nonneg(h))
    a = _br_a(h, p)
    regular = (a >= A_SMALL) & (a <= A_LARGE)
    a = np.where(regular, a, 1.0)
    l1, l2 = np.log(z1), np.log(z2)
    u1 = a / 2.0 + (l2 - l1) / a
    u2 = a / 2.0 - (l2 - l1) / a
    t1 = special.log_ndtr(u1) + special.log_ndtr(u2) - 2.0 * (l1 + l2)
    t2 = -0.5 * u1**2 - 0.5 * math.log(2.0 * math.pi) - np.log(a) - 2.0 * l1 - l2
    return np.where(regular, -V + np.logaddexp(t1, t2), -np.inf)


def bivariate_density(z1, z2, h, p: ParameterVector, check: bool = False, rtol: float = 1e-4):
    """Bivariate density of a max-stable pair.

    With ``check=True`` the analytic value is compared against
    :func:`bivariate_density_fd` and an ``ArithmeticError`` is raised if they
    disagree by more than ``rtol`` (relative).
    """
    V, V1, V2, V12 = _exponent_terms(z1, z2, h, p)
    dens = np.exp(-V) * np.maximum(V1 * V2 - V12, 0.0)
    if check:
        fd, noise = bivariate_density_fd(z1, z2, h, p, return_noise=True)
        excess = np.abs(dens - fd) - (rtol * np.abs(fd) + 10.0 * noise)
        if np.any(excess > 0):
            raise ArithmeticError(
                f"analytic and finite-difference densities disagree at {int(np.sum(excess > 0))} points"
            )
    return dens


def bivariate_density_fd(z1, z2, h, p: ParameterVector, rel_step: float = 1e-5,
                         return_noise: bool = False):
    """Central finite-difference mixed derivative of :func:`bivariate_cdf`.

    With ``return_noise=True`` also returns the rounding floor of the
    difference quotient (a few ulp of the CDF divided by the step area), below
    which the estimate carries no information.
    """
    z1, z2 = _check_z(z1, z2)
    e1 = rel_step * z1
    e2 = rel_step * z2
    F = lambda a, b: bivariate_cdf(a, b, h, p)
    F0 = F(z1, z2)
    num = F(z1 + e1, z2 + e2) - F(z1 + e1, z2 - e2) - F(z1 - e1, z2 + e2) + F(z1 - e1, z2 - e2)
    fd = num / (4.0 * e1 * e2)
    if return_noise:
        return fd, np.finfo(float).eps * F0 / (e1 * e2)
    return fd


def smith_to_brown_resnick(sigma: float) -> ParameterVector:
    """Brown-Resnick parameters equivalent to an isotropic Smith model."""
    if not sigma > 0:
        raise DomainError(f"Smith scale must be positive, got {sigma}")
    return ParameterVector(math.sqrt(2.0 * sigma), 2.0, Family.BROWN_RESNICK)
