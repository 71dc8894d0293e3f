import math

import mpmath
import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from genmaxstable.spatial_core import (
    A_LARGE,
    DomainError,
    Family,
    HGrid,
    ParameterVector,
    ThetaCurve,
    bivariate_cdf,
    bivariate_density,
    bivariate_density_fd,
    bivariate_log_density,
    corr_powexp,
    corr_whittle_matern,
    smith_to_brown_resnick,
    theta,
    theta_curve,
    theta_mc,
    variogram_powered,
)

from conftest import ALL_FAMILIES, make_params

BR = Family.BROWN_RESNICK
PE = Family.SCHLATHER_POWEXP
WM = Family.SCHLATHER_WHITTLE_MATERN

lams = st.floats(0.3, 8.0)
nus = st.floats(0.05, 2.0)
families = st.sampled_from(ALL_FAMILIES)


# ---- parameters -----------------------------------------------------------

@pytest.mark.parametrize("lam,nu,fam", [(0, 1, BR), (-1, 1, PE), (1, 0, BR), (1, 2.1, PE), (1, 1.5, Family.SMITH),
                                        (1, 0, WM), (math.nan, 1, BR)])
def test_inadmissible_parameters(lam, nu, fam):
    with pytest.raises(DomainError):
        ParameterVector(lam, nu, fam)


def test_whittle_matern_allows_large_nu():
    assert ParameterVector(1.0, 3.5, WM).nu == 3.5


def test_family_parse_aliases():
    assert Family.parse("brown_resnick") is BR
    assert Family.parse("whitmat") is WM
    with pytest.raises(DomainError):
        Family.parse("gauss")


def test_hgrid_default():
    g = HGrid()
    assert g.k == 425 and len(g.points) == 425
    assert g.points[0] == pytest.approx(0.1)
    assert g.points[-1] == pytest.approx(42.5)
    np.testing.assert_allclose(np.diff(g.points), 0.1)


# ---- variogram and kernels ----------------------------------------------

def test_variogram_examples():
    assert variogram_powered(0.0, ParameterVector(1.5, 1.0)) == 0.0
    for nu in (0.3, 1.0, 2.0):
        assert variogram_powered(2.5, ParameterVector(2.5, nu)) == pytest.approx(1.0)
    assert variogram_powered(2.0, ParameterVector(1.0, 2.0)) == pytest.approx(4.0)


def test_variogram_rejects_schlather_and_negative_h():
    with pytest.raises(DomainError):
        variogram_powered(1.0, ParameterVector(1, 1, PE))
    with pytest.raises(DomainError):
        variogram_powered(-0.1, ParameterVector(1, 1))


@given(lams, st.floats(0.05, 2.0))
def test_variogram_strictly_increasing(lam, nu):
    h = np.linspace(0.01, 40, 200)
    assert np.all(np.diff(variogram_powered(h, ParameterVector(lam, nu))) > 0)


def test_powexp_examples():
    p = ParameterVector(2.0, 0.7, PE)
    assert corr_powexp(0.0, p) == 1.0
    assert corr_powexp(2.0, p) == pytest.approx(math.exp(-1), abs=1e-15)
    assert corr_powexp(1e4, p) < 1e-30


def test_whittle_matern_half_is_exponential():
    h = HGrid().points
    for lam in (0.5, 1.7, 4.0):
        p = ParameterVector(lam, 0.5, WM)
        np.testing.assert_allclose(corr_whittle_matern(h, p), np.exp(-h / lam), rtol=0, atol=1e-10)
        np.testing.assert_allclose(corr_whittle_matern(h, p), corr_powexp(h, ParameterVector(lam, 1.0, PE)),
                                   atol=1e-10)


def test_whittle_matern_zero_lag():
    assert corr_whittle_matern(0.0, ParameterVector(1.0, 1.3, WM)) == 1.0
    assert corr_whittle_matern(1e-12, ParameterVector(1.0, 1.3, WM)) == pytest.approx(1.0)


# published K_1 values (Abramowitz & Stegun table 9.8)
K1_TABLE = {0.5: 1.656441120, 1.0: 0.6019072302, 2.0: 0.1398658818}


@pytest.mark.parametrize("x", sorted(K1_TABLE))
def test_whittle_matern_nu1_against_table(x):
    assert corr_whittle_matern(x, ParameterVector(1.0, 1.0, WM)) == pytest.approx(x * K1_TABLE[x], rel=1e-8)


@pytest.mark.parametrize("nu", [0.5, 1.0, 1.5])
@pytest.mark.parametrize("x", [0.5, 1.0, 2.0])
def test_whittle_matern_against_mpmath(nu, x):
    ref = 2 ** (1 - nu) / mpmath.gamma(nu) * mpmath.mpf(x) ** nu * mpmath.besselk(nu, x)
    assert corr_whittle_matern(x, ParameterVector(1.0, nu, WM)) == pytest.approx(float(ref), rel=1e-12)


def test_whittle_matern_three_halves_closed_form():
    h = np.linspace(0.1, 20, 50)
    ref = (1 + h) * np.exp(-h)
    np.testing.assert_allclose(corr_whittle_matern(h, ParameterVector(1.0, 1.5, WM)), ref, rtol=1e-12)


def test_whittle_matern_large_distance_no_overflow():
    v = corr_whittle_matern(np.array([500.0, 1e4]), ParameterVector(0.5, 3.0, WM))
    assert np.all(np.isfinite(v)) and np.all(v >= 0) and v[0] < 1e-100


# ---- extremal coefficient -------------------------------------------------

@pytest.mark.parametrize("fam", ALL_FAMILIES)
def test_theta_zero_lag(fam):
    assert theta(0.0, make_params(fam, 1.7, 0.8)) == pytest.approx(1.0)


def test_theta_independence_limit_br():
    assert theta(1e9, ParameterVector(1.0, 1.0)) == pytest.approx(2.0)


def test_theta_schlather_limit():
    # rho -> 0 gives 1 + sqrt(1/2); brute-force integral of E max(X1, X2, 0) for iid normals
    tail = integrate.quad(lambda t: 1 - norm.cdf(t) ** 2, 0, np.inf)[0]
    oracle = math.sqrt(2 * math.pi) * tail
    assert oracle == pytest.approx(1 + math.sqrt(0.5), rel=1e-9)
    assert theta(1e6, ParameterVector(1.0, 1.0, PE)) == pytest.approx(oracle, rel=1e-9)


def test_theta_smith_matches_appendix_form():
    # Smith: a^2 = h^2 / sigma
    sigma, h = 1.3, np.array([0.5, 2.0, 5.0])
    p = ParameterVector.smith(sigma)
    np.testing.assert_allclose(theta(h, p), 2 * norm.cdf(np.sqrt(h**2 / sigma) / 2), rtol=1e-13)


@given(families, lams, nus)
def test_theta_range_and_monotone(fam, lam, nu):
    p = make_params(fam, lam, nu)
    h = np.linspace(0, 60, 2000)
    t = theta(h, p)
    assert np.all(t >= 1) and np.all(t <= 2)
    assert np.all(np.diff(t) >= -1e-14)


def test_theta_curve_is_valid():
    c = theta_curve(ParameterVector(2.0, 1.0))
    assert isinstance(c, ThetaCurve) and c.is_valid and c.is_monotone


def test_theta_mc_examples():
    est, se = theta_mc(0.0, ParameterVector(2.25, 0.69, PE), 10**5, seed=1)
    assert est == pytest.approx(1.0, abs=3 * se + 1e-12)
    p = ParameterVector(1.5, 1.0)
    est, se = theta_mc(3.0, p, 10**5, seed=2)
    closed = 2 * norm.cdf(math.sqrt(2 * variogram_powered(3.0, p)) / 2)
    assert abs(est - closed) < 3 * se
    est, se = theta_mc(1e6, ParameterVector(1.0, 1.0, PE), 10**5, seed=3)
    assert abs(est - 1.7071067811865475) < 3 * se


def test_theta_mc_schlather_example():
    p = ParameterVector(2.25, 0.69, PE)
    est, se = theta_mc(3.0, p, 10**5, seed=4)
    assert abs(est - theta(3.0, p)) < 3 * se


def test_theta_mc_needs_enough_draws():
    with pytest.raises(DomainError):
        theta_mc(1.0, ParameterVector(1, 1), 9999)


def test_theta_mc_deterministic():
    p = ParameterVector(1, 1, WM)
    assert theta_mc(2.0, p, 10**4, seed=9) == theta_mc(2.0, p, 10**4, seed=9)


# ---- bivariate CDF and density --------------------------------------------

@pytest.mark.parametrize("fam", ALL_FAMILIES)
def test_cdf_diagonal(fam):
    p = make_params(fam, 2.0, 1.2)
    z = np.array([0.3, 1.0, 7.0])
    np.testing.assert_allclose(bivariate_cdf(z, z, 1.5, p), np.exp(-theta(1.5, p) / z), rtol=1e-12)


def test_cdf_br_limits():
    z1, z2 = 0.7, 2.3
    assert bivariate_cdf(z1, z2, 0.0, ParameterVector(1, 1)) == pytest.approx(math.exp(-1 / min(z1, z2)))
    far = 1e20  # a = sqrt(2) * far > A_LARGE
    assert math.sqrt(2) * far > A_LARGE
    assert bivariate_cdf(z1, z2, far, ParameterVector(1, 1)) == pytest.approx(math.exp(-1 / z1 - 1 / z2))


def test_cdf_branch_continuity():
    p = ParameterVector(1.0, 1.0)
    z1, z2 = 0.9, 1.4
    # a = sqrt(2 h); just either side of the small-a switch
    h_lo, h_hi = (0.99e-8) ** 2 / 2, (1.01e-8) ** 2 / 2
    assert bivariate_cdf(z1, z2, h_lo, p) == pytest.approx(bivariate_cdf(z1, z2, h_hi, p), rel=1e-8)


def test_cdf_rejects_nonpositive():
    with pytest.raises(DomainError):
        bivariate_cdf(0.0, 1.0, 1.0, ParameterVector(1, 1))


@given(families, lams, nus, st.floats(0.05, 20), st.floats(0.05, 20), st.floats(0.0, 30))
@example(Family.SCHLATHER_POWEXP, 1.0, 1.0, 2.546875, 2.5488048888958925, 0.0)
def test_cdf_monotone_and_limits(fam, lam, nu, z1, z2, h):
    p = make_params(fam, lam, nu)
    F = bivariate_cdf(np.array([z1, z1 * 1.1, z1]), np.array([z2, z2, z2 * 1.1]), h, p)
    assert F[1] >= F[0] - 1e-15 and F[2] >= F[0] - 1e-15
    assert bivariate_cdf(1e12, z2, h, p) == pytest.approx(math.exp(-1 / z2), rel=1e-9)
    assert bivariate_cdf(1e-4, z2, h, p) < 1e-100


@given(families, lams, nus, st.floats(0.05, 20), st.floats(0.05, 20), st.floats(0.01, 30))
def test_density_nonnegative(fam, lam, nu, z1, z2, h):
    assert bivariate_density(z1, z2, h, make_params(fam, lam, nu)) >= 0


def test_density_independence_factorises():
    z1 = np.array([0.4, 1.0, 3.0])
    z2 = np.array([2.0, 0.5, 6.0])
    f = bivariate_density(z1, z2, 1e20, ParameterVector(1, 1))
    uni = lambda z: z**-2 * np.exp(-1 / z)
    np.testing.assert_allclose(f, uni(z1) * uni(z2), rtol=1e-12)


@pytest.mark.parametrize("fam", ALL_FAMILIES)
def test_density_normalisation(fam):
    p = make_params(fam, 2.0, 1.1)
    t = np.linspace(np.log(0.01), np.log(1e5), 700)
    T1, T2 = np.meshgrid(t, t, indexing="ij")
    z1, z2 = np.exp(T1), np.exp(T2)
    g = bivariate_density(z1, z2, 1.8, p) * z1 * z2
    mass = integrate.trapezoid(integrate.trapezoid(g, t, axis=1), t)
    assert mass == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("fam", ALL_FAMILIES)
def test_density_check_passes_at_moderate_points(fam):
    p = make_params(fam, 2.0, 1.2)
    z1 = np.array([0.5, 1.0, 2.0, 4.0])
    z2 = np.array([1.0, 3.0, 0.7, 4.0])
    bivariate_density(z1, z2, 1.3, p, check=True)


def test_density_fd_agrees_in_double_precision():
    p = ParameterVector(2.0, 1.0, PE)
    f = bivariate_density(1.2, 0.8, 1.0, p)
    assert bivariate_density_fd(1.2, 0.8, 1.0, p) == pytest.approx(f, rel=1e-4)


# ---- Smith ---------------------------------------------------------------

@pytest.mark.parametrize("sigma,lam", [(0.5, 1.0), (2.0, 2.0), (4.5, 3.0)])
def test_smith_to_brown_resnick(sigma, lam):
    p = smith_to_brown_resnick(sigma)
    assert p.lam == pytest.approx(lam) and p.nu == 2.0 and p.family is BR


def test_smith_rejects_nonpositive():
    with pytest.raises(DomainError):
        smith_to_brown_resnick(0.0)


def test_smith_sigma_roundtrip():
    assert ParameterVector.smith(1.7).sigma == pytest.approx(1.7)


def test_br_log_density_far_tail_against_mpmath():
    mpmath = pytest.importorskip("mpmath")
    # near-complete dependence with very different margins: the linear form underflows
    p = ParameterVector(4.3, 2.0, Family.SMITH)
    z1, z2, h = 16.9, 0.62, 0.12
    ld = float(bivariate_log_density(z1, z2, h, p))
    assert np.isfinite(ld)
    with mpmath.workdps(60):
        a = mpmath.sqrt(2 * (mpmath.mpf(h) / mpmath.mpf(p.lam)) ** 2)
        Z1, Z2 = mpmath.mpf(z1), mpmath.mpf(z2)
        u1 = a / 2 + mpmath.log(Z2 / Z1) / a
        u2 = a / 2 - mpmath.log(Z2 / Z1) / a
        V = mpmath.ncdf(u1) / Z1 + mpmath.ncdf(u2) / Z2
        inner = mpmath.ncdf(u1) * mpmath.ncdf(u2) / (Z1 * Z2) ** 2 + mpmath.npdf(u1) / (a * Z1**2 * Z2)
        ref = float(-V + mpmath.log(inner))
    assert ref < -745  # the density itself is below double range
    assert ld == pytest.approx(ref, rel=1e-10)
