"""Reference estimators: pairwise likelihood, ABC and a point-estimate CNN."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit, logit

from .scoring import PosteriorSample, site_pairs
from .simulator import FieldSample, GridSpec, PriorBox, TrainingSet, _substream, simulate_sites
from .spatial_core import DomainError, Family, ParameterVector, bivariate_log_density

logger = logging.getLogger(__name__)

__all__ = [
    "PLConfig",
    "PLResult",
    "pairwise_loglik",
    "fit_pl",
    "triplet_summary",
    "downsample_bilinear",
    "ABCConfig",
    "ABCBank",
    "build_abc_bank",
    "abc",
    "fit_point_cnn",
]


# --------------------------------------------------------------------------
# pairwise likelihood


@dataclass
class PLConfig:
    weight_cutoff: float = 5.0
    n_starts: int = 20
    n_refine: int = 5
    max_iter: int = 400
    seed: int = 0
    start_box: tuple = ((0.5, 5.0), (0.3, 1.8))
    # flags estimates this close to the edge of the transformed domain
    boundary_tol: float = 1e-3


def _field_matrix(field, grid: GridSpec | None = None):
    """Replicates as rows: returns (values (R, k), coords (k, 2))."""
    if isinstance(field, FieldSample):
        grid = field.grid
        vals = np.asarray(field.values, dtype=float)
    else:
        vals = np.asarray(field, dtype=float)
    if grid is None:
        raise DomainError("a grid is needed to locate the sites")
    if vals.shape == grid.shape:
        vals = vals[None]
    if vals.shape[1:] != grid.shape and vals.shape[1:] != (grid.k,):
        raise DomainError(f"field shape {vals.shape} does not match grid {grid.shape}")
    return vals.reshape(len(vals), -1), grid.coords()


@dataclass
class _PairCache:
    pairs: np.ndarray
    dist: np.ndarray


def _pairs(coords, cutoff) -> _PairCache:
    if cutoff <= 0:
        return _PairCache(np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    # tiny slack so lattice pairs at exactly the cutoff are kept
    pairs, d = site_pairs(coords, cutoff * (1 + 1e-12))
    return _PairCache(pairs, d)


def pairwise_loglik(p: ParameterVector, field, cfg: PLConfig | None = None,
                    grid: GridSpec | None = None, _cache: _PairCache | None = None) -> float:
    """Sum of bivariate log densities over site pairs with ``|x_i - x_j| <= cutoff``.

    ``field`` may hold several replicates (R, nx, ny); their contributions are
    summed. Returns ``-inf`` if any pair density underflows.
    """
    cfg = cfg or PLConfig()
    z, coords = _field_matrix(field, grid)
    return _pl_sum(p, z, _cache or _pairs(coords, cfg.weight_cutoff))


def _pl_sum(p, z, cache: _PairCache) -> float:
    if len(cache.pairs) == 0:
        return 0.0
    i, j = cache.pairs[:, 0], cache.pairs[:, 1]
    ld = bivariate_log_density(z[:, i], z[:, j], cache.dist[None, :], p)
    n_bad = int(np.sum(~np.isfinite(ld)))
    if n_bad:
        logger.debug("pairwise likelihood: %d pairs underflow at %s", n_bad, p)
        return -np.inf
    return float(ld.sum())


@dataclass
class PLResult:
    params: ParameterVector | None
    loglik: float
    success: bool
    boundary: bool = False
    stage1: list = field(default_factory=list)
    stage2: list = field(default_factory=list)
    n_iter: list = field(default_factory=list)
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "method": "pl",
            "success": self.success,
            "lambda": None if self.params is None else self.params.lam,
            "nu": None if self.params is None else self.params.nu,
            "loglik": self.loglik if np.isfinite(self.loglik) else None,
            "boundary": self.boundary,
            "stage1": [v if np.isfinite(v) else None for v in self.stage1],
            "stage2": [v if np.isfinite(v) else None for v in self.stage2],
            "n_iter": self.n_iter,
            "message": self.message,
        }


def _decode(x, family: Family):
    lam = float(np.exp(x[0]))
    if family is Family.SMITH:
        return ParameterVector(lam, 2.0, family)
    if family is Family.SCHLATHER_WHITTLE_MATERN:
        return ParameterVector(lam, float(np.exp(x[1])), family)
    return ParameterVector(lam, float(2.0 * expit(x[1])), family)


def _encode(lam, nu, family: Family):
    if family is Family.SMITH:
        return np.array([np.log(lam)])
    if family is Family.SCHLATHER_WHITTLE_MATERN:
        return np.array([np.log(lam), np.log(nu)])
    return np.array([np.log(lam), logit(nu / 2.0)])


def _at_boundary(x, family: Family, tol: float) -> bool:
    lam = np.exp(x[0])
    if lam < tol or lam > 1 / tol:
        return True
    if family in (Family.BROWN_RESNICK, Family.SCHLATHER_POWEXP):
        s = expit(x[1])
        return bool(s < tol or s > 1 - tol)
    return False


def fit_pl(field, family, cfg: PLConfig | None = None, grid: GridSpec | None = None) -> PLResult:
    """Maximise the pairwise likelihood with a two-stage multistart.

    Stage 1 evaluates ``n_starts`` seeded start points; Nelder-Mead is run
    from the ``n_refine`` best. The search runs on ``(log lam, logit(nu/2))``
    (``log nu`` for Whittle-Matern), so every iterate is admissible.
    """
    cfg = cfg or PLConfig()
    family = Family.parse(family)
    z, coords = _field_matrix(field, grid)
    cache = _pairs(coords, cfg.weight_cutoff)
    if len(cache.pairs) == 0:
        return PLResult(None, -np.inf, False, message="no site pairs within the weight cutoff")

    def negll(x):
        try:
            v = _pl_sum(_decode(x, family), z, cache)
        except (DomainError, FloatingPointError):
            return np.inf
        return -v if np.isfinite(v) else np.inf

    rng = np.random.default_rng(cfg.seed)
    (la, lb), (na, nb) = cfg.start_box
    starts = [_encode(rng.uniform(la, lb), rng.uniform(na, nb), family) for _ in range(cfg.n_starts)]
    stage1 = [float(-negll(x)) for x in starts]
    order = np.argsort(-np.asarray(stage1), kind="stable")[: cfg.n_refine]
    best_x, best_v, stage2, iters = None, -np.inf, [], []
    for idx in order:
        if not np.isfinite(stage1[idx]):
            stage2.append(-np.inf)
            iters.append(0)
            continue
        res = optimize.minimize(negll, starts[idx], method="Nelder-Mead",
                                options={"maxiter": cfg.max_iter, "xatol": 1e-6, "fatol": 1e-8})
        v = -float(res.fun)
        stage2.append(v)
        iters.append(int(res.nit))
        if v > best_v:
            best_x, best_v = res.x, v
    if best_x is None:
        return PLResult(None, -np.inf, False, stage1=stage1, stage2=stage2, n_iter=iters,
                        message="all starting values failed")
    boundary = _at_boundary(best_x, family, cfg.boundary_tol)
    return PLResult(_decode(best_x, family), best_v, True, boundary, stage1, stage2, iters,
                    "converged at the domain boundary" if boundary else "ok")


# --------------------------------------------------------------------------
# ABC with tripletwise extremal coefficients


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights (n_out, n_in) with aligned corner samples."""
    W = np.zeros((n_out, n_in))
    if n_in == 1:
        W[:, 0] = 1.0
        return W
    pos = np.linspace(0, n_in - 1, n_out)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    t = pos - lo
    W[np.arange(n_out), lo] += 1 - t
    W[np.arange(n_out), lo + 1] += t
    return W


def downsample_bilinear(values, shape=(5, 5)) -> np.ndarray:
    """Bilinear resampling of (..., nx, ny) fields to ``shape``; corners map to corners."""
    values = np.asarray(values, dtype=float)
    Wx = _bilinear_matrix(values.shape[-2], shape[0])
    Wy = _bilinear_matrix(values.shape[-1], shape[1])
    return Wx @ values @ Wy.T


def support_sites(grid_shape, shape=(5, 5)) -> np.ndarray:
    """Boolean mask of input sites that enter the bilinear downsampling."""
    wx = _bilinear_matrix(grid_shape[0], shape[0]).any(axis=0)
    wy = _bilinear_matrix(grid_shape[1], shape[1]).any(axis=0)
    return np.outer(wx, wy)


_TRIPLES: dict = {}


def _triples(k: int) -> np.ndarray:
    if k not in _TRIPLES:
        _TRIPLES[k] = np.array(list(itertools.combinations(range(k), 3)), dtype=np.int64)
    return _TRIPLES[k]


def triplet_summary(field) -> np.ndarray:
    """Tripletwise extremal coefficient for every site triple, in lexicographic order.

    With ``W = 1/Z`` and, per replicate, ``R = min(W_i, W_j, W_k) / sum(W)``,
    the estimate is ``1 / (3 mean(R))``. For unit Frechet margins
    ``min W`` is exponential with rate ``theta``; dividing by the sum makes
    the statistic scale free. It equals 1 when the three sites coincide and
    tends to 3 for independent sites.

    ``field`` is one field (nx, ny), a FieldSample, or replicates (R, nx, ny).
    """
    if isinstance(field, FieldSample):
        field = field.values
    z = np.asarray(field, dtype=float)
    if z.ndim == 2:
        z = z[None]
    z = z.reshape(len(z), -1)
    if np.any(~(z > 0)):
        raise DomainError("fields must be strictly positive")
    w = 1.0 / z
    T = _triples(z.shape[1])
    wt = w[:, T]
    r = wt.min(axis=-1) / wt.sum(axis=-1)
    return 1.0 / (3.0 * r.mean(axis=0))


@dataclass
class ABCConfig:
    n_sims: int = 50_000
    processes_per_sim: int = 25
    downsample: tuple = (5, 5)
    accept_count: int = 500
    method: str = "exact"


@dataclass
class ABCBank:
    """Prior draws with their simulated summary vectors, reusable across observations."""

    params: np.ndarray
    summaries: np.ndarray = field(repr=False)
    family: Family
    prior: PriorBox
    downsample: tuple
    n_failed: int = 0


def build_abc_bank(prior: PriorBox, family, grid: GridSpec, cfg: ABCConfig | None = None,
                   seed=0) -> ABCBank:
    """Simulate ``cfg.n_sims`` prior draws with ``processes_per_sim`` replicates each.

    Only the sites that feed the bilinear downsampling are simulated; the
    remaining sites do not influence the summary.
    """
    cfg = cfg or ABCConfig()
    family = Family.parse(family)
    params = prior.sample(cfg.n_sims, _substream(seed, 0))
    mask = support_sites(grid.shape, cfg.downsample)
    coords = grid.coords()[mask.ravel()]
    n_sum = len(_triples(cfg.downsample[0] * cfg.downsample[1]))
    summaries = np.full((cfg.n_sims, n_sum), np.nan)
    full = np.ones((cfg.processes_per_sim,) + grid.shape)
    ok = np.ones(cfg.n_sims, dtype=bool)
    for i, (lam, nu) in enumerate(params):
        p = ParameterVector(lam, 2.0 if family is Family.SMITH else nu, family)
        try:
            Z, _ = simulate_sites(p, coords, _substream(seed, 1, i), cfg.processes_per_sim, cfg.method)
        except Exception as exc:  # recorded, not fatal
            logger.warning("ABC simulation %d failed: %s", i, exc)
            ok[i] = False
            continue
        full[:, mask] = Z
        summaries[i] = triplet_summary(downsample_bilinear(full, cfg.downsample))
    return ABCBank(params[ok], summaries[ok], family, prior, tuple(cfg.downsample), int((~ok).sum()))


def abc(observed, prior: PriorBox | None = None, family=None, cfg: ABCConfig | None = None,
        seed=0, bank: ABCBank | None = None, grid: GridSpec | None = None) -> PosteriorSample:
    """Rejection ABC keeping the ``accept_count`` nearest simulations.

    The observed summary comes from the single observed field. Distances are
    Euclidean; ties are broken by simulation index.
    """
    cfg = cfg or ABCConfig()
    if isinstance(observed, FieldSample):
        grid = observed.grid
        obs = observed.values
    else:
        obs = np.asarray(observed, dtype=float)
    if bank is None:
        if prior is None or family is None or grid is None:
            raise DomainError("abc needs prior, family and grid when no bank is given")
        bank = build_abc_bank(prior, family, grid, cfg, seed)
    if len(bank.params) < cfg.accept_count:
        raise DomainError(f"only {len(bank.params)} simulations for {cfg.accept_count} acceptances")
    s_obs = triplet_summary(downsample_bilinear(obs, bank.downsample))
    d = np.sqrt(((bank.summaries - s_obs) ** 2).sum(axis=1))
    keep = np.argsort(d, kind="stable")[: cfg.accept_count]
    return PosteriorSample(bank.params[keep], "params", bank.family)


# --------------------------------------------------------------------------
# point CNN


def fit_point_cnn(dataset: TrainingSet, config=None, **kw):
    """CNN with the generative trunk, no noise layer and a squared-error loss."""
    from dataclasses import replace

    from . import generative_estimator as ge

    config = replace(config or ge.TrainConfig(), objective="mse")
    spec = ge.NetworkSpec.for_grid(dataset.grid, "param", noise=False)
    return ge.train(dataset, config, "param", spec=spec, **kw)
