"""Experiment protocols: scenarios, test sets, metric tables, score maps, F-madogram."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .scoring import (
    PosteriorSample,
    energy_score,
    integrated_interval_score,
    interval_score,
    mse_theta,
    theta_curves,
)
from .simulator import GridSpec, PriorBox, TrainingSet, _substream, generate_training_set
from .spatial_core import DomainError, Family, HGrid, ParameterVector, theta

logger = logging.getLogger(__name__)

METRICS = ("mse_lambda", "mse_nu", "mse_theta", "is_lambda", "is_nu", "iis", "es_lambda_nu", "es_theta")


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class UnionUniform:
    """Uniform law on a union of disjoint intervals, weighted by length."""

    intervals: tuple

    def sample(self, rng, n):
        lengths = np.array([b - a for a, b in self.intervals])
        which = rng.choice(len(lengths), size=n, p=lengths / lengths.sum())
        u = rng.uniform(size=n)
        lo = np.array([a for a, _ in self.intervals])[which]
        out = lo + u * lengths[which]
        # keep strictly positive lower ends open
        return np.where(out <= 0, np.nextafter(0.0, 1.0), out)

    def contains(self, x):
        x = np.asarray(x)
        return np.any([(x > a) & (x <= b) for a, b in self.intervals], axis=0)


@dataclass(frozen=True)
class Scenario:
    """Train and test distributions of one experiment.

    ``test_lambda`` / ``test_nu`` override the train prior for test draws;
    ``test_sigma`` draws Smith scales instead of (lam, nu).
    """

    name: str
    train_families: tuple
    test_families: tuple
    train_prior: PriorBox = PriorBox()
    test_prior: PriorBox | None = None
    test_lambda: UnionUniform | None = None
    test_nu: UnionUniform | None = None
    test_sigma: tuple | None = None
    n_each: tuple | None = None

    @property
    def train_family(self) -> Family:
        return self.train_families[0]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "train_families": [f.value for f in self.train_families],
            "test_families": [f.value for f in self.test_families],
            "train_prior": self.train_prior.to_dict(),
            "test_prior": None if self.test_prior is None else self.test_prior.to_dict(),
            "test_lambda": None if self.test_lambda is None else [list(i) for i in self.test_lambda.intervals],
            "test_nu": None if self.test_nu is None else [list(i) for i in self.test_nu.intervals],
            "test_sigma": None if self.test_sigma is None else list(self.test_sigma),
            "n_each": None if self.n_each is None else list(self.n_each),
        }


def base(family="brown-resnick", prior: PriorBox | None = None) -> Scenario:
    f = Family.parse(family)
    return Scenario(f"base-{f.value}", (f,), (f,), prior or PriorBox())


def misspecified_range(family="brown-resnick") -> Scenario:
    f = Family.parse(family)
    return Scenario(
        "misspecified-range", (f,), (f,), PriorBox(),
        test_lambda=UnionUniform(((0.0, 0.5), (5.0, 10.0))),
        test_nu=UnionUniform(((0.0, 0.3), (1.8, 2.0))),
    )


def misspecified_kernel() -> Scenario:
    return Scenario("misspecified-kernel", (Family.SCHLATHER_POWEXP,), (Family.SCHLATHER_WHITTLE_MATERN,))


def aggregated_models(n_each=(1666, 1666, 1666)) -> Scenario:
    fams = (Family.BROWN_RESNICK, Family.SCHLATHER_POWEXP, Family.SCHLATHER_WHITTLE_MATERN)
    return Scenario("aggregated-models", fams, fams, n_each=tuple(int(n) for n in n_each))


def overparametrized(sigma_range=(0.5, 5.0), nu_range=(0.0, 2.0)) -> Scenario:
    return Scenario("overparametrized", (Family.BROWN_RESNICK,), (Family.SMITH,),
                    PriorBox((0.5, 5.0), tuple(nu_range)), test_sigma=tuple(sigma_range))


SCENARIOS = {
    "base": base,
    "misspecified-range": misspecified_range,
    "misspecified-kernel": misspecified_kernel,
    "aggregated-models": aggregated_models,
    "overparametrized": overparametrized,
}


def make_scenario(name: str, **kw) -> Scenario:
    if name not in SCENARIOS:
        raise DomainError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return SCENARIOS[name](**kw)


def _concat(sets, family, grid, prior, seed) -> TrainingSet:
    params = np.concatenate([s.params for s in sets])
    fields = np.concatenate([np.asarray(s.fields) for s in sets])
    fams = np.concatenate([[s.family.value] * len(s) for s in sets])
    return TrainingSet(params, fields, family, grid, prior, seed, families=fams)


def make_training_set(scenario: Scenario, n: int, seed=0, grid: GridSpec | None = None, **kw) -> TrainingSet:
    """Training data of a scenario; aggregated scenarios shuffle the family blocks together."""
    grid = grid or GridSpec()
    if scenario.n_each is None:
        return generate_training_set(scenario.train_prior, n, scenario.train_family, grid, seed, **kw)
    parts = [generate_training_set(scenario.train_prior, k, f, grid, _substream(seed, 10 + j))
             for j, (f, k) in enumerate(zip(scenario.train_families, scenario.n_each))]
    ts = _concat(parts, scenario.train_family, grid, scenario.train_prior, seed)
    perm = np.random.default_rng(_substream(seed, 99)).permutation(len(ts))
    ts.params, ts.fields, ts.families = ts.params[perm], ts.fields[perm], ts.families[perm]
    return ts


def make_test_set(scenario: Scenario, n_test: int = 250, seed=0, grid: GridSpec | None = None) -> TrainingSet:
    """Test pairs for a scenario, one field each."""
    if n_test < 1:
        raise DomainError("n_test must be >= 1")
    grid = grid or GridSpec()
    rng = np.random.default_rng(_substream(seed, 0))
    fams = scenario.test_families
    if len(fams) > 1:
        counts = np.bincount(np.arange(n_test) % len(fams), minlength=len(fams))
        parts = [make_test_set(Scenario(scenario.name, (f,), (f,), scenario.train_prior), int(k),
                               _substream(seed, 20 + j), grid) for j, (f, k) in enumerate(zip(fams, counts))]
        return _concat(parts, fams[0], grid, scenario.train_prior, seed)
    family = fams[0]
    if scenario.test_sigma is not None:
        a, b = scenario.test_sigma
        sigma = rng.uniform(a, b, n_test)
        params = np.column_stack([np.sqrt(2 * sigma), np.full(n_test, 2.0)])
    else:
        prior = scenario.test_prior or scenario.train_prior
        params = prior.sample(n_test, rng)
        if scenario.test_lambda is not None:
            params[:, 0] = scenario.test_lambda.sample(rng, n_test)
        if scenario.test_nu is not None:
            params[:, 1] = scenario.test_nu.sample(rng, n_test)
    return generate_training_set(scenario.test_prior or scenario.train_prior, n_test, family, grid,
                                 _substream(seed, 1), params=params)


def truth_parameter(ts: TrainingSet, i: int) -> ParameterVector:
    return ts.parameter(i)


# --------------------------------------------------------------------------
# estimates and methods


@dataclass
class Estimate:
    """Output of one method on one field.

    Exactly one of ``posterior`` (sample based) or ``point`` (lam, nu) is set.
    """

    posterior: PosteriorSample | None = None
    point: np.ndarray | None = None
    family: Family | None = None
    info: dict = field(default_factory=dict)


Method = Callable[[np.ndarray, int], Estimate]


def en_method(model, m: int | None = None, seed=0) -> Method:
    from . import generative_estimator as ge

    def run(field, i):
        post = ge.forward(model, field, m or model.config.m_predict, seed=[seed, i] if isinstance(seed, int) else seed)
        return Estimate(posterior=post, family=model.family)

    return run


def point_cnn_method(model) -> Method:
    from . import generative_estimator as ge

    def run(field, i):
        return Estimate(point=ge.point_estimate(model, field)[0], family=model.family)

    return run


def abc_method(bank, cfg=None) -> Method:
    from .baselines import abc

    def run(field, i):
        return Estimate(posterior=abc(field, cfg=cfg, bank=bank), family=bank.family)

    return run


def pl_method(grid: GridSpec, family, cfg=None) -> Method:
    from .baselines import fit_pl

    fam = Family.parse(family)

    def run(field, i):
        res = fit_pl(field, fam, cfg, grid)
        if not res.success:
            raise RuntimeError(res.message)
        return Estimate(point=np.array([res.params.lam, res.params.nu]), family=fam,
                        info={"boundary": res.boundary})

    return run


def oracle_method(ts: TrainingSet) -> Method:
    """Returns the truth; used to validate the harness."""

    def run(field, i):
        p = ts.parameter(i)
        return Estimate(point=np.array([p.lam, p.nu]), family=p.family)

    return run


# --------------------------------------------------------------------------
# metrics


def observation_metrics(est: Estimate, truth: ParameterVector, hgrid: HGrid, alpha: float = 0.05) -> dict:
    """All applicable metrics for one observation; missing metrics are absent."""
    from .generative_estimator import enforce_monotone

    out = {}
    true_vec = np.array([truth.lam, truth.nu])
    true_curve = theta(hgrid.points, truth)
    post = est.posterior
    if post is not None and post.kind == "params":
        point = post.mean()
        iv = post.interval(alpha)
        out["is_lambda"] = interval_score(iv.lower[0], iv.upper[0], alpha, true_vec[0])
        out["is_nu"] = interval_score(iv.lower[1], iv.upper[1], alpha, true_vec[1])
        out["es_lambda_nu"] = energy_score(post.values, true_vec)
        curves = theta_curves(post.values, est.family or post.family, hgrid)
    elif post is not None:
        point = None
        curves = post.values
    else:
        point = np.asarray(est.point, dtype=float)
        curves = None
    if point is not None:
        out["mse_lambda"] = float((point[0] - true_vec[0]) ** 2)
        out["mse_nu"] = float((point[1] - true_vec[1]) ** 2)
        fam = est.family
        pv = ParameterVector(point[0], 2.0 if fam is Family.SMITH else point[1], fam)
        out["mse_theta"] = mse_theta(theta(hgrid.points, pv), true_curve, hgrid)
    if curves is not None:
        if point is None:
            out["mse_theta"] = mse_theta(enforce_monotone(curves, "mean"), true_curve, hgrid)
        lo = enforce_monotone(curves, ("quantile", alpha / 2))
        hi = enforce_monotone(curves, ("quantile", 1 - alpha / 2))
        out["iis"] = integrated_interval_score(lo, hi, alpha, true_curve, hgrid)
        out["es_theta"] = energy_score(curves, true_curve)
    return {k: float(v) for k, v in out.items()}


@dataclass
class MetricTable:
    """Per-method mean and standard deviation of each metric over the test set."""

    scenario: str
    methods: list
    per_obs: dict = field(repr=False)  # method -> list of metric dicts (None on failure)
    truths: np.ndarray = field(repr=False, default=None)
    seed: object = None

    def cell(self, method: str, metric: str):
        vals = [r[metric] for r in self.per_obs[method] if r is not None and metric in r]
        if not vals:
            return None
        vals = np.asarray(vals)
        return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0, len(vals)

    def n_failed(self, method: str) -> int:
        return sum(r is None for r in self.per_obs[method])

    def rows(self) -> list:
        rows = []
        for m in self.methods:
            for metric in METRICS:
                c = self.cell(m, metric)
                rows.append({
                    "scenario": self.scenario, "method": m, "metric": metric,
                    "mean": None if c is None else c[0], "std": None if c is None else c[1],
                    "n": 0 if c is None else c[2], "n_failed": self.n_failed(m),
                })
        return rows

    def records(self) -> list:
        """Flat metric records; inapplicable cells are omitted."""
        from .scoring import metric_record

        return [metric_record(r["metric"], r["mean"], r["std"], self.scenario, r["method"], self.seed)
                for r in self.rows() if r["mean"] is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["scenario", "method", "metric", "mean", "std", "n", "n_failed"],
                           lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in r.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.rows(), indent=2)

    def as_frame(self) -> dict:
        """``{method: {metric: mean}}`` with ``None`` for missing cells."""
        return {m: {k: (None if (c := self.cell(m, k)) is None else c[0]) for k in METRICS} for m in self.methods}


def run_benchmark(scenario: Scenario, methods: dict, test_set: TrainingSet | None = None,
                  seed=0, n_test: int = 250, hgrid: HGrid | None = None, alpha: float = 0.05,
                  grid: GridSpec | None = None) -> MetricTable:
    """Evaluate every method on every test observation.

    ``methods`` maps names to callables ``(field, index) -> Estimate``.
    Failures are logged and recorded as missing observations.
    """
    hgrid = hgrid or HGrid()
    ts = test_set if test_set is not None else make_test_set(scenario, n_test, seed, grid)
    per_obs = {}
    for name, fn in methods.items():
        rows = []
        for i in range(len(ts)):
            try:
                rows.append(observation_metrics(fn(np.asarray(ts.fields[i]), i), ts.parameter(i), hgrid, alpha))
            except Exception as exc:
                logger.warning("%s failed on observation %d: %s", name, i, exc)
                rows.append(None)
        per_obs[name] = rows
    return MetricTable(scenario.name, list(methods), per_obs, np.asarray(ts.params), seed)


def score_map(table: MetricTable, method: str, metric: str = "es_lambda_nu", param_grid=None) -> list:
    """(lambda, nu, score) records per observation, or bin means if ``param_grid``
    gives ``(lambda_edges, nu_edges)``."""
    recs = []
    for (lam, nu), r in zip(table.truths, table.per_obs[method]):
        val = None if r is None else r.get(metric)
        recs.append({"lambda": float(lam), "nu": float(nu), "es": val, "method": method,
                     "scenario": table.scenario})
    if param_grid is None:
        return recs
    le, ne = (np.asarray(e) for e in param_grid)
    out = []
    lam = np.array([r["lambda"] for r in recs])
    nu = np.array([r["nu"] for r in recs])
    es = np.array([np.nan if r["es"] is None else r["es"] for r in recs])
    ia = np.clip(np.searchsorted(le, lam, side="right") - 1, 0, len(le) - 2)
    ib = np.clip(np.searchsorted(ne, nu, side="right") - 1, 0, len(ne) - 2)
    for a in range(len(le) - 1):
        for b in range(len(ne) - 1):
            sel = (ia == a) & (ib == b) & np.isfinite(es)
            out.append({"lambda": float((le[a] + le[a + 1]) / 2), "nu": float((ne[b] + ne[b + 1]) / 2),
                        "es": float(es[sel].mean()) if sel.any() else None, "count": int(sel.sum()),
                        "method": method, "scenario": table.scenario})
    return out


def score_map_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "nu", "es", "method", "scenario"])
    for r in records:
        w.writerow([repr(r["lambda"]), repr(r["nu"]), "" if r["es"] is None else repr(r["es"]),
                    r["method"], r["scenario"]])
    return buf.getvalue()


# --------------------------------------------------------------------------
# F-madogram


@dataclass
class MadogramResult:
    edges: np.ndarray
    theta: np.ndarray  # NaN for empty bins
    count: np.ndarray
    mean_h: np.ndarray
    n_clamped: int

    def rows(self) -> list:
        return [{"h_lo": float(self.edges[b]), "h_hi": float(self.edges[b + 1]),
                 "h_mean": None if self.count[b] == 0 else float(self.mean_h[b]),
                 "theta": None if self.count[b] == 0 else float(self.theta[b]),
                 "count": int(self.count[b])} for b in range(len(self.count))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["h_lo", "h_hi", "h_mean", "theta", "count"])
        for r in self.rows():
            w.writerow([repr(r["h_lo"]), repr(r["h_hi"]), "" if r["h_mean"] is None else repr(r["h_mean"]),
                        "" if r["theta"] is None else repr(r["theta"]), r["count"]])
        return buf.getvalue()


def _margins(z: np.ndarray, margins: str) -> np.ndarray:
    if margins == "frechet":
        return np.exp(-1.0 / z)
    if margins == "empirical":
        from scipy.stats import rankdata

        return rankdata(z, axis=0) / (len(z) + 1)
    raise DomainError(f"unknown margin transform {margins!r}")


def default_bins(max_h: float, width: float = 0.5) -> np.ndarray:
    """Edges ``0, width, ...`` with the last edge strictly above ``max_h``."""
    return width * np.arange(int(np.floor(max_h / width)) + 2)


def f_madogram(fields, coords=None, bins=None, margins: str = "frechet", chunk: int = 20000) -> MadogramResult:
    """Binned F-madogram estimate of theta(h).

    For each site pair ``nu_F = mean|F(Z_i) - F(Z_j)| / 2`` over replicates,
    clamped to ``[0, 1/6]`` (the range that maps into ``[1, 2]``), and ``theta = (1 + 2 nu_F) / (1 - 2 nu_F)``.
    Pair estimates are averaged within distance bins ``[e_b, e_{b+1})``.

    Parameters
    ----------
    fields : array (R, nx, ny) or (R, k), R >= 2
    coords : (k, 2) site coordinates, or a GridSpec
    bins : bin edges; default width 0.5 up to the largest distance
    margins : ``"frechet"`` uses ``exp(-1/z)``; ``"empirical"`` uses per-site ranks
    """
    z = np.asarray(fields, dtype=float)
    if z.ndim < 2 or len(z) < 2:
        raise DomainError("the F-madogram needs at least 2 replicates")
    if isinstance(coords, GridSpec):
        coords = coords.coords()
    z = z.reshape(len(z), -1)
    coords = np.asarray(coords, dtype=float)
    if len(coords) != z.shape[1]:
        raise DomainError("coordinates do not match the number of sites")
    F = _margins(z, margins)
    iu, ju = np.triu_indices(z.shape[1], k=1)
    d = np.linalg.norm(coords[iu] - coords[ju], axis=1)
    edges = np.asarray(default_bins(d.max()) if bins is None else bins, dtype=float)
    keep = (d >= edges[0]) & (d < edges[-1])
    iu, ju, d = iu[keep], ju[keep], d[keep]
    nb = len(edges) - 1
    tsum, hsum, cnt, clamped = np.zeros(nb), np.zeros(nb), np.zeros(nb, dtype=np.int64), 0
    for s in range(0, len(d), chunk):
        a, b, dd = iu[s : s + chunk], ju[s : s + chunk], d[s : s + chunk]
        nu = 0.5 * np.abs(F[:, a] - F[:, b]).mean(axis=0)
        # theta <= 2 corresponds to nu_F <= 1/6
        bad = nu > 1.0 / 6.0
        clamped += int(bad.sum())
        nu = np.clip(nu, 0.0, 1.0 / 6.0)
        th = (1 + 2 * nu) / (1 - 2 * nu)
        idx = np.searchsorted(edges, dd, side="right") - 1
        tsum += np.bincount(idx, th, nb)
        hsum += np.bincount(idx, dd, nb)
        cnt += np.bincount(idx, minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        return MadogramResult(edges, tsum / cnt, cnt, hsum / cnt, clamped)
