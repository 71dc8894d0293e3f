"""Command line front end.

Every command resolves its settings from built-in defaults, an optional
``--config`` file (YAML or JSON) and explicit flags, in that order, and
writes the resolved settings to ``resolved_config.json`` in its output
directory. Exit codes: 0 success, 1 usage or configuration error,
2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .spatial_core import DomainError, Family, HGrid, ParameterVector, theta

logger = logging.getLogger("genmaxstable")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


DEFAULTS = {
    "simulate": {
        "family": "brown-resnick", "n": 100, "seed": 0, "grid": {"nx": 30, "ny": 30, "extent": None},
        "prior": {"lambda_range": [0.5, 5.0], "nu_range": [0.3, 1.8]}, "method": "exact",
        "fixed": None, "val_fraction": 0.2,
    },
    "train": {
        "data": None, "head": "param", "seed": 0, "resume": None,
        "training": {"learning_rate": 7e-4, "batch_size": 100, "m_train": 50, "m_predict": 500,
                     "max_epochs": 100, "lr_factor": 0.5, "lr_patience": 5, "early_stop_patience": 10,
                     "augment": True, "objective": "energy"},
        "network": {}, "epochs": None,
    },
    "estimate": {
        "method": "en", "checkpoint": None, "field": None, "index": 0, "seed": 0, "m": None,
        "alpha": 0.05, "family": "brown-resnick", "extent": None,
        "prior": {"lambda_range": [0.5, 5.0], "nu_range": [0.3, 1.8]},
        "abc": {"n_sims": 5000, "processes_per_sim": 25, "accept_count": 500},
        "pl": {"weight_cutoff": 5.0, "n_starts": 20, "n_refine": 5},
    },
    "benchmark": {
        "scenario": "base", "family": "brown-resnick", "seed": 0, "grid": {"nx": 16, "ny": 16, "extent": None},
        "n_train": 1000, "n_test": 50, "methods": ["en", "abc"], "epochs": 100, "m": 500,
        "abc": {"n_sims": 5000, "processes_per_sim": 25, "accept_count": 500},
        "pl": {"weight_cutoff": 5.0, "n_starts": 20, "n_refine": 5},
        "checkpoint": None, "head": "param",
    },
    "gev": {"data": None, "format": None, "years": None, "km_per_unit": None, "min_years": 20},
    "madogram": {"data": None, "bin_width": 0.5, "max_h": None, "margins": "frechet"},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config_file(path) -> dict:
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        return json.loads(text)
    import yaml

    data = yaml.safe_load(text)
    return data or {}


def _set(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            file_cfg = load_config_file(args.config)
        except Exception as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a mapping")
        # a shared file may carry sections per command
        file_cfg = _merge({k: v for k, v in file_cfg.items() if k not in DEFAULTS}, file_cfg.get(command, {}))
        cfg = _merge(cfg, file_cfg)
    for dest, key in getattr(args, "_overrides", []):
        v = getattr(args, dest, None)
        if v is not None:
            _set(cfg, key, v)
    return cfg


def _grid(g: dict):
    from .simulator import GridSpec

    nx, ny = int(g["nx"]), int(g["ny"])
    extent = g.get("extent") or (0.0, float(nx), 0.0, float(ny))
    return GridSpec(nx, ny, tuple(extent))


def _prior(p: dict):
    from .simulator import PriorBox

    return PriorBox(tuple(p["lambda_range"]), tuple(p["nu_range"]))


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


class _Staging:
    """Write into a temporary sibling directory; move into place only on success."""

    def __init__(self, out: Path):
        self.out = Path(out)

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.out.exists():
            shutil.rmtree(self.out)
        self.tmp.rename(self.out)
        return False


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, out: Path) -> dict:
    from .simulator import generate_training_set, save_dataset

    family = Family.parse(cfg["family"])
    grid = _grid(cfg["grid"])
    prior = _prior(cfg["prior"])
    n = int(cfg["n"])
    if n < 1:
        raise DomainError("n must be >= 1")
    params = None
    if cfg.get("fixed"):
        lam, nu = cfg["fixed"]
        params = np.tile([float(lam), float(nu)], (n, 1))
        ParameterVector(float(lam), 2.0 if family is Family.SMITH else float(nu), family)
    else:
        prior.check_family(family)
    with _Staging(out) as tmp:
        ts = generate_training_set(prior, n, family, grid, int(cfg["seed"]), method=cfg["method"],
                                   val_fraction=float(cfg["val_fraction"]), params=params)
        save_dataset(ts, tmp)
        _write_json(tmp / "resolved_config.json", cfg)
    return {"out": str(out), "count": n}


def _load_field(cfg: dict):
    """Field values and grid from a dataset directory, .npy or .csv file."""
    from .simulator import GridSpec, load_dataset

    path = Path(cfg["field"])
    if path.is_dir():
        ts = load_dataset(path)
        i = int(cfg.get("index") or 0)
        if not 0 <= i < len(ts):
            raise UsageError(f"index {i} out of range for dataset of size {len(ts)}")
        return np.asarray(ts.fields[i]), ts.grid, ts.parameter(i)
    if path.suffix == ".npy":
        vals = np.load(path)
    else:
        vals = np.loadtxt(path, delimiter=",")
    if vals.ndim != 2:
        raise UsageError("field file must hold a 2-D array")
    nx, ny = vals.shape
    extent = cfg.get("extent") or (0.0, float(nx), 0.0, float(ny))
    return vals, GridSpec(nx, ny, tuple(extent)), None


def cmd_train(cfg: dict, out: Path) -> dict:
    from . import generative_estimator as ge
    from .simulator import load_dataset

    if not cfg.get("data"):
        raise UsageError("train needs --data <dataset directory>")
    ds = load_dataset(cfg["data"])
    tcfg = ge.TrainConfig(**dict(cfg["training"], seed=int(cfg["seed"])))
    resume = ge.load_checkpoint(cfg["resume"]) if cfg.get("resume") else None
    spec = None
    if resume is None:
        spec = ge.NetworkSpec.for_grid(ds.grid, cfg["head"], HGrid(),
                                       **dict({"noise": tcfg.objective == "energy"}, **cfg["network"]))
    epochs = cfg.get("epochs")
    with _Staging(out) as tmp:
        model = ge.train(ds, tcfg, cfg["head"], spec=spec, resume=resume,
                         max_epochs=None if epochs is None else int(epochs))
        ge.save_checkpoint(model, tmp / "model.npz")
        (tmp / "training_log.csv").write_text(model.log_csv())
        _write_json(tmp / "resolved_config.json", cfg)
    return {"out": str(out), "epochs": model.epoch, "best_val": model.best_val}


def cmd_estimate(cfg: dict, out: Path) -> dict:
    from . import generative_estimator as ge
    from .baselines import ABCConfig, PLConfig, abc, build_abc_bank, fit_pl

    method = cfg["method"]
    if method not in ("en", "abc", "pl"):
        raise UsageError(f"unknown method {method!r}; choose en, abc or pl")
    if not cfg.get("field"):
        raise UsageError("estimate needs --field")
    vals, grid, truth = _load_field(cfg)
    alpha = float(cfg["alpha"])
    seed = int(cfg["seed"])
    if method == "en":
        if not cfg.get("checkpoint"):
            raise UsageError("method en needs --checkpoint")
        model = ge.load_checkpoint(cfg["checkpoint"])
        m = int(cfg.get("m") or model.config.m_predict)
        result = ge.predict(model, vals, m, seed, alpha).to_dict()
    elif method == "abc":
        acfg = ABCConfig(**cfg["abc"])
        bank = build_abc_bank(_prior(cfg["prior"]), cfg["family"], grid, acfg, seed)
        post = abc(vals, cfg=acfg, bank=bank)
        result = ge.summarize_posterior(post, alpha, HGrid()).to_dict()
        result["n_failed_simulations"] = bank.n_failed
    else:
        res = fit_pl(vals, cfg["family"], PLConfig(**cfg["pl"]), grid)
        result = res.to_dict()
        if res.params is not None:
            h = HGrid().points
            curve = ge.enforce_monotone(theta(h, res.params)[None], "mean")
            result["theta"] = {"h": h.tolist(), "values": curve.tolist()}
    result["method"] = method
    if truth is not None:
        result["truth"] = {"lambda": truth.lam, "nu": truth.nu, "family": truth.family.value}
    with _Staging(out) as tmp:
        _write_json(tmp / "posterior.json", result)
        _write_json(tmp / "resolved_config.json", cfg)
    return {"out": str(out), "method": method}


def cmd_benchmark(cfg: dict, out: Path) -> dict:
    from . import evaluation as ev
    from . import generative_estimator as ge
    from .baselines import ABCConfig, PLConfig, build_abc_bank, fit_point_cnn

    seed = int(cfg["seed"])
    grid = _grid(cfg["grid"])
    name = cfg["scenario"]
    kw = {"family": cfg["family"]} if name in ("base", "misspecified-range") else {}
    scen = ev.make_scenario(name, **kw)
    methods_req = list(cfg["methods"])
    unknown = set(methods_req) - {"en", "abc", "pl", "point-cnn"}
    if unknown:
        raise UsageError(f"unknown methods {sorted(unknown)}")
    test = ev.make_test_set(scen, int(cfg["n_test"]), [seed, 1], grid)
    need_train = "en" in methods_req and not cfg.get("checkpoint") or "point-cnn" in methods_req
    train = ev.make_training_set(scen, int(cfg["n_train"]), [seed, 0], grid) if need_train else None
    tcfg = ge.TrainConfig(max_epochs=int(cfg["epochs"]), seed=seed)
    methods = {}
    for mname in methods_req:
        try:
            if mname == "en":
                model = ge.load_checkpoint(cfg["checkpoint"]) if cfg.get("checkpoint") else ge.train(
                    train, tcfg, cfg["head"])
                methods["en"] = ev.en_method(model, int(cfg["m"]), seed)
            elif mname == "point-cnn":
                methods["point-cnn"] = ev.point_cnn_method(fit_point_cnn(train, tcfg))
            elif mname == "abc":
                bank = build_abc_bank(scen.train_prior, scen.train_family, grid, ABCConfig(**cfg["abc"]), [seed, 2])
                methods["abc"] = ev.abc_method(bank, ABCConfig(**cfg["abc"]))
            elif mname == "pl":
                methods["pl"] = ev.pl_method(grid, scen.train_family, PLConfig(**cfg["pl"]))
        except Exception as exc:
            logger.error("method %s could not be set up: %s", mname, exc)

            def failing(field, i, _exc=exc):
                raise RuntimeError(f"setup failed: {_exc}")

            methods[mname] = failing
    table = ev.run_benchmark(scen, methods, test, seed)
    with _Staging(out) as tmp:
        (tmp / "metrics.csv").write_text(table.to_csv())
        (tmp / "metrics.json").write_text(table.to_json() + "\n")
        recs = []
        for mname in methods:
            metric = "es_lambda_nu" if cfg["head"] == "param" or mname != "en" else "es_theta"
            recs += ev.score_map(table, mname, metric)
        (tmp / "score_map.csv").write_text(ev.score_map_csv(recs))
        _write_json(tmp / "resolved_config.json", cfg)
    return {"out": str(out), "methods": list(methods)}


def cmd_gev(cfg: dict, out: Path) -> dict:
    from .marginals import fit_gev_surface, ingest_grid, save_series, to_unit_frechet

    if not cfg.get("data"):
        raise UsageError("gev needs --data")
    years = tuple(cfg["years"]) if cfg.get("years") else None
    series = ingest_grid(cfg["data"], cfg.get("format"), cfg.get("km_per_unit"), years)
    surface = fit_gev_surface(series, int(cfg["min_years"]))
    frechet = to_unit_frechet(series, surface)
    with _Staging(out) as tmp:
        d = surface.to_dict()
        d["provenance"] = series.provenance()
        d["years"] = [float(series.years[0]), float(series.years[-1])]
        _write_json(tmp / "gev_surface.json", d)
        save_series(frechet, tmp / "frechet")
        _write_json(tmp / "resolved_config.json", cfg)
    return {"out": str(out), "converged": surface.converged}


def cmd_madogram(cfg: dict, out: Path) -> dict:
    from .evaluation import default_bins, f_madogram
    from .marginals import ingest_grid
    from .simulator import load_dataset

    if not cfg.get("data"):
        raise UsageError("madogram needs --data")
    path = Path(cfg["data"])
    meta = json.loads((path / "manifest.json").read_text()) if (path / "manifest.json").exists() else {}
    if meta.get("format") == "genmaxstable-dataset":
        ts = load_dataset(path)
        fields, coords = np.asarray(ts.fields), ts.grid.coords()
    else:
        s = ingest_grid(path)
        fields, coords = s.values, s.grid.coords()
    d_max = float(np.linalg.norm(coords.max(axis=0) - coords.min(axis=0)))
    max_h = float(cfg["max_h"]) if cfg.get("max_h") else d_max
    res = f_madogram(fields, coords, default_bins(max_h, float(cfg["bin_width"])), cfg["margins"])
    with _Staging(out) as tmp:
        (tmp / "madogram.csv").write_text(res.to_csv())
        _write_json(tmp / "resolved_config.json", dict(cfg, n_clamped=res.n_clamped))
    return {"out": str(out), "n_clamped": res.n_clamped}


COMMANDS = {
    "simulate": cmd_simulate, "train": cmd_train, "estimate": cmd_estimate,
    "benchmark": cmd_benchmark, "gev": cmd_gev, "madogram": cmd_madogram,
}


def _add(p, flag, key, **kw):
    dest = flag.lstrip("-").replace("-", "_")
    p.add_argument(flag, dest=dest, default=None, **kw)
    p.set_defaults(_overrides=p.get_default("_overrides") + [(dest, key)])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="genmaxstable", description="Posterior estimation for max-stable processes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.set_defaults(_overrides=[])
        p.add_argument("--config")
        p.add_argument("--out", required=True)
        _add(p, "--seed", "seed", type=int)
        if name in ("simulate", "estimate", "benchmark"):
            _add(p, "--family", "family")
        if name == "simulate":
            _add(p, "--n", "n", type=int)
            _add(p, "--nx", "grid.nx", type=int)
            _add(p, "--ny", "grid.ny", type=int)
            _add(p, "--prior-lambda", "prior.lambda_range", type=float, nargs=2)
            _add(p, "--prior-nu", "prior.nu_range", type=float, nargs=2)
            _add(p, "--fixed", "fixed", type=float, nargs=2, metavar=("LAMBDA", "NU"))
            _add(p, "--method", "method", choices=["exact", "approx"])
        if name == "train":
            _add(p, "--data", "data")
            _add(p, "--head", "head", choices=["param", "theta"])
            _add(p, "--epochs", "epochs", type=int)
            _add(p, "--max-epochs", "training.max_epochs", type=int)
            _add(p, "--resume", "resume")
            _add(p, "--objective", "training.objective", choices=["energy", "mse"])
        if name == "estimate":
            _add(p, "--method", "method")
            _add(p, "--checkpoint", "checkpoint")
            _add(p, "--field", "field")
            _add(p, "--index", "index", type=int)
            _add(p, "--m", "m", type=int)
            _add(p, "--n-sims", "abc.n_sims", type=int)
        if name == "benchmark":
            _add(p, "--scenario", "scenario")
            _add(p, "--method", "methods", nargs="+")
            _add(p, "--n-train", "n_train", type=int)
            _add(p, "--n-test", "n_test", type=int)
            _add(p, "--epochs", "epochs", type=int)
            _add(p, "--n-sims", "abc.n_sims", type=int)
            _add(p, "--nx", "grid.nx", type=int)
            _add(p, "--ny", "grid.ny", type=int)
            _add(p, "--checkpoint", "checkpoint")
            _add(p, "--head", "head", choices=["param", "theta"])
        if name == "gev":
            _add(p, "--data", "data")
            _add(p, "--format", "format", choices=["csv", "dataset-dir"])
            _add(p, "--years", "years", type=float, nargs=2)
            _add(p, "--km-per-unit", "km_per_unit", type=float)
        if name == "madogram":
            _add(p, "--data", "data")
            _add(p, "--bin-width", "bin_width", type=float)
            _add(p, "--max-h", "max_h", type=float)
            _add(p, "--margins", "margins", choices=["frechet", "empirical"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args.command, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        summary = COMMANDS[args.command](cfg, Path(args.out))
    except (UsageError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary, default=_jsonable))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
