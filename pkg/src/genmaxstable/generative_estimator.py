"""Energy-score trained generative CNN for posterior sampling.

The network maps one field to ``m`` posterior draws. A deterministic
convolutional trunk produces a dense feature vector; each draw multiplies it
elementwise with latent noise ``N(1, I)`` before a final linear layer.

Two heads are supported:

``param``
    Outputs ``(log lam, logit(nu / 2))``; natural draws are
    ``lam = exp(out0)`` and ``nu = 2 sigmoid(out1)``. Training compares draws
    and truth on the internal scale ``(log lam, nu / 2)``.
``theta``
    Outputs the extremal coefficient on an :class:`HGrid` through
    ``1 + sigmoid``.
"""
from __future__ import annotations

import copy
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .scoring import PosteriorSample, energy_score, theta_curves
from .simulator import FieldSample, GridSpec, TrainingSet, augment_masks
from .spatial_core import DomainError, Family, HGrid, theta

logger = logging.getLogger(__name__)

__all__ = [
    "NetworkSpec",
    "TrainConfig",
    "TrainedModel",
    "EnergyNet",
    "TrainingDivergence",
    "build_model",
    "forward",
    "loss",
    "train",
    "enforce_monotone",
    "predict",
    "Prediction",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    """Loss became NaN/inf; carries the epoch, batch index and seed."""

    def __init__(self, epoch, batch, seed):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} (seed {seed})")
        self.epoch, self.batch, self.seed = epoch, batch, seed


@dataclass
class NetworkSpec:
    nx: int = 30
    ny: int = 30
    head: str = "param"
    n_outputs: int = 2
    channels: tuple = (32, 64, 128)
    convs_per_block: int = 2
    kernel_size: int = 3
    dense_width: int = 256
    residual: bool = True
    noise: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.head not in ("param", "theta"):
            raise DomainError(f"unknown head {self.head!r}")
        if self.head == "param" and self.n_outputs != 2:
            raise DomainError("the parameter head has two outputs")

    @classmethod
    def for_grid(cls, grid: GridSpec, head: str = "param", hgrid: HGrid | None = None, **kw):
        n_out = 2 if head == "param" else (hgrid or HGrid()).k
        return cls(grid.nx, grid.ny, head, n_out, **kw)

    def trunk_shape(self) -> tuple:
        nx, ny = self.nx, self.ny
        for _ in self.channels:
            nx, ny = nx // 2, ny // 2
        return self.channels[-1], nx, ny


@dataclass
class TrainConfig:
    learning_rate: float = 7e-4
    batch_size: int = 100
    m_train: int = 50
    m_predict: int = 500
    max_epochs: int = 100
    lr_factor: float = 0.5
    lr_patience: int = 5
    early_stop_patience: int = 10
    augment: bool = True
    seed: int = 0
    objective: str = "energy"

    def __post_init__(self):
        if self.m_train < 2 and self.objective == "energy":
            raise DomainError("energy-score training needs m_train >= 2")
        if self.objective not in ("energy", "mse"):
            raise DomainError(f"unknown objective {self.objective!r}")


class _Block(nn.Module):
    def __init__(self, c_in, c_out, n_convs, ksize, residual):
        super().__init__()
        convs = []
        for i in range(n_convs):
            convs.append(nn.Conv2d(c_in if i == 0 else c_out, c_out, ksize, padding=ksize // 2))
        self.convs = nn.ModuleList(convs)
        self.proj = nn.Conv2d(c_in, c_out, 1) if residual else None
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        y = x
        for i, conv in enumerate(self.convs):
            y = conv(y)
            if i < len(self.convs) - 1:
                y = torch.relu(y)
        if self.proj is not None:
            y = y + self.proj(x)
        return self.pool(torch.relu(y))


class EnergyNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        blocks, c_in = [], 1
        for b, c in enumerate(spec.channels):
            # residual skips on every block after the first
            blocks.append(_Block(c_in, c, spec.convs_per_block, spec.kernel_size, spec.residual and b > 0))
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        c, hx, hy = spec.trunk_shape()
        if hx < 1 or hy < 1:
            raise DomainError(f"grid {spec.nx}x{spec.ny} too small for {len(spec.channels)} pooling blocks")
        self.dense = nn.Linear(c * hx * hy, spec.dense_width)
        self.out = nn.Linear(spec.dense_width, spec.n_outputs)

    def features(self, x):
        """Deterministic part: log-field batch (B, 1, nx, ny) -> (B, width)."""
        for blk in self.blocks:
            x = blk(x)
        return torch.relu(self.dense(x.flatten(1)))

    def forward(self, x, latent):
        """Raw outputs (B, m, n_outputs) for latent noise of shape (B, m, width)."""
        h = self.features(x)
        return self.out(h[:, None, :] * latent)


def build_model(spec: NetworkSpec, seed: int = 0, dtype=torch.float32) -> EnergyNet:
    """Network with seed-controlled fan-in scaled uniform initialisation."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = EnergyNet(spec)
    return net.to(dtype)


def _prep(fields, dtype) -> torch.Tensor:
    arr = np.asarray(fields, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError("fields must be strictly positive (unit Frechet scale)")
    return torch.as_tensor(np.log(arr)[:, None, :, :], dtype=dtype)


def _latent(spec: NetworkSpec, batch: int, m: int, rng, dtype) -> torch.Tensor:
    if not spec.noise:
        return torch.ones((batch, m, spec.dense_width), dtype=dtype)
    z = 1.0 + rng.standard_normal((batch, m, spec.dense_width))
    return torch.as_tensor(z, dtype=dtype)


def to_internal(raw: torch.Tensor, head: str) -> torch.Tensor:
    """Scale on which the loss is computed."""
    if head == "param":
        return torch.stack([raw[..., 0], torch.sigmoid(raw[..., 1])], dim=-1)
    return 1.0 + torch.sigmoid(raw)


def to_natural(raw: torch.Tensor, head: str) -> torch.Tensor:
    if head == "param":
        return torch.stack([torch.exp(raw[..., 0]), 2.0 * torch.sigmoid(raw[..., 1])], dim=-1)
    return 1.0 + torch.sigmoid(raw)


def internal_targets(params: np.ndarray) -> np.ndarray:
    params = np.atleast_2d(params)
    return np.column_stack([np.log(params[:, 0]), params[:, 1] / 2.0])


def loss(samples, truth, objective: str = "energy"):
    """Batch-mean training loss.

    ``samples`` (B, m, d) and ``truth`` (B, d), both on the internal scale.
    The energy objective is :func:`genmaxstable.scoring.energy_score`.
    """
    if objective == "energy":
        return energy_score(samples, truth).mean()
    return ((samples[..., 0, :] - truth) ** 2).sum(-1).mean()


@dataclass
class TrainedModel:
    net: EnergyNet
    spec: NetworkSpec
    config: TrainConfig
    family: Family | None = None
    hgrid: HGrid | None = None
    log: list = field(default_factory=list)
    dataset_hash: str = ""
    epoch: int = 0
    best_val: float = math.inf
    bad_epochs: int = 0
    best_state: dict | None = field(default=None, repr=False)
    optimizer_state: dict | None = field(default=None, repr=False)
    scheduler_state: dict | None = field(default=None, repr=False)
    finished: bool = False

    @property
    def head(self) -> str:
        return self.spec.head

    def inference_net(self) -> EnergyNet:
        if self.best_state is None:
            return self.net
        net = copy.deepcopy(self.net)
        net.load_state_dict(self.best_state)
        return net

    def log_csv(self) -> str:
        lines = ["epoch,train_es,val_es,lr"]
        for row in self.log:
            lines.append(f"{row['epoch']},{row['train_es']!r},{row['val_es']!r},{row['lr']!r}")
        return "\n".join(lines) + "\n"


def _targets(dataset: TrainingSet, head: str, hgrid: HGrid) -> np.ndarray:
    if head == "param":
        return internal_targets(dataset.params)
    return np.stack([theta(hgrid.points, dataset.parameter(i)) for i in range(len(dataset))])


def _augment_batch(x: torch.Tensor, masks: np.ndarray) -> torch.Tensor:
    out = x.clone()
    for i, (rot, vf, hf) in enumerate(masks):
        xi = out[i]
        if rot:
            xi = torch.flip(xi, dims=(-2, -1))
        if vf:
            xi = torch.flip(xi, dims=(-2,))
        if hf:
            xi = torch.flip(xi, dims=(-1,))
        out[i] = xi
    return out


def _evaluate(net, spec, x, y, m, rng_seed, objective, dtype, batch_size=250):
    rng = np.random.default_rng(rng_seed)
    total, n = 0.0, len(x)
    with torch.no_grad():
        for s in range(0, n, batch_size):
            xb, yb = x[s : s + batch_size], y[s : s + batch_size]
            mm = m if objective == "energy" else 1
            raw = net(xb, _latent(spec, len(xb), mm, rng, dtype))
            total += float(loss(to_internal(raw, spec.head), yb, objective)) * len(xb)
    return total / max(n, 1)


def train(dataset: TrainingSet, config: TrainConfig | None = None, head: str = "param",
          spec: NetworkSpec | None = None, hgrid: HGrid | None = None,
          resume: TrainedModel | None = None, max_epochs: int | None = None,
          dtype=torch.float32) -> TrainedModel:
    """Mini-batch RMSProp on the energy score (or MSE for point networks).

    Returns the model with the best validation score retained in
    ``best_state``. ``resume`` continues a previous run epoch by epoch;
    ``max_epochs`` overrides ``config.max_epochs`` for this call.
    """
    if len(dataset) == 0:
        raise DomainError("empty training set")
    if resume is not None:
        config, spec, head, hgrid = resume.config, resume.spec, resume.spec.head, resume.hgrid
    config = config or TrainConfig()
    hgrid = hgrid or HGrid()
    spec = spec or NetworkSpec.for_grid(dataset.grid, head, hgrid,
                                        noise=config.objective == "energy")
    if (spec.nx, spec.ny) != dataset.grid.shape:
        raise DomainError("network input size does not match the dataset grid")
    x_all = _prep(dataset.fields, dtype)
    y_all = torch.as_tensor(_targets(dataset, head, hgrid), dtype=dtype)
    tr_idx, va_idx = dataset.split()
    if len(va_idx) == 0:
        va_idx = tr_idx
    x_tr, y_tr, x_va, y_va = x_all[tr_idx], y_all[tr_idx], x_all[va_idx], y_all[va_idx]

    if resume is None:
        net = build_model(spec, config.seed, dtype)
        model = TrainedModel(net, spec, config, dataset.family, hgrid,
                             dataset_hash=dataset.content_hash())
    else:
        model = resume
        net = model.net
    opt = torch.optim.RMSprop(net.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=config.lr_factor, patience=config.lr_patience)
    if model.optimizer_state is not None:
        opt.load_state_dict(model.optimizer_state)
    if model.scheduler_state is not None:
        sched.load_state_dict(model.scheduler_state)

    m = config.m_train if config.objective == "energy" else 1
    last_epoch = config.max_epochs if max_epochs is None else min(config.max_epochs, model.epoch + max_epochs)
    if model.epoch == 0 and not model.log:
        v0 = _evaluate(net, spec, x_va, y_va, m, [config.seed, 2**31 - 1], config.objective, dtype)
        model.log.append({"epoch": 0, "train_es": math.nan, "val_es": v0,
                          "lr": opt.param_groups[0]["lr"]})
    while model.epoch < last_epoch and not model.finished:
        epoch = model.epoch + 1
        rng = np.random.default_rng([config.seed, epoch])
        perm = rng.permutation(len(x_tr))
        net.train()
        total = 0.0
        for b, s in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[s : s + config.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            if config.augment:
                xb = _augment_batch(xb, augment_masks(len(idx), rng))
            raw = net(xb, _latent(spec, len(idx), m, rng, dtype))
            value = loss(to_internal(raw, spec.head), yb, config.objective)
            if not torch.isfinite(value):
                raise TrainingDivergence(epoch, b, config.seed)
            opt.zero_grad()
            value.backward()
            opt.step()
            total += value.item() * len(idx)
        net.eval()
        val = _evaluate(net, spec, x_va, y_va, m, [config.seed, 2**31 - 1], config.objective, dtype)
        sched.step(val)
        model.epoch = epoch
        model.log.append({"epoch": epoch, "train_es": total / len(perm), "val_es": val,
                          "lr": opt.param_groups[0]["lr"]})
        if val < model.best_val:
            model.best_val, model.bad_epochs = val, 0
            model.best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        else:
            model.bad_epochs += 1
            if model.bad_epochs >= config.early_stop_patience:
                model.finished = True
        logger.info("epoch %d train %.4f val %.4f", epoch, total / len(perm), val)
    if model.epoch >= config.max_epochs:
        model.finished = True
    model.optimizer_state = copy.deepcopy(opt.state_dict())
    model.scheduler_state = copy.deepcopy(sched.state_dict())
    return model


# --------------------------------------------------------------------------
# inference


def _fields_array(fields, spec: NetworkSpec) -> np.ndarray:
    if isinstance(fields, FieldSample):
        arr = np.asarray(fields.values)[None]
    else:
        arr = np.asarray(fields, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
    if arr.shape[1:] != (spec.nx, spec.ny):
        raise DomainError(f"field shape {arr.shape[1:]} does not match network input {(spec.nx, spec.ny)}")
    return arr


def forward(model: TrainedModel, field, m: int, seed=0, latent_one: bool = False) -> PosteriorSample:
    """``m`` posterior draws for one field (natural scale).

    ``latent_one=True`` fixes the latent noise to 1, which collapses all
    draws onto a single point.
    """
    if m < 2:
        raise DomainError("posterior sampling needs m >= 2")
    return forward_batch(model, field, m, seed, latent_one)[0]


def forward_batch(model: TrainedModel, fields, m: int, seed=0, latent_one: bool = False,
                  chunk: int = 64) -> list:
    spec = model.spec
    arr = _fields_array(fields, spec)
    net = model.inference_net().eval()
    dtype = next(net.parameters()).dtype
    rng = np.random.default_rng(seed)
    out = []
    with torch.no_grad():
        for s in range(0, len(arr), chunk):
            xb = _prep(arr[s : s + chunk], dtype)
            if latent_one:
                lat = torch.ones((len(xb), m, spec.dense_width), dtype=dtype)
            else:
                lat = _latent(spec, len(xb), m, rng, dtype)
            nat = to_natural(net(xb, lat), spec.head).double().numpy()
            for v in nat:
                if spec.head == "param":
                    out.append(PosteriorSample(v, "params", model.family))
                else:
                    out.append(PosteriorSample(v, "theta", model.family, model.hgrid))
    return out


def point_estimate(model: TrainedModel, fields) -> np.ndarray:
    """Deterministic output of a network without noise layer, shape (n, 2)."""
    spec = model.spec
    arr = _fields_array(fields, spec)
    net = model.inference_net().eval()
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        lat = torch.ones((len(arr), 1, spec.dense_width), dtype=dtype)
        return to_natural(net(_prep(arr, dtype), lat), spec.head).double().numpy()[:, 0, :]


def enforce_monotone(values, functional="mean") -> np.ndarray:
    """Pointwise functional across draws, then ascending sort.

    Parameters
    ----------
    values : array (m, k) of theta draws
    functional : ``"mean"``, ``("quantile", q)`` or a float ``q``
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.size == 0:
        raise DomainError("empty posterior")
    if isinstance(functional, str):
        if functional != "mean":
            raise DomainError(f"unknown functional {functional!r}")
        curve = values.mean(axis=0)
    else:
        q = functional[1] if isinstance(functional, (tuple, list)) else float(functional)
        curve = np.quantile(values, q, axis=0)
    return np.sort(curve)


@dataclass
class Prediction:
    posterior: PosteriorSample
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    theta_mean: np.ndarray
    theta_lower: np.ndarray
    theta_upper: np.ndarray
    hgrid: HGrid

    def to_dict(self, include_samples: bool = True) -> dict:
        d = {
            "kind": self.posterior.kind,
            "family": None if self.posterior.family is None else self.posterior.family.value,
            "m": self.posterior.m,
            "alpha": self.alpha,
            "mean": self.mean.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "h": self.hgrid.points.tolist(),
            "theta_mean": self.theta_mean.tolist(),
            "theta_lower": self.theta_lower.tolist(),
            "theta_upper": self.theta_upper.tolist(),
        }
        if include_samples:
            d["samples"] = self.posterior.values.tolist()
        return d


def summarize_posterior(post: PosteriorSample, alpha: float = 0.05,
                        hgrid: HGrid | None = None) -> Prediction:
    """Mean, central interval and monotone theta summaries of a posterior sample."""
    hgrid = hgrid or post.grid or HGrid()
    curves = post.theta_draws(hgrid)
    if post.kind == "params":
        mean = post.mean()
        iv = post.interval(alpha)
        lower, upper = iv.lower, iv.upper
    else:
        mean = enforce_monotone(curves, "mean")
        lower = enforce_monotone(curves, ("quantile", alpha / 2))
        upper = enforce_monotone(curves, ("quantile", 1 - alpha / 2))
    return Prediction(
        post, mean, lower, upper, alpha,
        enforce_monotone(curves, "mean"),
        enforce_monotone(curves, ("quantile", alpha / 2)),
        enforce_monotone(curves, ("quantile", 1 - alpha / 2)),
        hgrid,
    )


def predict(model: TrainedModel, field, m: int | None = None, seed=0, alpha: float = 0.05) -> Prediction:
    """Posterior sample (default ``m_predict`` draws) plus derived summaries."""
    m = model.config.m_predict if m is None else m
    return summarize_posterior(forward(model, field, m, seed), alpha, model.hgrid)


# --------------------------------------------------------------------------
# checkpoints: npz container with a JSON header and little-endian tensors


def _tensor_dict(prefix: str, state: dict) -> dict:
    out = {}
    for k, v in state.items():
        arr = v.detach().cpu().numpy()
        out[f"{prefix}/{k}"] = arr.astype(arr.dtype.newbyteorder("<"))
    return out


def save_checkpoint(model: TrainedModel, path) -> Path:
    path = Path(path)
    arrays = _tensor_dict("weights", model.net.state_dict())
    if model.best_state is not None:
        arrays.update(_tensor_dict("best", model.best_state))
    opt_meta = None
    if model.optimizer_state is not None:
        opt_meta = {"param_groups": model.optimizer_state["param_groups"], "state": {}}
        for idx, st in model.optimizer_state["state"].items():
            opt_meta["state"][str(idx)] = {}
            for name, val in st.items():
                if torch.is_tensor(val):
                    arrays[f"opt/{idx}/{name}"] = val.detach().cpu().numpy()
                    opt_meta["state"][str(idx)][name] = "tensor"
                else:
                    opt_meta["state"][str(idx)][name] = val
    meta = {
        "format": "genmaxstable-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": asdict(model.spec),
        "config": asdict(model.config),
        "family": None if model.family is None else model.family.value,
        "hgrid": None if model.hgrid is None else {"dh": model.hgrid.dh, "k": model.hgrid.k},
        "log": model.log,
        "dataset_hash": model.dataset_hash,
        "epoch": model.epoch,
        "best_val": model.best_val,
        "bad_epochs": model.bad_epochs,
        "finished": model.finished,
        "optimizer": opt_meta,
        "scheduler": model.scheduler_state,
        "dtype": str(next(model.net.parameters()).dtype).replace("torch.", ""),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, default=_json_default).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if torch.is_tensor(o):
        return o.item() if o.numel() == 1 else o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def load_checkpoint(path) -> TrainedModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != "genmaxstable-checkpoint":
            raise DomainError(f"{path} is not a model checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise DomainError(f"checkpoint version {meta['version']} is newer than supported")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    spec = NetworkSpec(**meta["spec"])
    config = TrainConfig(**meta["config"])
    dtype = getattr(torch, meta.get("dtype", "float32"))
    net = build_model(spec, config.seed, dtype)
    net.load_state_dict({k[len("weights/"):]: torch.from_numpy(np.array(v))
                         for k, v in arrays.items() if k.startswith("weights/")})
    best = {k[len("best/"):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith("best/")}
    opt_state = None
    if meta.get("optimizer"):
        om = meta["optimizer"]
        state = {}
        for idx, st in om["state"].items():
            state[int(idx)] = {
                name: torch.from_numpy(np.array(arrays[f"opt/{idx}/{name}"])) if val == "tensor" else val
                for name, val in st.items()
            }
        opt_state = {"state": state, "param_groups": om["param_groups"]}
    hg = meta.get("hgrid")
    return TrainedModel(
        net, spec, config,
        None if meta["family"] is None else Family(meta["family"]),
        None if hg is None else HGrid(hg["dh"], hg["k"]),
        meta["log"], meta["dataset_hash"], meta["epoch"],
        math.inf if meta["best_val"] is None else meta["best_val"],
        meta["bad_epochs"], best or None, opt_state, meta.get("scheduler"),
        meta.get("finished", False),
    )
