"""Gaussian negative-log-likelihood training with early stopping.

Predictors are standardized per gridpoint against training-period statistics;
the predictand stays in physical units. Optimization is Adam on mini-batch
mean NLL, with a random 10% validation split, patience-based early stopping,
and best-checkpoint restore. Every stochastic choice (init, split, per-epoch
shuffle) derives from the single seed in TrainConfig.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import GridField, PeriodSpec
from .model import DeepESDConfig, ModelParams, Prediction, forward, forward_tensors, init_params
from .seeding import derive_seed
from .tensor import NonFiniteError, Tensor, backward

LOG_2PI = math.log(2.0 * math.pi)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during optimization."""


def gaussian_nll(mu, sigma2, y) -> Tensor:
    """Mean Gaussian NLL, 0.5*log(2*pi*sigma2) + (y - mu)^2 / (2*sigma2).

    Differentiable w.r.t. mu and sigma2 when those are graph tensors; the
    mean runs over all samples and gridpoints.
    """
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    sigma2 = sigma2 if isinstance(sigma2, Tensor) else Tensor(sigma2)
    y = y if isinstance(y, Tensor) else Tensor(y)
    if (sigma2.data <= 0).any():
        raise ValueError("sigma2 must be strictly positive")
    quad = T.div(T.square(T.sub(y, mu)), T.mul(sigma2, 2.0))
    return T.add_scalar(T.tmean(T.add(T.mul(T.log(sigma2), 0.5), quad)), 0.5 * LOG_2PI)


def gaussian_nll_value(mu: np.ndarray, sigma2: np.ndarray, y: np.ndarray) -> float:
    """Plain-array NLL for evaluation passes that need no gradients."""
    if mu.shape != y.shape or sigma2.shape != y.shape:
        raise ValueError(f"shape mismatch: mu {mu.shape}, sigma2 {sigma2.shape}, y {y.shape}")
    if (sigma2 <= 0).any():
        raise ValueError("sigma2 must be strictly positive")
    return float(np.mean(0.5 * (LOG_2PI + np.log(sigma2)) + (y - mu) ** 2 / (2.0 * sigma2)))


# ---------------------------------------------------------------------------
# predictor standardization

@dataclass
class StandardizationStats:
    """Per-gridpoint mean and population std of the training-period predictors."""

    mean: np.ndarray  # [C, H, W]
    std: np.ndarray   # [C, H, W], strictly positive
    computed_over: str

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "computed_over": self.computed_over}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(mean=np.array(d["mean"], dtype=np.float64),
                   std=np.array(d["std"], dtype=np.float64),
                   computed_over=str(d["computed_over"]))


def fit_standardizer(x: GridField, period: PeriodSpec) -> StandardizationStats:
    from .data import select_period

    sub = select_period(x, period)
    mean = sub.values.mean(axis=0)
    std = sub.values.std(axis=0)  # population std
    flat = (std <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    if flat.any():
        warnings.warn(f"{int(flat.sum())} constant predictor gridpoints; std set to 1",
                      stacklevel=2)
        std = np.where(flat, 1.0, std)
    return StandardizationStats(mean=mean, std=std, computed_over=period.label)


def apply_standardizer(x: GridField, stats: StandardizationStats) -> GridField:
    if x.values.shape[1:] != stats.mean.shape:
        raise ValueError(f"field shape {x.values.shape[1:]} does not match "
                         f"standardizer shape {stats.mean.shape}")
    return GridField(values=(x.values - stats.mean) / stats.std,
                     variables=list(x.variables), lat=x.lat, lon=x.lon,
                     time=x.time, units=["standardized"] * len(x.variables))


def invert_standardizer(x: GridField, stats: StandardizationStats) -> GridField:
    if x.values.shape[1:] != stats.mean.shape:
        raise ValueError(f"field shape {x.values.shape[1:]} does not match "
                         f"standardizer shape {stats.mean.shape}")
    return GridField(values=x.values * stats.std + stats.mean,
                     variables=list(x.variables), lat=x.lat, lon=x.lon,
                     time=x.time, units=list(x.units))


def split_train_val(n_samples: int, val_fraction: float = 0.10, seed: int = 0):
    """Random, disjoint, exhaustive train/validation index split."""
    if n_samples < 10:
        raise ValueError(f"need at least 10 samples to split, got {n_samples}")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_val = int(round(val_fraction * n_samples))
    n_val = min(max(n_val, 1), n_samples - 1)
    perm = np.random.default_rng(seed).permutation(n_samples)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction; operates in place on parameter tensors."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 30
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.patience >= self.max_epochs:
            raise ValueError(f"patience {self.patience} must be below max_epochs {self.max_epochs}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainedModel:
    params: ModelParams
    stats: StandardizationStats
    history: list = field(default_factory=list)  # rows: epoch, train_nll, val_nll, is_best
    stopped_epoch: int = 0

    def predict(self, x: GridField) -> Prediction:
        xs = apply_standardizer(x, self.stats)
        return forward(self.params, xs.values)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_nll", "val_nll", "is_best"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_nll"]), repr(row["val_nll"]),
                             int(row["is_best"])])


def _as_samples(y: GridField) -> np.ndarray:
    """Predictand [T, C, H, W] flattened to [T, G] row-major."""
    t = y.values.shape[0]
    return y.values.reshape(t, -1)


def _val_nll(params, x_std, y_flat, idx, chunk=512) -> float:
    pred = forward(params, x_std[idx], chunk=chunk)
    return gaussian_nll_value(pred.mu, pred.sigma2, y_flat[idx])


def train(x: GridField, y: GridField, model_config: DeepESDConfig,
          train_config: TrainConfig) -> TrainedModel:
    """Fit one model on time-aligned predictor/predictand fields.

    The caller selects the training period; standardization statistics are
    computed over exactly the data passed in.
    """
    if x.time != y.time:
        raise ValueError("predictors and predictand must be time-aligned; use align_time")

    years = x.time.years()
    period = PeriodSpec(int(years[0]), int(years[-1]))
    stats = fit_standardizer(x, period)
    x_std = apply_standardizer(x, stats).values
    y_flat = _as_samples(y)

    g = y_flat.shape[1]
    if model_config.n_output_gridpoints != g:
        raise ValueError(f"model expects {model_config.n_output_gridpoints} output gridpoints "
                         f"but predictand has {g}")

    base = train_config.seed
    params = init_params(model_config, derive_seed(base, 1))
    train_idx, val_idx = split_train_val(x_std.shape[0], train_config.val_fraction,
                                         derive_seed(base, 2))
    opt = Adam(params.tensors(), lr=train_config.learning_rate)

    history = []
    best_val = math.inf
    best_state = params.state_arrays()
    since_best = 0

    for epoch in range(train_config.max_epochs):
        order = np.random.default_rng(derive_seed(base, 3, epoch)).permutation(train_idx)
        loss_sum = 0.0
        for start in range(0, order.size, train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            try:
                mu, sigma2 = forward_tensors(params, Tensor(x_std[batch]))
                loss = gaussian_nll(mu, sigma2, Tensor(y_flat[batch]))
                opt.zero_grad()
                backward(loss)
                opt.step()
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // train_config.batch_size}: "
                    f"{exc}") from exc
            loss_sum += float(loss.data) * batch.size

        train_nll = loss_sum / order.size
        val_nll = _val_nll(params, x_std, y_flat, val_idx)
        is_best = val_nll < best_val
        if is_best:
            best_val = val_nll
            best_state = params.state_arrays()
            since_best = 0
        else:
            since_best += 1
        history.append({"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll,
                        "is_best": is_best})
        if since_best >= train_config.patience:
            break

    params.load_state_arrays(best_state)
    return TrainedModel(params=params, stats=stats, history=history,
                        stopped_epoch=len(history))
