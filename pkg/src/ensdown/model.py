"""Convolutional distributional-regression model with a per-gridpoint Gaussian head.

Three conv+ReLU stages over the coarse predictor grid, flattened into one
dense linear layer that emits, per sample, a mean and a raw scale value for
every output gridpoint. The scale is mapped to a standard deviation via
softplus plus an additive floor, so predicted variances are bounded away
from zero by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import __version__
from . import tensor as T
from .tensor import Tensor

PARAMS_MAGIC = b"ENSDOWN-PARAMS-v1"


class ParamsFormatError(ValueError):
    """Parameter stream is corrupt, truncated, or not in the expected format."""


class ConfigMismatchError(ValueError):
    """Parameter stream was written for a different model configuration."""


@dataclass(frozen=True)
class DeepESDConfig:
    """Architecture hyperparameters; the parameter layout is a pure function of these."""

    input_channels: int
    coarse_height: int
    coarse_width: int
    n_output_gridpoints: int
    conv_channels: tuple = (50, 25, 10)
    kernel_size: int = 3
    sigma_floor: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if len(self.conv_channels) != 3:
            raise ValueError(f"conv_channels must have length 3, got {self.conv_channels}")
        if any(c < 1 for c in self.conv_channels):
            raise ValueError(f"conv_channels must be positive, got {self.conv_channels}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.sigma_floor <= 0:
            raise ValueError(f"sigma_floor must be positive, got {self.sigma_floor}")
        for name in ("input_channels", "coarse_height", "coarse_width", "n_output_gridpoints"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive count")

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "coarse_height": self.coarse_height,
            "coarse_width": self.coarse_width,
            "n_output_gridpoints": self.n_output_gridpoints,
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "sigma_floor": self.sigma_floor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeepESDConfig":
        return cls(
            input_channels=int(d["input_channels"]),
            coarse_height=int(d["coarse_height"]),
            coarse_width=int(d["coarse_width"]),
            n_output_gridpoints=int(d["n_output_gridpoints"]),
            conv_channels=tuple(d["conv_channels"]),
            kernel_size=int(d["kernel_size"]),
            sigma_floor=float(d["sigma_floor"]),
        )


def layer_shapes(config: DeepESDConfig) -> list:
    """Ordered (name, shape) pairs defining the serialized parameter layout."""
    k = config.kernel_size
    chans = (config.input_channels,) + config.conv_channels
    shapes = []
    for i in range(3):
        shapes.append((f"conv{i + 1}_kernels", (chans[i + 1], chans[i], k, k)))
        shapes.append((f"conv{i + 1}_bias", (chans[i + 1],)))
    n_flat = config.conv_channels[-1] * config.coarse_height * config.coarse_width
    shapes.append(("dense_weights", (n_flat, 2 * config.n_output_gridpoints)))
    shapes.append(("dense_bias", (2 * config.n_output_gridpoints,)))
    return shapes


def param_count(config: DeepESDConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in layer_shapes(config))


@dataclass
class ModelParams:
    """All trainable weights of one network, in declared layer order."""

    config: DeepESDConfig
    seed: int | None
    conv_kernels: list
    conv_biases: list
    dense_weights: Tensor
    dense_bias: Tensor

    def named(self):
        for i in range(3):
            yield f"conv{i + 1}_kernels", self.conv_kernels[i]
            yield f"conv{i + 1}_bias", self.conv_biases[i]
        yield "dense_weights", self.dense_weights
        yield "dense_bias", self.dense_bias

    def tensors(self) -> list:
        return [t for _, t in self.named()]

    def state_arrays(self) -> list:
        """Copies of the raw parameter arrays, for checkpoint snapshots."""
        return [t.data.copy() for t in self.tensors()]

    def load_state_arrays(self, arrays) -> None:
        for t, arr in zip(self.tensors(), arrays, strict=True):
            if t.data.shape != arr.shape:
                raise ConfigMismatchError(
                    f"state array shape {arr.shape} does not match parameter {t.data.shape}")
            t.data = arr.copy()


def _params_from_arrays(config: DeepESDConfig, seed, arrays) -> ModelParams:
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    return ModelParams(
        config=config,
        seed=seed,
        conv_kernels=[tensors[0], tensors[2], tensors[4]],
        conv_biases=[tensors[1], tensors[3], tensors[5]],
        dense_weights=tensors[6],
        dense_bias=tensors[7],
    )


def init_params(config: DeepESDConfig, seed: int) -> ModelParams:
    """He-style initialization: weights ~ N(0, 2/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    arrays = []
    for name, shape in layer_shapes(config):
        if name.endswith("bias"):
            arrays.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            arrays.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
    return _params_from_arrays(config, seed, arrays)


@dataclass
class Prediction:
    """Per-time, per-gridpoint Gaussian parameters from one model."""

    mu: np.ndarray      # [time, gridpoints]
    sigma2: np.ndarray  # [time, gridpoints], strictly positive

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if self.mu.shape != self.sigma2.shape or self.mu.ndim != 2:
            raise ValueError(
                f"mu and sigma2 must be equal-shaped 2-d arrays, got {self.mu.shape} and {self.sigma2.shape}")
        if not (np.isfinite(self.mu).all() and np.isfinite(self.sigma2).all()):
            raise ValueError("prediction contains non-finite values")
        if (self.sigma2 <= 0).any():
            raise ValueError("sigma2 must be strictly positive")


def forward_tensors(params: ModelParams, x: Tensor):
    """Differentiable forward pass; returns (mu, sigma2) tensors of shape [N, G]."""
    cfg = params.config
    expected = (cfg.input_channels, cfg.coarse_height, cfg.coarse_width)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise T.ShapeError(
            f"input shape {x.shape} does not match configured [N, {expected[0]}, {expected[1]}, {expected[2]}]")
    h = x
    for kernels, bias in zip(params.conv_kernels, params.conv_biases):
        h = T.relu(T.conv2d(h, kernels, bias))
    out = T.dense(T.flatten(h), params.dense_weights, params.dense_bias)
    g = cfg.n_output_gridpoints
    mu = T.slice_cols(out, 0, g)
    sigma = T.add_scalar(T.softplus(T.slice_cols(out, g, 2 * g)), cfg.sigma_floor)
    return mu, T.square(sigma)


def forward(params: ModelParams, x: np.ndarray, chunk: int = 512) -> Prediction:
    """Inference over x [N, C, H, W]; evaluated in chunks to bound memory."""
    x = np.asarray(x, dtype=np.float64)
    mus, sig2s = [], []
    for start in range(0, x.shape[0], chunk):
        mu, sigma2 = forward_tensors(params, Tensor(x[start:start + chunk]))
        mus.append(mu.data)
        sig2s.append(sigma2.data)
    return Prediction(mu=np.concatenate(mus), sigma2=np.concatenate(sig2s))


# ---------------------------------------------------------------------------
# serialization: magic, length-prefixed JSON header, little-endian float64 payload

def save_params(params: ModelParams) -> bytes:
    header = {
        "format": PARAMS_MAGIC.decode(),
        "config": params.config.to_dict(),
        "seed": params.seed,
        "created_by": f"ensdown {__version__}",
        "layers": [{"name": n, "shape": list(t.data.shape)} for n, t in params.named()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(t.data.astype("<f8").tobytes() for _, t in params.named())
    return PARAMS_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload


def load_params(blob: bytes, expected_config: DeepESDConfig | None = None) -> ModelParams:
    if not blob.startswith(PARAMS_MAGIC[:min(len(blob), len(PARAMS_MAGIC))]) or len(blob) < len(PARAMS_MAGIC):
        raise ParamsFormatError("not an ENSDOWN-PARAMS-v1 stream (bad magic)")
    if len(blob) < len(PARAMS_MAGIC) + 4:
        raise ParamsFormatError("truncated stream: missing header length")
    off = len(PARAMS_MAGIC)
    (header_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + header_len:
        raise ParamsFormatError("truncated stream: header incomplete")
    try:
        header = json.loads(blob[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParamsFormatError(f"corrupt header: {exc}") from exc
    off += header_len

    try:
        config = DeepESDConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParamsFormatError(f"corrupt header: bad config: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(
            f"stream written for config {config.to_dict()}, expected {expected_config.to_dict()}")

    shapes = layer_shapes(config)
    declared = [(d.get("name"), tuple(d.get("shape", []))) for d in header.get("layers", [])]
    if declared != [(n, s) for n, s in shapes]:
        raise ParamsFormatError("header layer layout does not match the declared config")

    n_vals = param_count(config)
    expected_bytes = n_vals * 8
    if len(blob) - off != expected_bytes:
        raise ParamsFormatError(
            f"payload has {len(blob) - off} bytes, expected {expected_bytes}")
    flat = np.frombuffer(blob, dtype="<f8", count=n_vals, offset=off)

    arrays = []
    pos = 0
    for _, shape in shapes:
        n = int(np.prod(shape))
        arrays.append(flat[pos:pos + n].reshape(shape).astype(np.float64))
        pos += n
    return _params_from_arrays(config, header.get("seed"), arrays)


def save_params_file(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_params(params))


def load_params_file(path, expected_config: DeepESDConfig | None = None) -> ModelParams:
    with open(path, "rb") as fh:
        return load_params(fh.read(), expected_config)
