"""The verification network: three conv blocks, max-pool, and a linear head.

Each block is conv (stride 2, symmetric padding) -> batchnorm -> ReLU, so the
sequence length halves per block; the max-pool (window 3, stride 2, pad 1)
halves it once more before the flattened features reach the two-logit head.
With the default geometry the length trace is 800 -> 400 -> 200 -> 100 -> 50
and the head maps 128 * 50 = 6400 features to 2 logits.

Parameters live in a ``ModelParams`` mapping with a canonical name order, so
they can be flattened to a single vector for exchange between training agents
and restored bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import layers

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Batch",
    "param_layout",
    "param_count",
    "build_model",
    "forward",
    "backward",
    "flatten_params",
    "unflatten_params",
    "save_checkpoint",
    "load_checkpoint",
]

NUM_BLOCKS = 3
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

CHECKPOINT_MAGIC = b"FSIG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults match the full-scale verifier."""

    kernel_size: int = 61
    channel_widths: tuple[int, int, int] = (32, 64, 128)
    input_channels: int = 2
    max_length: int = 800
    pool_window: int = 3
    pool_stride: int = 2
    pool_pad: int = 1
    conv_stride: int = 2
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if len(self.channel_widths) != NUM_BLOCKS:
            raise ValueError(f"expected {NUM_BLOCKS} channel widths, got {self.channel_widths}")
        if any(w < 1 for w in self.channel_widths):
            raise ValueError(f"channel widths must be positive, got {self.channel_widths}")
        if self.max_length % (2 ** NUM_BLOCKS) != 0:
            raise ValueError(
                f"max_length must be divisible by {2 ** NUM_BLOCKS} for exact halving, got {self.max_length}"
            )
        object.__setattr__(self, "channel_widths", tuple(self.channel_widths))

    @property
    def conv_pad(self) -> int:
        # symmetric padding (k-1)/2 keeps the stride-2 conv an exact halving
        return (self.kernel_size - 1) // 2

    def length_trace(self) -> list[int]:
        """Sequence lengths after the input, each conv block, and the pool."""
        lengths = [self.max_length]
        for _ in range(NUM_BLOCKS):
            lengths.append(
                layers.conv1d_output_length(lengths[-1], self.kernel_size, self.conv_stride, self.conv_pad)
            )
        lengths.append(
            layers.conv1d_output_length(lengths[-1], self.pool_window, self.pool_stride, self.pool_pad)
        )
        return lengths

    @property
    def feature_dim(self) -> int:
        return self.channel_widths[-1] * self.length_trace()[-1]

    def to_dict(self) -> dict:
        return {
            "kernel_size": self.kernel_size,
            "channel_widths": list(self.channel_widths),
            "input_channels": self.input_channels,
            "max_length": self.max_length,
            "pool_window": self.pool_window,
            "pool_stride": self.pool_stride,
            "pool_pad": self.pool_pad,
            "conv_stride": self.conv_stride,
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "channel_widths" in d:
            d["channel_widths"] = tuple(d["channel_widths"])
        return cls(**d)

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


RUNNING_STAT_SUFFIXES = ("bn_run_mean", "bn_run_var")


def param_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; flattening follows this order exactly."""
    layout: list[tuple[str, tuple[int, ...]]] = []
    c_in = config.input_channels
    for b, width in enumerate(config.channel_widths):
        layout.append((f"block{b}.conv_weight", (width, c_in, config.kernel_size)))
        layout.append((f"block{b}.conv_bias", (width,)))
        layout.append((f"block{b}.bn_gamma", (width,)))
        layout.append((f"block{b}.bn_beta", (width,)))
        layout.append((f"block{b}.bn_run_mean", (width,)))
        layout.append((f"block{b}.bn_run_var", (width,)))
        c_in = width
    layout.append(("head.weight", (config.feature_dim, config.num_classes)))
    layout.append(("head.bias", (config.num_classes,)))
    return layout


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(config))


class ModelParams:
    """Ordered, named collection of parameter tensors.

    Running batch-norm statistics are carried alongside the trainable weights
    (they are part of the state exchanged between agents), but are excluded
    from gradients and optimizer updates.
    """

    def __init__(self, tensors: dict[str, np.ndarray]):
        self._tensors = {name: np.asarray(t, dtype=np.float64) for name, t in tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.names == other.names and all(
            np.array_equal(self._tensors[n], other._tensors[n]) for n in self.names
        )

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    @property
    def trainable_names(self) -> list[str]:
        return [n for n in self._tensors if not n.endswith(RUNNING_STAT_SUFFIXES)]

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams({n: t.copy() for n, t in self._tensors.items()})

    def replace(self, updates: dict[str, np.ndarray]) -> "ModelParams":
        """New ModelParams with the given tensors swapped in (others shared)."""
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        merged = dict(self._tensors)
        for name, tensor in updates.items():
            tensor = np.asarray(tensor, dtype=np.float64)
            if tensor.shape != self._tensors[name].shape:
                raise ValueError(f"shape mismatch for {name}: {tensor.shape} vs {self._tensors[name].shape}")
            merged[name] = tensor
        return ModelParams(merged)


@dataclass
class Batch:
    """A training batch: inputs (N, 2, T_max) with one class index per row."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 3:
            raise ValueError(f"batch inputs must be (N, C, T), got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("one label per batch row required")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def build_model(config: ModelConfig) -> ModelParams:
    """Initialize parameters: conv/linear weights uniform in +-sqrt(1/fan_in),
    biases zero, gamma one, beta zero, running stats at the identity."""
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, np.ndarray] = {}
    c_in = config.input_channels
    for b, width in enumerate(config.channel_widths):
        bound = 1.0 / np.sqrt(c_in * config.kernel_size)
        tensors[f"block{b}.conv_weight"] = rng.uniform(-bound, bound, size=(width, c_in, config.kernel_size))
        tensors[f"block{b}.conv_bias"] = np.zeros(width)
        tensors[f"block{b}.bn_gamma"] = np.ones(width)
        tensors[f"block{b}.bn_beta"] = np.zeros(width)
        tensors[f"block{b}.bn_run_mean"] = np.zeros(width)
        tensors[f"block{b}.bn_run_var"] = np.ones(width)
        c_in = width
    bound = 1.0 / np.sqrt(config.feature_dim)
    tensors["head.weight"] = rng.uniform(-bound, bound, size=(config.feature_dim, config.num_classes))
    tensors["head.bias"] = np.zeros(config.num_classes)
    return ModelParams(tensors)


@dataclass
class ForwardCaches:
    """Per-layer caches from one forward pass, consumed by ``backward``."""

    conv: list
    bn: list
    relu: list
    pool: object
    head: object
    flat_shape: tuple[int, ...]  # pooled activation shape before flattening
    train: bool


def forward(
    params: ModelParams, inputs: np.ndarray, config: ModelConfig, train: bool
) -> tuple[np.ndarray, ForwardCaches, dict[str, np.ndarray]]:
    """Run the network on ``inputs (N, 2, T_max)``.

    Returns logits ``(N, 2)``, the layer caches, and the updated running
    statistics produced by the batch-norm layers (empty in eval mode; the
    caller decides whether to fold them into its parameter state).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[1] != config.input_channels or inputs.shape[2] != config.max_length:
        raise ValueError(
            f"expected inputs (N, {config.input_channels}, {config.max_length}), got {inputs.shape}"
        )
    conv_caches, bn_caches, relu_caches = [], [], []
    updated_stats: dict[str, np.ndarray] = {}
    x = inputs
    for block in range(NUM_BLOCKS):
        prefix = f"block{block}"
        x, c_cache = layers.conv1d(
            x,
            params[f"{prefix}.conv_weight"],
            params[f"{prefix}.conv_bias"],
            stride=config.conv_stride,
            pad=config.conv_pad,
        )
        conv_caches.append(c_cache)
        x, b_cache = layers.batchnorm1d(
            x,
            params[f"{prefix}.bn_gamma"],
            params[f"{prefix}.bn_beta"],
            params[f"{prefix}.bn_run_mean"],
            params[f"{prefix}.bn_run_var"],
            train=train,
            eps=BN_EPS,
            momentum=BN_MOMENTUM,
        )
        bn_caches.append(b_cache)
        if train:
            updated_stats[f"{prefix}.bn_run_mean"] = b_cache.new_running_mean
            updated_stats[f"{prefix}.bn_run_var"] = b_cache.new_running_var
        x, r_cache = layers.relu(x)
        relu_caches.append(r_cache)

    x, pool_cache = layers.maxpool1d(
        x, window=config.pool_window, stride=config.pool_stride, pad=config.pool_pad
    )
    flat_shape = x.shape
    # channel-major flatten: (N, C, L) -> (N, C*L) with C varying slowest
    flat = x.reshape(x.shape[0], -1)
    logits, head_cache = layers.linear(flat, params["head.weight"], params["head.bias"])
    caches = ForwardCaches(conv_caches, bn_caches, relu_caches, pool_cache, head_cache, flat_shape, train)
    return logits, caches, updated_stats


def backward(params: ModelParams, caches: ForwardCaches, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for every trainable tensor.

    ``grad_logits`` is dLoss/dlogits from the loss layer; the result maps each
    trainable parameter name to a gradient of matching shape.
    """
    if not caches.train:
        raise ValueError("backward requires caches from a train-mode forward pass")
    grads: dict[str, np.ndarray] = {}
    g, gw, gb = layers.linear_backward(caches.head, grad_logits)
    grads["head.weight"] = gw
    grads["head.bias"] = gb
    g = g.reshape(caches.flat_shape)
    g = layers.maxpool1d_backward(caches.pool, g)
    for block in reversed(range(len(caches.conv))):
        prefix = f"block{block}"
        g = layers.relu_backward(caches.relu[block], g)
        g, g_gamma, g_beta = layers.batchnorm1d_backward(caches.bn[block], g)
        grads[f"{prefix}.bn_gamma"] = g_gamma
        grads[f"{prefix}.bn_beta"] = g_beta
        g, g_w, g_b = layers.conv1d_backward(caches.conv[block], g)
        grads[f"{prefix}.conv_weight"] = g_w
        grads[f"{prefix}.conv_bias"] = g_b
    expected = set(params.trainable_names)
    assert set(grads) == expected, "gradient names out of sync with parameters"
    return grads


def flatten_params(params: ModelParams) -> np.ndarray:
    """Concatenate every tensor (canonical order, row-major) into one vector."""
    return np.concatenate([params[name].ravel() for name in params.names])


def unflatten_params(flat: np.ndarray, config: ModelConfig) -> ModelParams:
    flat = np.asarray(flat, dtype=np.float64)
    layout = param_layout(config)
    total = sum(int(np.prod(shape)) for _, shape in layout)
    if flat.shape != (total,):
        raise ValueError(f"flat vector has {flat.shape} entries, config requires {total}")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in layout:
        size = int(np.prod(shape))
        tensors[name] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    return ModelParams(tensors)


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig) -> None:
    """Write a checkpoint: magic, version, JSON header, little-endian f64 data.

    Layout: 4-byte magic ``FSIG``, uint32 version, uint32 header length, the
    UTF-8 JSON header (config echo plus scalar count), then the flattened
    parameter vector as little-endian float64.
    """
    flat = flatten_params(params)
    header = json.dumps({"config": config.to_dict(), "count": int(flat.size)}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(flat.astype("<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a fedsig checkpoint (bad magic {magic!r})")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if flat.size != header["count"]:
        raise ValueError(f"{path}: truncated checkpoint ({flat.size} of {header['count']} values)")
    return unflatten_params(flat, config), config
