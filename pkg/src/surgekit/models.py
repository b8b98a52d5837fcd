"""The three surrogate architectures and their shared graph container.

Each model maps atmospheric input ``(T, H, W, C)`` and tidal input ``(T, 1)``
(optionally with a leading batch axis) to a water-level series ``(T, 1)``.
The atmospheric encoder differs per architecture; the tidal series is
concatenated per time step onto the encoder output, followed by a small dense
head.
"""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as tn
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import ConfigError, DataError, DimensionError, IngestionError
from .layers import (
    GATE_ORDER, LSTM, Activation, BatchNorm, Conv2D, Conv3D, Dense, Dropout, Layer, StepFlatten,
)
from .tensor import Parameter, Tensor


class ArchitectureKind(enum.Enum):
    CNN_LSTM = "cnn-lstm"
    LSTM_ONLY = "lstm"
    CNN_3D = "3d-cnn"

    @classmethod
    def parse(cls, value) -> "ArchitectureKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"cnnlstm": "cnn-lstm", "lstm-only": "lstm", "lstmonly": "lstm",
                   "3dcnn": "3d-cnn", "cnn3d": "3d-cnn", "cnn-3d": "3d-cnn"}
        key = aliases.get(key, key)
        for kind in cls:
            if kind.value == key:
                return kind
        raise ConfigError(f"unknown architecture {value!r}; choose from {[k.value for k in cls]}")

    @property
    def label(self) -> str:
        return {"cnn-lstm": "CNN-LSTM", "lstm": "LSTM", "3d-cnn": "3DCNN"}[self.value]


class ModelGraph:
    """Ordered layers with a tidal fusion point between ``encoder`` and ``head``."""

    def __init__(self, kind: ArchitectureKind, steps: int, grid: tuple, encoder: list[Layer],
                 head: list[Layer], build: dict):
        self.kind = kind
        self.steps = steps
        self.grid = tuple(grid)
        self.encoder = encoder
        self.head = head
        self.build = build
        self.params: dict[str, Parameter] = {}
        for layer in self.layers:
            for p in layer.params:
                if p.name in self.params:
                    raise ConfigError(f"duplicate parameter name {p.name!r}")
                self.params[p.name] = p

    @property
    def layers(self) -> list[Layer]:
        return self.encoder + self.head

    @property
    def input_shape(self) -> tuple:
        return (self.steps, *self.grid)

    @property
    def output_shape(self) -> tuple:
        return (self.steps, 1)

    @property
    def dtype(self):
        return np.dtype(self.build.get("dtype", "float64"))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def count_params(self) -> int:
        return sum(int(np.prod(p.shape)) for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def reseed_dropout(self, seed: int) -> None:
        for i, layer in enumerate(l for l in self.layers if isinstance(l, Dropout)):
            layer.reseed(seed + i)

    def count_layers(self, kind: str) -> int:
        return sum(1 for layer in self.layers if layer.kind == kind)

    def _as_input(self, x, expected: tuple, what: str) -> Tensor:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        if arr.shape[-len(expected):] != expected or arr.ndim not in (len(expected), len(expected) + 1):
            raise DimensionError(f"{what}: expected {expected} or (N, *{expected}), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError(f"{what} contains non-finite values")
        if isinstance(x, Tensor) and x.dtype == self.dtype:
            return x
        return Tensor(arr, dtype=self.dtype)

    def forward(self, atmos, tide, mode: str = "infer") -> Tensor:
        """Predict ``(T, 1)`` (or ``(N, T, 1)`` for batched inputs)."""
        atmos = self._as_input(atmos, self.input_shape, "atmospheric input")
        tide = self._as_input(tide, (self.steps, 1), "tidal input")
        if (atmos.ndim == 5) != (tide.ndim == 3) or (atmos.ndim == 5 and atmos.shape[0] != tide.shape[0]):
            raise DimensionError(f"batch mismatch: atmos {atmos.shape} vs tide {tide.shape}")
        h = atmos
        for layer in self.encoder:
            h = layer(h, mode)
        h = tn.concat([h, tide], axis=-1)
        for layer in self.head:
            h = layer(h, mode)
        return h

    __call__ = forward

    def save(self, path, metadata: dict | None = None) -> None:
        blocks = []
        layers = []
        for layer in self.layers:
            layers.append({"name": layer.name, "type": layer.kind, "config": layer.config()})
            for p in layer.params:
                blocks.append((p.name, p.value.data))
            for key, value in layer.buffers().items():
                blocks.append((f"{layer.name}.{key}", value))
        header = {
            "architecture": self.kind.value,
            "build": self.build,
            "gate_order": list(GATE_ORDER),
            "layers": layers,
            "fusion_index": len(self.encoder),
            "metadata": metadata or {},
        }
        write_checkpoint(path, header, blocks)


def load_model(path) -> tuple[ModelGraph, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, metadata)``."""
    header, blocks = read_checkpoint(path)
    if header.get("gate_order") != list(GATE_ORDER):
        raise IngestionError(f"{path}: unsupported LSTM gate order {header.get('gate_order')}")
    kind = ArchitectureKind.parse(header["architecture"])
    build = dict(header["build"])
    model = build_model(kind, **build)
    for layer in model.layers:
        for p in layer.params:
            if p.name not in blocks:
                raise IngestionError(f"{path}: missing parameter block {p.name!r}")
            if blocks[p.name].shape != p.shape:
                raise IngestionError(
                    f"{path}: block {p.name!r} has shape {blocks[p.name].shape}, model expects {p.shape}")
            p.assign(blocks[p.name])
        for key in layer.buffers():
            layer.set_buffer(key, blocks[f"{layer.name}.{key}"])
    return model, header.get("metadata", {})


def _check_dims(steps: int, grid) -> tuple:
    grid = tuple(int(g) for g in grid)
    if len(grid) != 3:
        raise ConfigError(f"grid must be (H, W, C), got {grid}")
    if steps < 1 or min(grid) < 1:
        raise ConfigError(f"extents must be positive, got T={steps}, grid={grid}")
    return grid


def _conv_block(cls, c_in, c_out, idx, rng, kernel_size, dtype, prefix):
    return [
        cls(c_in, c_out, kernel_size=kernel_size, rng=rng, name=f"{prefix}_{idx}", dtype=dtype),
        BatchNorm(c_out, name=f"batchnorm_{idx}", dtype=dtype),
        Activation("relu", name=f"relu_{idx}", dtype=dtype),
    ]


def _head(in_features: int, hidden: int, dropout: float, rng, first_index: int, dtype) -> list[Layer]:
    return [
        Dense(in_features, hidden, "relu", rng=rng, name=f"dense_{first_index}", dtype=dtype),
        Dropout(dropout, name="dropout_1", dtype=dtype),
        Dense(hidden, 1, "linear", rng=rng, name=f"dense_{first_index + 1}", dtype=dtype),
    ]


def _finish(model: ModelGraph, seed: int) -> ModelGraph:
    model.reseed_dropout(seed + 7919)
    return model


def build_cnn_lstm(steps: int = 36, grid=(15, 15, 3), lstm_units: int = 128, *, seed: int = 0,
                   dropout: float = 0.2, kernel_size: int = 3, dtype="float64") -> ModelGraph:
    """Time-distributed Conv2D(32) -> Conv2D(16) -> Dense(16) -> LSTM -> [+tide] -> Dense(64) -> Dense(1)."""
    grid = _check_dims(steps, grid)
    h, w, c = grid
    rng = np.random.default_rng(seed)
    encoder = (
        _conv_block(Conv2D, c, 32, 1, rng, kernel_size, dtype, "conv2d")
        + _conv_block(Conv2D, 32, 16, 2, rng, kernel_size, dtype, "conv2d")
        + [
            StepFlatten(3, name="flatten_1", dtype=dtype),
            Dense(h * w * 16, 16, "relu", rng=rng, name="dense_1", dtype=dtype),
            LSTM(16, lstm_units, rng=rng, name="lstm_1", dtype=dtype),
        ]
    )
    head = _head(lstm_units + 1, 64, dropout, rng, 2, dtype)
    build = {"steps": steps, "grid": list(grid), "lstm_units": lstm_units, "seed": seed,
             "dropout": dropout, "kernel_size": kernel_size, "dtype": str(np.dtype(dtype))}
    return _finish(ModelGraph(ArchitectureKind.CNN_LSTM, steps, grid, encoder, head, build), seed)


def build_lstm(steps: int = 36, grid=(15, 15, 3), lstm_units: int = 128, *, seed: int = 0,
               dropout: float = 0.2, dtype="float64") -> ModelGraph:
    """Per-step flatten -> LSTM -> LSTM -> [+tide] -> Dense(64) -> Dense(1)."""
    grid = _check_dims(steps, grid)
    rng = np.random.default_rng(seed)
    encoder = [
        StepFlatten(3, name="flatten_1", dtype=dtype),
        LSTM(int(np.prod(grid)), lstm_units, rng=rng, name="lstm_1", dtype=dtype),
        LSTM(lstm_units, lstm_units, rng=rng, name="lstm_2", dtype=dtype),
    ]
    head = _head(lstm_units + 1, 64, dropout, rng, 1, dtype)
    build = {"steps": steps, "grid": list(grid), "lstm_units": lstm_units, "seed": seed,
             "dropout": dropout, "dtype": str(np.dtype(dtype))}
    return _finish(ModelGraph(ArchitectureKind.LSTM_ONLY, steps, grid, encoder, head, build), seed)


def build_3dcnn(steps: int = 36, grid=(15, 15, 3), *, seed: int = 0, dropout: float = 0.2,
                kernel_size: int = 3, dtype="float64") -> ModelGraph:
    """Conv3D(64) -> Conv3D(32) -> per-step flatten -> Dense(64) -> [+tide] -> Dense(32) -> Dense(1)."""
    grid = _check_dims(steps, grid)
    h, w, c = grid
    rng = np.random.default_rng(seed)
    encoder = (
        _conv_block(Conv3D, c, 64, 1, rng, kernel_size, dtype, "conv3d")
        + _conv_block(Conv3D, 64, 32, 2, rng, kernel_size, dtype, "conv3d")
        + [
            StepFlatten(3, name="flatten_1", dtype=dtype),
            Dense(h * w * 32, 64, "linear", rng=rng, name="dense_1", dtype=dtype),
            BatchNorm(64, name="batchnorm_3", dtype=dtype),
            Activation("relu", name="relu_3", dtype=dtype),
        ]
    )
    head = _head(64 + 1, 32, dropout, rng, 2, dtype)
    build = {"steps": steps, "grid": list(grid), "seed": seed, "dropout": dropout,
             "kernel_size": kernel_size, "dtype": str(np.dtype(dtype))}
    return _finish(ModelGraph(ArchitectureKind.CNN_3D, steps, grid, encoder, head, build), seed)


BUILDERS = {
    ArchitectureKind.CNN_LSTM: build_cnn_lstm,
    ArchitectureKind.LSTM_ONLY: build_lstm,
    ArchitectureKind.CNN_3D: build_3dcnn,
}


def build_model(kind, steps: int = 36, grid=(15, 15, 3), **kwargs) -> ModelGraph:
    kind = ArchitectureKind.parse(kind)
    if kind is ArchitectureKind.CNN_3D:
        kwargs.pop("lstm_units", None)
    return BUILDERS[kind](steps, grid, **kwargs)


def forward(model: ModelGraph, atmos, tide, mode: str = "infer") -> Tensor:
    return model.forward(atmos, tide, mode)
