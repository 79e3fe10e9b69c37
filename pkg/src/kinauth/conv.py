"""Valid temporal convolution with tanh and non-overlapping max pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ConvLayer:
    filters: int
    width: int
    pool: int = 1


@dataclass(frozen=True)
class ConvSpec:
    layers: tuple = ()
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, ConvLayer) else ConvLayer(*l) for l in self.layers))
        if self.activation not in ("tanh", "identity"):
            raise ConfigError(f"unknown conv activation {self.activation!r}")

    def output_length(self, length: int) -> int:
        for i, layer in enumerate(self.layers):
            conv_len = length - layer.width + 1
            if conv_len < 1 or conv_len // layer.pool < 1:
                raise ConfigError(
                    f"conv layer {i} (width {layer.width}, pool {layer.pool}) "
                    f"cannot process input of length {length}")
            length = conv_len // layer.pool
        return length

    def output_dim(self, input_dim: int) -> int:
        return self.layers[-1].filters if self.layers else input_dim

    @classmethod
    def parse(cls, text: str, activation="tanh"):
        """``"25:7:2;25:7:2"`` -> two layers of 25 filters, width 7, pool 2."""
        layers = []
        for item in filter(None, (s.strip() for s in text.split(";"))):
            parts = [int(p) for p in item.split(":")]
            if len(parts) not in (2, 3):
                raise ConfigError(f"bad conv layer spec {item!r}")
            layers.append(ConvLayer(*parts))
        return cls(tuple(layers), activation)

    def format(self) -> str:
        return ";".join(f"{l.filters}:{l.width}:{l.pool}" for l in self.layers)


def _windows(X, width):
    # (M, L, C) -> (M, L - width + 1, width * C)
    win = np.lib.stride_tricks.sliding_window_view(X, width, axis=1)
    M, T, C, _ = win.shape
    return win.transpose(0, 1, 3, 2).reshape(M, T, width * C)


def conv_layer_forward(X, K, b, pool, activation="tanh"):
    """One layer. ``X`` is (M, L, C); ``K`` is (F, width, C)."""
    F, width, C = K.shape
    cols = _windows(X, width)
    Z = cols @ K.reshape(F, width * C).T + b
    Y = np.tanh(Z) if activation == "tanh" else Z
    M, T, _ = Y.shape
    Tp = T // pool
    grouped = Y[:, :Tp * pool].reshape(M, Tp, pool, F)
    arg = grouped.argmax(axis=2)
    out = np.take_along_axis(grouped, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return out, (X.shape, cols, K, Y, arg, pool, activation)


def conv_layer_backward(cache, dOut):
    x_shape, cols, K, Y, arg, pool, activation = cache
    F, width, C = K.shape
    M, T, _ = Y.shape
    Tp = dOut.shape[1]
    dY = np.zeros_like(Y)
    dgroup = np.zeros((M, Tp, pool, F))
    np.put_along_axis(dgroup, arg[:, :, None, :], dOut[:, :, None, :], axis=2)
    dY[:, :Tp * pool] = dgroup.reshape(M, Tp * pool, F)
    dZ = dY * (1.0 - Y * Y) if activation == "tanh" else dY
    flat = dZ.reshape(M * T, F)
    dK = (flat.T @ cols.reshape(M * T, width * C)).reshape(F, width, C)
    db = flat.sum(axis=0)
    dcols = (flat @ K.reshape(F, width * C)).reshape(M, T, width, C)
    dX = np.zeros(x_shape)
    for j in range(width):
        dX[:, j:j + T] += dcols[:, :, j]
    return dK, db, dX


def conv1d_forward(block, spec: ConvSpec, weights):
    """Run the stack on an (L, C) block or (M, L, C) batch.

    ``weights`` is a sequence of ``(K, b)`` pairs, one per layer.
    """
    X = np.asarray(block, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    spec.output_length(X.shape[1])
    for layer, (K, b) in zip(spec.layers, weights):
        X, _ = conv_layer_forward(X, K, b, layer.pool, spec.activation)
    return X[0] if single else X
