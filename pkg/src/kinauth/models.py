"""Feature-extractor graphs: conv front-end, one recurrent family, softmax head.

Per block, the conv stack maps L frames to L' vectors; the recurrent cell
steps through those vectors (state and step counter carried from block to
block); hidden states are mean-pooled over the block to give the penultimate
feature ``y``; the head is ``softmax(V y + c)``. The ``conv`` family skips the
recurrent layer and pools the conv output directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import cells
from .cells import ClockworkConfig
from .conv import ConvSpec, conv_layer_forward
from .errors import ConfigError, DataError
from .signal import SequenceBatch
from .storage import read_container, write_container

FAMILIES = ("rnn", "lstm", "cwrnn", "dcwrnn", "conv")
MODEL_TAG = "kinauth-model-v1"


@dataclass(frozen=True)
class ModelConfig:
    family: str = "dcwrnn"
    input_dim: int = 14
    hidden: int = 8
    clockwork: Optional[ClockworkConfig] = None
    conv: ConvSpec = field(default_factory=ConvSpec)
    n_classes: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.family in ("cwrnn", "dcwrnn"):
            if self.clockwork is None:
                raise ConfigError(f"{self.family} needs a clockwork configuration")
            object.__setattr__(self, "hidden", self.clockwork.hidden)

    @property
    def cell_input_dim(self):
        return self.conv.output_dim(self.input_dim)

    @property
    def feature_dim(self):
        return self.cell_input_dim if self.family == "conv" else self.hidden


@dataclass
class ModelGraph:
    config: ModelConfig
    params: dict

    @property
    def family(self):
        return self.config.family

    @property
    def has_head(self):
        return "head.V" in self.params

    def weights(self, prefix="cell"):
        p = self.params
        return cells.CellWeights(p[f"{prefix}.W"], p[f"{prefix}.U"], p[f"{prefix}.b"],
                                 p.get("head.V"), p.get("head.c"))

    def conv_weights(self):
        return [(self.params[f"conv{i}.K"], self.params[f"conv{i}.b"])
                for i in range(len(self.config.conv.layers))]

    def copy(self):
        return ModelGraph(self.config, {k: v.copy() for k, v in self.params.items()})


def param_shapes(config: ModelConfig) -> dict:
    shapes = {}
    c_in = config.input_dim
    for i, layer in enumerate(config.conv.layers):
        shapes[f"conv{i}.K"] = (layer.filters, layer.width, c_in)
        shapes[f"conv{i}.b"] = (layer.filters,)
        c_in = layer.filters
    H = config.hidden
    if config.family == "lstm":
        shapes.update({"cell.W": (4 * H, c_in), "cell.U": (4 * H, H), "cell.b": (4 * H,)})
    elif config.family != "conv":
        shapes.update({"cell.W": (H, c_in), "cell.U": (H, H), "cell.b": (H,)})
    if config.n_classes > 0:
        shapes["head.V"] = (config.n_classes, config.feature_dim)
        shapes["head.c"] = (config.n_classes,)
    return shapes


def init_model(config: ModelConfig, seed=0) -> ModelGraph:
    """Uniform(-r, r) weights with r = 1/sqrt(fan-in); zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith((".b", ".c")):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        r = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-r, r, size=shape)
    if config.family in ("cwrnn", "dcwrnn"):
        params["cell.U"] *= config.clockwork.recurrent_mask()
    return ModelGraph(config, params)


def count_params(model) -> int:
    config = model.config if isinstance(model, ModelGraph) else model
    total = 0
    for name, shape in param_shapes(config).items():
        if name == "cell.U" and config.family in ("cwrnn", "dcwrnn"):
            total += int(config.clockwork.recurrent_mask().sum())
        else:
            total += int(np.prod(shape))
    return total


def strip_head(model: ModelGraph) -> ModelGraph:
    params = {k: v for k, v in model.params.items() if not k.startswith("head.")}
    return ModelGraph(replace(model.config, n_classes=0), params)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(model: ModelGraph, X, dropout=0.0, rng=None, keep_cache=False):
    """Forward (N, B, L, D) sequences.

    Returns ``(probs, feats, cache)`` with probs (N, B, C) or None for a
    head-less model and feats (N, B, H). Dropout (inverted) is applied to the
    pooled features feeding the head only when ``dropout > 0``.
    """
    cfg = model.config
    X = np.asarray(X, dtype=np.float64)
    N, B, L, D = X.shape
    if D != cfg.input_dim:
        raise DataError(f"model expects {cfg.input_dim}-d frames, got {D}")
    cfg.conv.output_length(L)
    Z = X.reshape(N * B, L, D)
    conv_caches = []
    for layer, (K, b) in zip(cfg.conv.layers, model.conv_weights()):
        Z, cc = conv_layer_forward(Z, K, b, layer.pool, cfg.conv.activation)
        conv_caches.append(cc)
    Lp, F = Z.shape[1], Z.shape[2]
    if cfg.family == "conv":
        hid, cell_cache = Z.reshape(N, B, Lp, F), None
    else:
        p = model.params
        Hs, cell_cache = cells.run_cell(cfg.family, p["cell.W"], p["cell.U"], p["cell.b"],
                                        Z.reshape(N, B * Lp, F), cfg.clockwork)
        hid = Hs.reshape(N, B, Lp, -1)
    feats = hid.mean(axis=2)

    probs, mask, head_in = None, None, feats
    if model.has_head:
        if dropout > 0.0:
            if rng is None:
                raise ValueError("dropout needs an rng")
            mask = (rng.random(feats.shape) >= dropout) / (1.0 - dropout)
            head_in = feats * mask
        probs = softmax(head_in @ model.params["head.V"].T + model.params["head.c"])
    cache = None
    if keep_cache:
        cache = dict(X_shape=X.shape, conv=conv_caches, cell=cell_cache, Lp=Lp,
                     head_in=head_in, mask=mask, probs=probs)
    return probs, feats, cache


def forward_sequence(model: ModelGraph, seq):
    """Per-block class distributions and penultimate features for one sequence."""
    blocks = seq.blocks if isinstance(seq, SequenceBatch) else np.asarray(seq)
    probs, feats, _ = forward_batch(model, blocks[None])
    return (None if probs is None else probs[0]), feats[0]


def save_model(path, model: ModelGraph, force=True, extra=None):
    cfg = model.config
    meta = {"family": cfg.family, "input_dim": cfg.input_dim, "hidden": cfg.hidden,
            "n_classes": cfg.n_classes, "conv": cfg.conv.format(),
            "conv_activation": cfg.conv.activation}
    if cfg.clockwork is not None:
        meta["base"] = cfg.clockwork.base
        meta["units_per_band"] = ":".join(str(u) for u in cfg.clockwork.units_per_band)
    meta.update(extra or {})
    write_container(path, MODEL_TAG, meta, model.params, force=force)


def load_model(path):
    meta, arrays = read_container(path, MODEL_TAG)
    clockwork = None
    if "base" in meta:
        clockwork = ClockworkConfig(int(meta["base"]),
                                    tuple(int(u) for u in meta["units_per_band"].split(":")))
    cfg = ModelConfig(meta["family"], int(meta["input_dim"]), int(meta["hidden"]),
                      clockwork, ConvSpec.parse(meta["conv"], meta["conv_activation"]),
                      int(meta["n_classes"]))
    expected = param_shapes(cfg)
    if list(expected) != list(arrays) or any(
            tuple(expected[k]) != arrays[k].shape for k in expected):
        raise DataError(f"{path}: parameter blobs do not match the header config")
    return ModelGraph(cfg, arrays), meta
