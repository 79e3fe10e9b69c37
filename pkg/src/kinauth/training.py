"""Discriminative pretraining: per-block NLL, BPTT, finite-difference checks, SGD."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import cells
from .conv import conv_layer_backward
from .errors import NumericError
from .models import ModelGraph, forward_batch, strip_head  # noqa: F401  (re-export)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    lr_decay: float = 1.0
    epochs: int = 20
    batch_size: int = 16
    dropout: float = 0.0
    seed: int = 0
    obfuscate: bool = True

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")

    def lr_at(self, epoch):
        return self.learning_rate * self.lr_decay ** epoch


@dataclass
class GradCheckReport:
    max_rel_err: dict
    step: float
    threshold: float = 1e-4
    kinks_skipped: int = 0

    @property
    def worst(self):
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    @property
    def passed(self):
        return self.worst < self.threshold

    def to_csv(self):
        lines = [f"# group,max_rel_err | central differences, step={self.step:g}, "
                 f"rel = |a-n|/max(|a|,|n|,1e-8), pooling kinks skipped={self.kinks_skipped}",
                 "group,max_rel_err"]
        lines += [f"{g},{e:.6e}" for g, e in self.max_rel_err.items()]
        return "\n".join(lines) + "\n"


def sequence_loss(outputs, label) -> float:
    """Mean over blocks of -log p_b[label]."""
    p = np.asarray(outputs)[..., label]
    if np.any(p < PROB_FLOOR):
        log.warning("probability below %g at the label; clamped", PROB_FLOOR)
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


def batch_loss(probs, labels):
    labels = np.asarray(labels)
    p = np.take_along_axis(probs, labels[:, None, None], axis=2)[..., 0]
    return -np.log(np.maximum(p, PROB_FLOOR)).mean(axis=1)


def backprop_batch(model: ModelGraph, X, labels, dropout=0.0, rng=None):
    """Summed gradients of the per-sequence losses over a (N, B, L, D) batch.

    Returns ``(grads, losses)``; ``grads`` has the same keys as ``model.params``.
    """
    labels = np.asarray(labels)
    probs, feats, cache = forward_batch(model, X, dropout, rng, keep_cache=True)
    if probs is None:
        raise ValueError("model has no classification head")
    cfg = model.config
    N, B, L, D = cache["X_shape"]
    grads = {}

    dlogits = probs.copy()
    dlogits[np.arange(N)[:, None], np.arange(B)[None, :], labels[:, None]] -= 1.0
    dlogits /= B
    grads["head.V"] = np.einsum("nbc,nbh->ch", dlogits, cache["head_in"])
    grads["head.c"] = dlogits.sum(axis=(0, 1))
    dfeat = dlogits @ model.params["head.V"]
    if cache["mask"] is not None:
        dfeat = dfeat * cache["mask"]

    Lp = cache["Lp"]
    dhid = np.repeat(dfeat[:, :, None, :] / Lp, Lp, axis=2)
    if cfg.family == "conv":
        dZ = dhid.reshape(N * B, Lp, -1)
    else:
        cell_grads, dX = cells.cell_backward(cache["cell"], dhid.reshape(N, B * Lp, -1))
        for k, v in cell_grads.items():
            grads[f"cell.{k}"] = v
        dZ = dX.reshape(N * B, Lp, -1)
    for i in range(len(cfg.conv.layers) - 1, -1, -1):
        dK, db, dZ = conv_layer_backward(cache["conv"][i], dZ)
        grads[f"conv{i}.K"] = dK
        grads[f"conv{i}.b"] = db
    return {k: grads[k] for k in model.params}, batch_loss(probs, labels)


def backprop_sequence(model: ModelGraph, seq, label):
    """Exact gradients of :func:`sequence_loss` for one sequence (no dropout)."""
    blocks = getattr(seq, "blocks", seq)
    grads, _ = backprop_batch(model, np.asarray(blocks)[None], [label])
    return grads


def _loss_and_pattern(model, X, labels):
    probs, _, cache = forward_batch(model, X, keep_cache=True)
    pattern = [c[4] for c in cache["conv"]]
    return float(batch_loss(probs, labels).sum()), pattern


def _same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(model: ModelGraph, seq, label, step=1e-3, threshold=1e-4,
                   max_per_group=None, rng=None, stencil=4) -> GradCheckReport:
    """Central differences against :func:`backprop_batch` for every parameter.

    ``seq`` may be a single (B, L, D) sequence or a (N, B, L, D) batch with a
    matching label list. ``max_per_group`` subsamples coordinates of large
    groups. ``stencil=4`` uses the fourth-order central formula on the
    points +-step, +-2*step; ``stencil=2`` the plain two-point one.
    Coordinates where a probe point moves a max-pool argmax are skipped (the
    loss is not differentiable across that window) and counted in
    ``kinks_skipped``.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    if stencil == 4:
        offsets, coefs = (-2, -1, 1, 2), np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
    elif stencil == 2:
        offsets, coefs = (-1, 1), np.array([-0.5, 0.5])
    else:
        raise ValueError("stencil must be 2 or 4")
    X = np.asarray(getattr(seq, "blocks", seq), dtype=np.float64)
    labels = np.atleast_1d(label)
    if X.ndim == 3:
        X = X[None]
    analytic, _ = backprop_batch(model, X, labels)
    _, base_pattern = _loss_and_pattern(model, X, labels)
    probe = model.copy()
    skipped = 0
    mask = None
    if model.family in ("cwrnn", "dcwrnn"):
        mask = model.config.clockwork.recurrent_mask()
    report = {}
    rng = rng or np.random.default_rng(0)
    for name, value in probe.params.items():
        idx = list(np.ndindex(value.shape))
        if name == "cell.U" and mask is not None:
            idx = [i for i in idx if mask[i] != 0]
        if max_per_group is not None and len(idx) > max_per_group:
            pick = rng.choice(len(idx), size=max_per_group, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        worst = 0.0
        for i in idx:
            orig = value[i]
            losses, kink = [], False
            for o in offsets:
                value[i] = orig + o * step
                f, pat = _loss_and_pattern(probe, X, labels)
                losses.append(f)
                kink = kink or not _same_pattern(pat, base_pattern)
            value[i] = orig
            if kink:
                skipped += 1
                continue
            numeric = float(coefs @ np.array(losses)) / step
            a = analytic[name][i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return GradCheckReport(report, step, threshold, skipped)


@dataclass
class TrainResult:
    model: ModelGraph
    loss_curve: list
    best_epoch: int
    val_curve: list = field(default_factory=list)

    def curve_csv(self):
        lines = ["# epoch,loss | mean per-block NLL over the training examples",
                 "epoch,loss"]
        lines += [f"{i},{v:.8f}" for i, v in enumerate(self.loss_curve)]
        return "\n".join(lines) + "\n"


def train_extractor(examples: Sequence, labels: Sequence, model: ModelGraph,
                    cfg: TrainConfig, prepare: Optional[Callable] = None,
                    validation=None) -> TrainResult:
    """Mini-batch SGD on the mean per-block NLL.

    ``examples[i]`` is turned into a (B, L, D) sequence by
    ``prepare(example, rng)`` each time it is visited (this is where
    per-example augmentation happens); without ``prepare`` the examples must
    already be sequences. ``validation`` is an optional ``(sequences,
    labels)`` pair; when given, the returned model is the best-validation
    checkpoint, otherwise the last one.
    """
    labels = np.asarray(labels, dtype=int)
    if len(np.unique(labels)) < 2:
        raise ValueError("training needs at least two classes")
    n_classes = model.config.n_classes
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("labels must be dense in 0..C-1")

    rng = np.random.default_rng(cfg.seed)
    shuffle_rng, dropout_rng, aug_rng = rng.spawn(3)
    model = model.copy()
    curve, val_curve = [], []
    best, best_epoch, best_loss = model.copy(), -1, np.inf

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(examples))
        lr = cfg.lr_at(epoch)
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if prepare is None:
                X = np.stack([np.asarray(getattr(examples[i], "blocks", examples[i])) for i in idx])
            else:
                X = np.stack([prepare(examples[i], aug_rng) for i in idx])
            grads, losses = backprop_batch(model, X, labels[idx], cfg.dropout, dropout_rng)
            if not np.all(np.isfinite(losses)):
                raise NumericError(f"loss diverged in epoch {epoch}; "
                                   f"last good checkpoint from epoch {best_epoch}")
            total += losses.sum()
            if lr > 0:
                scale = lr / len(idx)
                for name, g in grads.items():
                    model.params[name] -= scale * g
        curve.append(total / len(order))
        log.info("epoch %d loss %.5f", epoch, curve[-1])
        if validation is not None:
            vX, vy = validation
            probs, _, _ = forward_batch(model, np.asarray(vX))
            vloss = float(batch_loss(probs, np.asarray(vy)).mean())
            val_curve.append(vloss)
            if vloss < best_loss:
                best, best_epoch, best_loss = model.copy(), epoch, vloss
    if validation is None or best_epoch < 0:
        best, best_epoch = model, cfg.epochs - 1
    return TrainResult(best, curve, best_epoch, val_curve)
