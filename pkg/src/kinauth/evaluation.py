"""Verification metrics and the shift-invariance harness.

Score orientation: higher means more genuine. At threshold ``theta`` an
impostor is accepted when ``score >= theta`` and a genuine attempt is
rejected when ``score < theta``.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import cells
from .cells import CellWeights, ClockworkConfig
from .errors import InsufficientDataError

log = logging.getLogger(__name__)

CONVENTION = "FAR = P(impostor >= theta), FRR = P(genuine < theta)"


@dataclass
class DetCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray

    def to_csv(self):
        lines = [f"# theta,far,frr | {CONVENTION}", "theta,far,frr"]
        lines += [f"{t!r},{a!r},{r!r}" for t, a, r in
                  zip(self.thresholds.tolist(), self.far.tolist(), self.frr.tolist())]
        return "\n".join(lines) + "\n"


def _check_scores(genuine, impostor):
    g = np.asarray(genuine, dtype=np.float64).ravel()
    i = np.asarray(impostor, dtype=np.float64).ravel()
    if g.size == 0 or i.size == 0:
        raise ValueError("both genuine and impostor score sets must be non-empty")
    return g, i


def error_rates(genuine, impostor, theta):
    g, i = _check_scores(genuine, impostor)
    theta = np.asarray(theta, dtype=np.float64)
    gs, is_ = np.sort(g), np.sort(i)
    far = (is_.size - np.searchsorted(is_, theta, side="left")) / is_.size
    frr = np.searchsorted(gs, theta, side="left") / gs.size
    return far, frr


def det_sweep(genuine, impostor) -> DetCurve:
    """FAR/FRR at every distinct score value and just above the largest.

    Both rates are step functions that only change at score values, so this
    grid visits every attainable (FAR, FRR) pair.
    """
    g, i = _check_scores(genuine, impostor)
    values = np.unique(np.concatenate([g, i]))
    top = values[-1]
    above = np.nextafter(top, np.inf) if np.isfinite(top) else top
    thresholds = np.append(values, above)
    far, frr = error_rates(g, i, thresholds)
    return DetCurve(thresholds, far, frr)


def eer(curve: DetCurve):
    """(EER, theta) where |FAR - FRR| is smallest; ties go to the lower theta."""
    gap = np.abs(curve.far - curve.frr)
    k = int(np.flatnonzero(gap == gap.min())[0])
    return 0.5 * (curve.far[k] + curve.frr[k]), float(curve.thresholds[k])


def compute_eer(genuine, impostor):
    return eer(det_sweep(genuine, impostor))


def hter(genuine, impostor, theta) -> float:
    far, frr = error_rates(genuine, impostor, theta)
    return 0.5 * (float(far) + float(frr))


def classes_kept(n_classes: int, p: float) -> int:
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    return max(1, min(n_classes, int(math.floor(p * n_classes + 1e-9))))


def topk_session_accuracy(session_outputs: Sequence, labels: Sequence, p: float = 0.05) -> float:
    """Fraction of sessions whose label is among the top ``p`` share of classes
    of the session's mean block distribution."""
    hits = 0
    for out, label in zip(session_outputs, labels):
        mean = np.asarray(out, dtype=np.float64).reshape(-1, np.shape(out)[-1]).mean(axis=0)
        k = classes_kept(mean.size, p)
        top = np.argsort(-mean, kind="stable")[:k]
        hits += int(label in top)
    return hits / len(labels)


def per_group_eer(records, key="client_id"):
    """Mean of per-group EERs, each with its own threshold.

    ``records`` are ScoreRecord-like objects (``raw``, ``genuine``, grouping
    attribute) or (group, score, genuine) triples. Groups missing a class are
    skipped. Returns ``(mean_eer, n_groups_used, n_skipped)``.
    """
    groups = defaultdict(lambda: ([], []))
    for rec in records:
        if isinstance(rec, tuple):
            grp, score, genuine = rec
        else:
            grp, score, genuine = getattr(rec, key), rec.raw, rec.genuine
        groups[grp][0 if genuine else 1].append(score)
    eers, skipped = [], 0
    for grp, (gen, imp) in groups.items():
        if not gen or not imp:
            skipped += 1
            log.warning("group %r lacks %s scores; skipped", grp,
                        "genuine" if not gen else "impostor")
            continue
        eers.append(compute_eer(gen, imp)[0])
    if not eers:
        raise InsufficientDataError("no group has both genuine and impostor scores")
    return float(np.mean(eers)), len(eers), skipped


# -- shift invariance -------------------------------------------------------------

@dataclass
class InvarianceReport:
    family: str
    shifts: np.ndarray
    traces: np.ndarray
    hidden: np.ndarray
    spread: np.ndarray
    transient: int

    @property
    def n_runs(self):
        return len(self.shifts)

    @property
    def max_deviation(self):
        return float(self.spread[self.transient:].max())

    def to_csv(self):
        lines = ["# shift,step,value | output neuron, shifted back to the unpadded time axis",
                 "shift,step,value"]
        for s, row in zip(self.shifts, self.traces):
            lines += [f"{s},{t},{v!r}" for t, v in enumerate(row.tolist())]
        return "\n".join(lines) + "\n"


def invariance_cell(family: str, cfg: ClockworkConfig, seed=0, scale=0.1,
                    zero_bias=True, input_dim=1) -> CellWeights:
    """Normal(0, scale) weights for a single-input, single-output probe network."""
    rng = np.random.default_rng(seed)
    H = cfg.hidden
    W = rng.normal(0.0, scale, (H, input_dim))
    U = rng.normal(0.0, scale, (H, H))
    b = np.zeros(H) if zero_bias else rng.normal(0.0, scale, H)
    V = rng.normal(0.0, scale, (1, H))
    if family in ("cwrnn", "dcwrnn"):
        U = U * cfg.recurrent_mask()
    return CellWeights(W, U, b, V, np.zeros(1))


def invariance_trace(family: str, sequence, cfg: ClockworkConfig, weights: CellWeights,
                     n_runs: Optional[int] = None, transient: Optional[int] = None
                     ) -> InvarianceReport:
    """Run the cell on copies of ``sequence`` padded in front by 0..n_runs-1
    zeros, shift the responses back and measure how far they disagree.

    ``spread[t]`` is the largest max-minus-min across runs over hidden units
    and the output neuron at aligned step ``t``; steps before ``transient``
    (default base**(bands-1)) are excluded from :attr:`max_deviation`.
    """
    if family not in ("rnn", "cwrnn", "dcwrnn"):
        raise ValueError(f"invariance harness supports rnn/cwrnn/dcwrnn, not {family!r}")
    x = np.asarray(sequence, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    T = len(x)
    n_runs = cfg.max_lag() if n_runs is None else n_runs
    transient = cfg.max_lag() if transient is None else transient
    if T <= transient:
        raise InsufficientDataError(
            f"sequence of {T} steps leaves nothing after a {transient}-step transient")
    pad = n_runs - 1
    X = np.zeros((n_runs, T + pad, x.shape[1]))
    for s in range(n_runs):
        X[s, s:s + T] = x
    Hs, _ = cells.run_cell(family, weights.W, weights.U, weights.b, X, cfg)
    hidden = np.stack([Hs[s, s:s + T] for s in range(n_runs)])
    out = hidden @ weights.V.T
    if weights.c is not None:
        out = out + weights.c
    both = np.concatenate([hidden, out], axis=2)
    spread = (both.max(axis=0) - both.min(axis=0)).max(axis=1)
    return InvarianceReport(family, np.arange(n_runs), out[..., 0], hidden, spread, transient)
