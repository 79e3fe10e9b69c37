"""Raw inertial stream handling and the 14-d frame representation.

Feature layout (columns of every feature array)::

    0-2   a_x, a_y, a_z        linear acceleration
    3-5   w_x, w_y, w_z        angular velocity
    6-8   alpha_x..z           arccos(a_c / |a|)
    9-11  phi_x..z             arccos(w_c / |w|)
    12    |a|
    13    |w|
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DataError, InsufficientDataError, ParseError
from .storage import atomic_write

CHANNELS = ("ax", "ay", "az", "gx", "gy", "gz")
CSV_HEADER = ("t",) + CHANNELS
N_FEATURES = 14
STD_FLOOR = 1e-6


class RawFrame(NamedTuple):
    t: float
    a: tuple
    w: tuple


@dataclass
class SensorStream:
    """Timestamped 6-channel stream. ``values`` columns follow :data:`CHANNELS`."""

    t: np.ndarray
    values: np.ndarray
    rate_hz: Optional[float] = None
    session_id: str = ""
    user_id: str = ""
    device_id: str = ""

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, 6)
        if len(self.t) != len(self.values):
            raise ValueError("timestamp and value counts differ")

    def __len__(self):
        return len(self.t)

    @property
    def a(self):
        return self.values[:, :3]

    @property
    def w(self):
        return self.values[:, 3:]

    def frames(self):
        for t, v in zip(self.t, self.values):
            yield RawFrame(float(t), tuple(v[:3]), tuple(v[3:]))

    def with_values(self, values):
        return SensorStream(self.t.copy(), values, self.rate_hz,
                            self.session_id, self.user_id, self.device_id)


@dataclass
class ObfuscationVector:
    gain_a: np.ndarray
    gain_w: np.ndarray
    offset_a: np.ndarray
    offset_w: np.ndarray
    raw_mu: np.ndarray

    @property
    def gains(self):
        return np.concatenate([self.gain_a, self.gain_w])

    @property
    def offsets(self):
        return np.concatenate([self.offset_a, self.offset_w])


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, raw):
        return (raw - self.mean) / self.std


@dataclass
class SequenceBatch:
    blocks: np.ndarray
    label: Optional[int] = None
    stride: int = 0

    @property
    def shape(self):
        return self.blocks.shape


# -- ingestion ---------------------------------------------------------------

def ingest_csv(path, schema: Optional[dict] = None, session_id="", user_id="",
               device_id="") -> SensorStream:
    """Read a raw CSV stream.

    ``schema`` maps the canonical column names (``t, ax, ..., gz``) to the
    header names used in the file; omitted entries default to the canonical
    name. Duplicate timestamps keep their first row.
    """
    schema = {name: name for name in CSV_HEADER} | dict(schema or {})
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if not (r and r[0].startswith("#"))]
    if not rows:
        raise ParseError("empty file (no header)", line=1)
    header = [h.strip() for h in rows[0]]
    try:
        cols = [header.index(schema[name]) for name in CSV_HEADER]
    except ValueError as exc:
        raise ParseError(f"missing column: {exc}", line=1) from None

    ts, vals = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            rec = [float(row[c]) for c in cols]
        except (ValueError, IndexError):
            raise ParseError(f"unparseable row {row!r}", line=lineno) from None
        if not all(math.isfinite(v) for v in rec):
            raise ParseError(f"non-finite value in row {row!r}", line=lineno)
        if ts and rec[0] == ts[-1]:
            continue
        if ts and rec[0] < ts[-1]:
            raise DataError(f"line {lineno}: timestamp {rec[0]} goes backwards")
        ts.append(rec[0])
        vals.append(rec[1:])

    rate = None
    if len(ts) >= 2:
        dt = np.diff(ts)
        if np.allclose(dt, dt[0], rtol=0, atol=1e-9):
            rate = 1.0 / dt[0]
    return SensorStream(np.array(ts), np.array(vals).reshape(-1, 6), rate,
                        session_id or path.stem, user_id, device_id)


def write_csv(path, stream: SensorStream, force=True):
    lines = ["# " + ",".join(CSV_HEADER) + " | t in seconds; accelerometer then gyroscope",
             ",".join(CSV_HEADER)]
    for t, v in zip(stream.t, stream.values):
        lines.append(repr(float(t)) + "," + ",".join(repr(float(x)) for x in v))
    atomic_write(path, "\n".join(lines) + "\n", force=force)


# -- resampling and obfuscation ---------------------------------------------

def resample(stream: SensorStream, target_hz: float) -> SensorStream:
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    if len(stream) < 2:
        raise InsufficientDataError(
            f"resampling needs at least 2 frames, got {len(stream)}")
    t0, t1 = stream.t[0], stream.t[-1]
    n = int(math.floor((t1 - t0) * target_hz + 1e-9)) + 1
    grid = t0 + np.arange(n) / target_hz
    values = np.column_stack(
        [np.interp(grid, stream.t, stream.values[:, c]) for c in range(6)])
    return SensorStream(grid, values, float(target_hz), stream.session_id,
                        stream.user_id, stream.device_id)


def draw_obfuscation(rng: np.random.Generator, channel_std=None,
                     low=0.98, high=1.02) -> ObfuscationVector:
    """One 12-d draw: six gains, then six offset coefficients.

    Offsets are ``(coefficient - 1) * channel_std`` so that an all-ones draw
    is the identity transform.
    """
    mu = rng.uniform(low, high, size=12)
    std = np.ones(6) if channel_std is None else np.asarray(channel_std, float)
    offsets = (mu[6:] - 1.0) * std
    return ObfuscationVector(mu[0:3].copy(), mu[3:6].copy(),
                             offsets[:3], offsets[3:], mu)


def obfuscation_from_mu(mu, channel_std=None) -> ObfuscationVector:
    mu = np.asarray(mu, dtype=np.float64)
    std = np.ones(6) if channel_std is None else np.asarray(channel_std, float)
    offsets = (mu[6:] - 1.0) * std
    return ObfuscationVector(mu[0:3].copy(), mu[3:6].copy(),
                             offsets[:3], offsets[3:], mu)


def apply_affine(values, gains, offsets):
    """Per-channel ``gain * value + offset`` (the calibration error model)."""
    return np.asarray(gains) * values + np.asarray(offsets)


def obfuscate(stream: SensorStream, rng: np.random.Generator, channel_std=None):
    if len(stream) == 0:
        raise InsufficientDataError("cannot obfuscate an empty stream")
    vec = draw_obfuscation(rng, channel_std)
    return stream.with_values(apply_affine(stream.values, vec.gains, vec.offsets)), vec


# -- features -----------------------------------------------------------------

def _angles(vec, mag):
    ratio = np.divide(vec, mag[:, None], out=np.zeros_like(vec),
                      where=mag[:, None] > 0)
    return np.arccos(np.clip(ratio, -1.0, 1.0))


def raw_features(values) -> np.ndarray:
    """Unnormalized 14-d vectors for an (T, 6) array of a/w readings."""
    values = np.asarray(values, dtype=np.float64).reshape(-1, 6)
    a, w = values[:, :3], values[:, 3:]
    mag_a = np.sqrt(np.sum(a * a, axis=1))
    mag_w = np.sqrt(np.sum(w * w, axis=1))
    return np.column_stack([a, w, _angles(a, mag_a), _angles(w, mag_w), mag_a, mag_w])


def extract_features(stream, stats: NormalizationStats) -> np.ndarray:
    """Normalized (T, 14) feature frames for a stream or raw (T, 6) array."""
    values = stream.values if isinstance(stream, SensorStream) else stream
    return stats.apply(raw_features(values))


def fit_normalization(corpus: Sequence) -> NormalizationStats:
    """Per-dimension mean/std over every raw feature vector of ``corpus``.

    Items may be streams or (T, 6) arrays. Statistics are accumulated per
    item with a pairwise merge, so the result matches the concatenation.
    """
    count, mean, m2 = 0, np.zeros(N_FEATURES), np.zeros(N_FEATURES)
    for item in corpus:
        feats = raw_features(item.values if isinstance(item, SensorStream) else item)
        n = len(feats)
        if n == 0:
            continue
        m = feats.mean(axis=0)
        s = ((feats - m) ** 2).sum(axis=0)
        delta = m - mean
        total = count + n
        mean = mean + delta * (n / total)
        m2 = m2 + s + delta ** 2 * (count * n / total)
        count = total
    if count < 2:
        raise InsufficientDataError(
            f"normalization needs at least 2 frames, corpus has {count}")
    std = np.maximum(np.sqrt(m2 / count), STD_FLOOR)
    return NormalizationStats(mean, std)


def block_stride(block_len: int, overlap: float) -> int:
    return max(1, int(math.floor(block_len * (1.0 - overlap) + 1e-9)))


def required_frames(block_len, n_blocks, overlap) -> int:
    return block_len + (n_blocks - 1) * block_stride(block_len, overlap)


def assemble_blocks(frames, block_len: int, n_blocks: Optional[int] = None,
                    overlap: float = 0.5, label=None) -> SequenceBatch:
    """Cut ``frames`` into ``n_blocks`` blocks of ``block_len`` frames.

    Block ``i`` starts at ``i * floor(block_len * (1 - overlap))``. With
    ``n_blocks=None`` as many blocks as fit are taken.
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    frames = np.asarray(frames, dtype=np.float64)
    stride = block_stride(block_len, overlap)
    if n_blocks is None:
        n_blocks = (len(frames) - block_len) // stride + 1 if len(frames) >= block_len else 0
        if n_blocks < 1:
            raise InsufficientDataError(
                f"need at least {block_len} frames for one block, got {len(frames)}")
    need = required_frames(block_len, n_blocks, overlap)
    if len(frames) < need:
        raise InsufficientDataError(
            f"{n_blocks} blocks of {block_len} need {need} frames, got {len(frames)}")
    windows = np.lib.stride_tricks.sliding_window_view(frames, block_len, axis=0)
    blocks = windows[: (n_blocks - 1) * stride + 1: stride].transpose(0, 2, 1).copy()
    return SequenceBatch(blocks, label, stride)
