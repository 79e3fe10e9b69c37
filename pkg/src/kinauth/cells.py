"""Recurrent cell families and their backward passes.

Single-step functions accept either vectors or (N, D) batches. Sequence
functions take ``X`` of shape (N, T, D) and return hidden states of shape
(N, T, H) together with a cache for the matching ``*_backward`` function.

Clockwork conventions: band ``k`` (zero-indexed, fastest first) has period
``base**k``; the recurrent matrix is block upper triangular in band order, so
band ``k`` reads only bands ``j >= k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError

_INT64_MAX = np.iinfo(np.int64).max


@dataclass(frozen=True)
class ClockworkConfig:
    base: int = 2
    units_per_band: tuple = (1,)

    def __post_init__(self):
        object.__setattr__(self, "units_per_band", tuple(int(u) for u in self.units_per_band))
        if self.base < 2:
            raise ConfigError(f"clockwork base must be >= 2, got {self.base}")
        if not self.units_per_band or min(self.units_per_band) < 1:
            raise ConfigError("every band needs at least one unit")
        if (self.n_bands - 1) * np.log2(self.base) >= 62:
            raise ConfigError("base**(bands-1) overflows 64-bit step counters")

    @classmethod
    def uniform(cls, base, n_bands, units):
        return cls(base, (units,) * n_bands)

    @property
    def n_bands(self):
        return len(self.units_per_band)

    @property
    def hidden(self):
        return sum(self.units_per_band)

    @property
    def periods(self):
        return tuple(self.base ** k for k in range(self.n_bands))

    @property
    def band_slices(self):
        out, start = [], 0
        for u in self.units_per_band:
            out.append(slice(start, start + u))
            start += u
        return out

    @property
    def unit_band(self):
        return np.repeat(np.arange(self.n_bands), self.units_per_band)

    def recurrent_mask(self):
        band = self.unit_band
        return (band[None, :] >= band[:, None]).astype(np.float64)

    def max_lag(self):
        return self.base ** (self.n_bands - 1)


@dataclass
class CellWeights:
    """Weights of one recurrent layer (LSTM stacks gates i, f, o, g by rows)."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    V: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- single steps ---------------------------------------------------------------

def rnn_step(x, h_prev, w: CellWeights):
    return np.tanh(h_prev @ w.U.T + x @ w.W.T + w.b)


def lstm_step(x, h_prev, c_prev, w: CellWeights):
    H = w.U.shape[1]
    z = x @ w.W.T + h_prev @ w.U.T + w.b
    i = _sigmoid(z[..., 0:H])
    f = _sigmoid(z[..., H:2 * H])
    o = _sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:4 * H])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def active_bands(t: int, cfg: ClockworkConfig) -> set:
    if t < 0:
        raise ValueError("step index must be non-negative")
    return {k for k, p in enumerate(cfg.periods) if t % p == 0}


def active_units(t: int, cfg: ClockworkConfig) -> np.ndarray:
    periods = np.asarray(cfg.periods, dtype=np.int64)[cfg.unit_band]
    return (t % periods) == 0


def cwrnn_step(x, h_prev, t: int, w: CellWeights, cfg: ClockworkConfig):
    act = active_units(t, cfg)
    U = w.U * cfg.recurrent_mask()
    h = np.array(h_prev, dtype=np.float64, copy=True)
    pre = h_prev @ U[act].T + x @ w.W[act].T + w.b[act]
    h[..., act] = np.tanh(pre)
    return h


class HistoryBuffer:
    """Per-band ring buffers of past hidden states for the dense clockwork cell.

    Band ``k`` keeps its last ``base**k`` values: the previous state plus
    ``base**k - 1`` extra slots.
    """

    def __init__(self, cfg: ClockworkConfig, batch_shape=()):
        self.cfg = cfg
        self.batch_shape = tuple(batch_shape)
        self.rings = [np.zeros((p,) + self.batch_shape + (u,))
                      for p, u in zip(cfg.periods, cfg.units_per_band)]
        self.pos = 0

    @property
    def extra_slots(self):
        return sum(u * (p - 1) for p, u in zip(self.cfg.periods, self.cfg.units_per_band))

    def read(self, lag: int) -> np.ndarray:
        """Full hidden state at ``lag`` steps back; bands too short to hold it read 0."""
        parts = []
        for ring in self.rings:
            cap = ring.shape[0]
            if lag <= cap:
                parts.append(ring[(self.pos - lag) % cap])
            else:
                parts.append(np.zeros_like(ring[0]))
        return np.concatenate(parts, axis=-1)

    def push(self, h):
        for ring, sl in zip(self.rings, self.cfg.band_slices):
            ring[self.pos % ring.shape[0]] = h[..., sl]
        self.pos += 1


def buffer_capacity(cfg: ClockworkConfig) -> int:
    return sum(u * (p - 1) for p, u in zip(cfg.periods, cfg.units_per_band))


def dcwrnn_step(x, hist: HistoryBuffer, w: CellWeights, cfg: ClockworkConfig):
    U = w.U * cfg.recurrent_mask()
    pre = x @ w.W.T + w.b
    for sl, lag in zip(cfg.band_slices, cfg.periods):
        pre[..., sl] += hist.read(lag) @ U[sl].T
    h = np.tanh(pre)
    hist.push(h)
    return h


# -- whole sequences ---------------------------------------------------------------

def rnn_forward(X, W, U, b, h0=None):
    N, T, _ = X.shape
    A = X @ W.T + b
    hs = np.zeros((T + 1, N, U.shape[0]))
    if h0 is not None:
        hs[0] = h0
    for t in range(T):
        hs[t + 1] = np.tanh(A[:, t] + hs[t] @ U.T)
    return hs[1:].transpose(1, 0, 2), ("rnn", X, W, U, hs)


def rnn_backward(cache, dH):
    _, X, W, U, hs = cache
    N, T, _ = X.shape
    dA = np.empty((N, T, U.shape[0]))
    carry = np.zeros((N, U.shape[0]))
    dU = np.zeros_like(U)
    for t in range(T - 1, -1, -1):
        h = hs[t + 1]
        da = (dH[:, t] + carry) * (1.0 - h * h)
        dA[:, t] = da
        dU += da.T @ hs[t]
        carry = da @ U
    return _input_grads(X, W, dA, {"U": dU})


def lstm_forward(X, W, U, b, h0=None, c0=None):
    N, T, _ = X.shape
    H = U.shape[1]
    A = X @ W.T + b
    hs = np.zeros((T + 1, N, H))
    cs = np.zeros((T + 1, N, H))
    if h0 is not None:
        hs[0] = h0
    if c0 is not None:
        cs[0] = c0
    gates = np.empty((T, N, 4 * H))
    for t in range(T):
        z = A[:, t] + hs[t] @ U.T
        g = np.empty_like(z)
        g[:, :3 * H] = _sigmoid(z[:, :3 * H])
        g[:, 3 * H:] = np.tanh(z[:, 3 * H:])
        gates[t] = g
        cs[t + 1] = g[:, H:2 * H] * cs[t] + g[:, :H] * g[:, 3 * H:]
        hs[t + 1] = g[:, 2 * H:3 * H] * np.tanh(cs[t + 1])
    return hs[1:].transpose(1, 0, 2), ("lstm", X, W, U, hs, cs, gates)


def lstm_backward(cache, dH):
    _, X, W, U, hs, cs, gates = cache
    N, T, _ = X.shape
    H = U.shape[1]
    dA = np.empty((N, T, 4 * H))
    dh_carry = np.zeros((N, H))
    dc_carry = np.zeros((N, H))
    dU = np.zeros_like(U)
    for t in range(T - 1, -1, -1):
        g = gates[t]
        i, f, o, gg = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        tc = np.tanh(cs[t + 1])
        dh = dH[:, t] + dh_carry
        dc = dc_carry + dh * o * (1.0 - tc * tc)
        dz = np.empty((N, 4 * H))
        dz[:, :H] = dc * gg * i * (1.0 - i)
        dz[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        dz[:, 3 * H:] = dc * i * (1.0 - gg * gg)
        dA[:, t] = dz
        dU += dz.T @ hs[t]
        dh_carry = dz @ U
        dc_carry = dc * f
    return _input_grads(X, W, dA, {"U": dU})


def cwrnn_forward(X, W, U, b, cfg: ClockworkConfig, h0=None, t0=0):
    N, T, _ = X.shape
    Um = U * cfg.recurrent_mask()
    A = X @ W.T + b
    hs = np.zeros((T + 1, N, U.shape[0]))
    if h0 is not None:
        hs[0] = h0
    acts = [active_units(t0 + t, cfg) for t in range(T)]
    for t in range(T):
        act = acts[t]
        h = hs[t].copy()
        h[:, act] = np.tanh(A[:, t, act] + hs[t] @ Um[act].T)
        hs[t + 1] = h
    return hs[1:].transpose(1, 0, 2), ("cwrnn", X, W, Um, hs, acts, cfg)


def cwrnn_backward(cache, dH):
    _, X, W, Um, hs, acts, cfg = cache
    N, T, _ = X.shape
    Hn = Um.shape[0]
    dA = np.zeros((N, T, Hn))
    dUm = np.zeros_like(Um)
    carry = np.zeros((N, Hn))
    for t in range(T - 1, -1, -1):
        act = acts[t]
        g = dH[:, t] + carry
        h = hs[t + 1][:, act]
        da = g[:, act] * (1.0 - h * h)
        dA[:, t, act] = da
        dUm[act] += da.T @ hs[t]
        carry = np.where(act, 0.0, g) + da @ Um[act]
    return _input_grads(X, W, dA, {"U": dUm * cfg.recurrent_mask()})


def dcwrnn_forward(X, W, U, b, cfg: ClockworkConfig, history=None):
    """Dense clockwork layer over a sequence.

    ``history`` optionally supplies the states preceding the sequence as an
    array (P, N, H) ordered oldest first, P = base**(bands-1).
    """
    N, T, _ = X.shape
    Hn = U.shape[0]
    P = cfg.max_lag()
    Um = U * cfg.recurrent_mask()
    A = X @ W.T + b
    S = np.zeros((P + T, N, Hn))
    if history is not None:
        S[:P] = history
    bands = list(zip(cfg.band_slices, cfg.periods))
    for t in range(T):
        pre = A[:, t].copy()
        for sl, lag in bands:
            pre[:, sl] += S[P + t - lag] @ Um[sl].T
        S[P + t] = np.tanh(pre)
    return S[P:].transpose(1, 0, 2), ("dcwrnn", X, W, Um, S, cfg)


def dcwrnn_backward(cache, dH):
    _, X, W, Um, S, cfg = cache
    N, T, _ = X.shape
    P = cfg.max_lag()
    dS = np.zeros_like(S)
    dS[P:] = dH.transpose(1, 0, 2)
    dA = np.empty((N, T, Um.shape[0]))
    dUm = np.zeros_like(Um)
    bands = list(zip(cfg.band_slices, cfg.periods))
    for t in range(T - 1, -1, -1):
        h = S[P + t]
        da = dS[P + t] * (1.0 - h * h)
        dA[:, t] = da
        for sl, lag in bands:
            dUm[sl] += da[:, sl].T @ S[P + t - lag]
            dS[P + t - lag] += da[:, sl] @ Um[sl]
    return _input_grads(X, W, dA, {"U": dUm * cfg.recurrent_mask()})


def _input_grads(X, W, dA, grads):
    N, T, D = X.shape
    flat_dA = dA.reshape(N * T, -1)
    grads["W"] = flat_dA.T @ X.reshape(N * T, D)
    grads["b"] = flat_dA.sum(axis=0)
    dX = (flat_dA @ W).reshape(N, T, D)
    return grads, dX


FORWARD = {
    "rnn": rnn_forward,
    "lstm": lstm_forward,
    "cwrnn": cwrnn_forward,
    "dcwrnn": dcwrnn_forward,
}

BACKWARD = {
    "rnn": rnn_backward,
    "lstm": lstm_backward,
    "cwrnn": cwrnn_backward,
    "dcwrnn": dcwrnn_backward,
}


def run_cell(family, W, U, b, X, cfg: Optional[ClockworkConfig] = None):
    """Forward a (N, T, D) batch through ``family`` from a zero initial state."""
    if family in ("cwrnn", "dcwrnn"):
        return FORWARD[family](X, W, U, b, cfg)
    return FORWARD[family](X, W, U, b)


def cell_backward(cache, dH):
    return BACKWARD[cache[0]](cache, dH)
