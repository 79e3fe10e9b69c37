import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinauth.cells import (CellWeights, ClockworkConfig, HistoryBuffer, active_bands,
                           buffer_capacity, cwrnn_forward, dcwrnn_forward, dcwrnn_step,
                           cwrnn_step, lstm_forward, lstm_step, rnn_forward, rnn_step)
from kinauth.errors import ConfigError


def _weights(rng, H, D, scale=0.5, lstm=False):
    rows = 4 * H if lstm else H
    return CellWeights(rng.normal(0, scale, (rows, D)), rng.normal(0, scale, (rows, H)),
                       rng.normal(0, scale, rows))


# -- vanilla and LSTM ----------------------------------------------------------------

def test_rnn_zero_weights():
    w = CellWeights(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros(3))
    assert np.all(rnn_step(np.array([4.0, -1.0]), np.ones(3), w) == 0.0)


def test_rnn_scalar_by_hand():
    w = CellWeights(np.array([[1.0]]), np.array([[0.5]]), np.zeros(1))
    assert rnn_step(np.array([1.0]), np.zeros(1), w)[0] == pytest.approx(0.761594, abs=1e-6)


def test_rnn_input_free_recursion():
    rng = np.random.default_rng(0)
    w = _weights(rng, 4, 3)
    h = rng.normal(size=4)
    assert np.allclose(rnn_step(np.zeros(3), h, w), np.tanh(w.U @ h + w.b))


def test_lstm_zero_weights_halves_memory():
    H = 3
    w = CellWeights(np.zeros((4 * H, 2)), np.zeros((4 * H, H)), np.zeros(4 * H))
    c_prev = np.array([1.0, -2.0, 0.5])
    h, c = lstm_step(np.ones(2), np.ones(H), c_prev, w)
    assert np.allclose(c, 0.5 * c_prev)
    assert np.allclose(h, 0.5 * np.tanh(0.5 * c_prev))
    h0, _ = lstm_step(np.ones(2), np.ones(H), np.zeros(H), w)
    assert np.all(h0 == 0.0)


def test_lstm_saturated_forget_gate():
    H = 2
    b = np.zeros(4 * H)
    b[H:2 * H] = 10.0
    w = CellWeights(np.zeros((4 * H, 1)), np.zeros((4 * H, H)), b)
    c_prev = np.array([0.7, -1.3])
    _, c = lstm_step(np.ones(1), np.zeros(H), c_prev, w)
    assert np.allclose(c, c_prev, atol=1e-4)


def test_sequence_forms_match_single_steps():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(2, 6, 3))
    w = _weights(rng, 4, 3)
    H, _ = rnn_forward(X, w.W, w.U, w.b)
    h = np.zeros((2, 4))
    for t in range(6):
        h = rnn_step(X[:, t], h, w)
        assert np.allclose(H[:, t], h, atol=1e-14)
    wl = _weights(rng, 4, 3, lstm=True)
    H, _ = lstm_forward(X, wl.W, wl.U, wl.b)
    h, c = np.zeros((2, 4)), np.zeros((2, 4))
    for t in range(6):
        h, c = lstm_step(X[:, t], h, c, wl)
        assert np.allclose(H[:, t], h, atol=1e-14)


# -- clockwork schedule ------------------------------------------------------------

def test_active_bands_examples():
    cfg = ClockworkConfig.uniform(2, 3, 1)
    assert active_bands(6, cfg) == {0, 1}
    assert active_bands(0, cfg) == {0, 1, 2}
    assert active_bands(4, cfg) == {0, 1, 2}
    with pytest.raises(ValueError):
        active_bands(-1, cfg)


def test_clockwork_config_validation():
    with pytest.raises(ConfigError):
        ClockworkConfig(1, (1, 1))
    with pytest.raises(ConfigError):
        ClockworkConfig(2, (1, 0))
    with pytest.raises(ConfigError):
        ClockworkConfig.uniform(2, 64, 1)


def test_cwrnn_odd_step_touches_only_band_zero():
    cfg = ClockworkConfig.uniform(2, 3, 2)
    rng = np.random.default_rng(2)
    w = _weights(rng, 6, 3)
    h_prev = rng.normal(size=6)
    h = cwrnn_step(rng.normal(size=3), h_prev, 5, w, cfg)
    assert np.array_equal(h[2:], h_prev[2:])
    assert not np.array_equal(h[:2], h_prev[:2])


def test_cwrnn_zero_everything():
    cfg = ClockworkConfig.uniform(2, 3, 1)
    w = CellWeights(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros(3))
    assert np.all(cwrnn_step(np.zeros(2), np.zeros(3), 0, w, cfg) == 0.0)


def test_cwrnn_two_band_scalar_oracle():
    cfg = ClockworkConfig.uniform(2, 2, 1)
    W = np.array([[0.3], [-0.7]])
    U = np.array([[0.4, -0.2], [0.9, 0.6]])   # lower-left entry must be ignored
    b = np.array([0.1, -0.05])
    x, h0, h1 = 1.5, 0.2, -0.4
    fast = math.tanh(0.4 * h0 - 0.2 * h1 + 0.3 * x + 0.1)
    slow = math.tanh(0.6 * h1 - 0.7 * x - 0.05)
    h = cwrnn_step(np.array([x]), np.array([h0, h1]), 2, CellWeights(W, U, b), cfg)
    assert h == pytest.approx([fast, slow], abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 3), st.integers(1, 3), st.integers(1, 2), st.integers(0, 1000))
def test_cwrnn_inactive_bands_copy_bit_exactly(base, bands, units, seed):
    cfg = ClockworkConfig.uniform(base, bands, units)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(1, 20, 2))
    w = _weights(rng, cfg.hidden, 2)
    H, _ = cwrnn_forward(X, w.W, w.U, w.b, cfg)
    prev = np.zeros(cfg.hidden)
    for t in range(20):
        active = active_bands(t, cfg)
        for k, sl in enumerate(cfg.band_slices):
            if k not in active:
                assert np.array_equal(H[0, t, sl], prev[sl])
        prev = H[0, t]
    assert np.all(np.abs(H) < 1)


def test_cwrnn_forward_matches_steps():
    cfg = ClockworkConfig.uniform(3, 3, 2)
    rng = np.random.default_rng(3)
    X = rng.normal(size=(1, 12, 4))
    w = _weights(rng, 6, 4)
    H, _ = cwrnn_forward(X, w.W, w.U, w.b, cfg)
    h = np.zeros(6)
    for t in range(12):
        h = cwrnn_step(X[0, t], h, t, w, cfg)
        assert np.allclose(H[0, t], h, atol=1e-14)


# -- dense clockwork ---------------------------------------------------------------

def test_buffer_capacity_examples():
    assert buffer_capacity(ClockworkConfig.uniform(2, 5, 1)) == 26
    assert buffer_capacity(ClockworkConfig.uniform(2, 1, 4)) == 0
    assert buffer_capacity(ClockworkConfig.uniform(2, 3, 2)) == 8


@given(st.integers(2, 4), st.lists(st.integers(1, 4), min_size=1, max_size=5))
def test_buffer_capacity_matches_ring_sizes(base, units):
    cfg = ClockworkConfig(base, tuple(units))
    naive = sum(u * (base ** k - 1) for k, u in enumerate(units))
    assert buffer_capacity(cfg) == naive
    assert HistoryBuffer(cfg).extra_slots == naive


def test_dcwrnn_first_step_is_rnn_from_zero():
    cfg = ClockworkConfig.uniform(2, 3, 2)
    rng = np.random.default_rng(4)
    w = _weights(rng, 6, 3)
    w.U = w.U * cfg.recurrent_mask()
    x = rng.normal(size=3)
    h = dcwrnn_step(x, HistoryBuffer(cfg), w, cfg)
    assert np.allclose(h, rnn_step(x, np.zeros(6), w), atol=1e-15)


def _naive_dcwrnn(X, W, U, b, base, bands):
    # materialise every past state and read lag base**k for band k
    hist = []
    for x in X:
        h = np.zeros(bands)
        for k in range(bands):
            lag = base ** k
            acc = W[k] @ x + b[k]
            for j in range(k, bands):
                past = hist[-lag][j] if len(hist) >= lag else 0.0
                acc += U[k, j] * past
            h[k] = math.tanh(acc)
        hist.append(h)
    return np.array(hist)


def test_dcwrnn_matches_naive_history_oracle():
    cfg = ClockworkConfig.uniform(2, 3, 1)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(8, 2))
    W, U, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 3)), rng.normal(size=3)
    expected = _naive_dcwrnn(X, W, U, b, 2, 3)
    H, _ = dcwrnn_forward(X[None], W, U, b, cfg)
    assert np.allclose(H[0], expected, atol=1e-14)
    hist = HistoryBuffer(cfg)
    w = CellWeights(W, U, b)
    for t in range(8):
        assert np.allclose(dcwrnn_step(X[t], hist, w, cfg), expected[t], atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 30), st.integers(0, 1000))
def test_single_band_dcwrnn_is_rnn(units, T, seed):
    cfg = ClockworkConfig.uniform(2, 1, units)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2, T, 3))
    w = _weights(rng, units, 3)
    Hd, _ = dcwrnn_forward(X, w.W, w.U, w.b, cfg)
    Hr, _ = rnn_forward(X, w.W, w.U, w.b)
    assert np.max(np.abs(Hd - Hr)) <= 1e-12


def test_masked_recurrent_entries_have_no_effect():
    cfg = ClockworkConfig.uniform(2, 3, 2)
    rng = np.random.default_rng(6)
    X = rng.normal(size=(1, 10, 3))
    w = _weights(rng, 6, 3)
    noisy = w.U + (1 - cfg.recurrent_mask()) * 100.0
    for fwd in (cwrnn_forward, dcwrnn_forward):
        a, _ = fwd(X, w.W, w.U * cfg.recurrent_mask(), w.b, cfg)
        b, _ = fwd(X, w.W, noisy, w.b, cfg)
        assert np.array_equal(a, b)


# -- shift equivariance --------------------------------------------------------------

def _shift_dev(family, s, seed=7):
    cfg = ClockworkConfig.uniform(2, 3, 2)
    rng = np.random.default_rng(seed)
    W, U = rng.normal(0, 0.5, (6, 2)), rng.normal(0, 0.5, (6, 6))
    b = np.zeros(6)
    X = rng.normal(size=(1, 40, 2))
    Xs = np.concatenate([np.zeros((1, s, 2)), X], axis=1)
    if family == "rnn":
        a, _ = rnn_forward(X, W, U, b)
        c, _ = rnn_forward(Xs, W, U, b)
    else:
        fwd = cwrnn_forward if family == "cwrnn" else dcwrnn_forward
        a, _ = fwd(X, W, U, b, cfg)
        c, _ = fwd(Xs, W, U, b, cfg)
    return np.max(np.abs(c[:, s:] - a))


@pytest.mark.parametrize("s", [1, 3, 5])
def test_rnn_and_dcwrnn_shift_equivariant(s):
    assert _shift_dev("rnn", s) <= 1e-12
    assert _shift_dev("dcwrnn", s) <= 1e-12


def test_cwrnn_shift_equivariance_breaks_off_grid():
    assert _shift_dev("cwrnn", 4) <= 1e-12
    assert _shift_dev("cwrnn", 8) <= 1e-12
    assert _shift_dev("cwrnn", 1) > 1e-3
    assert _shift_dev("cwrnn", 3) > 1e-3
