import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kinauth.errors import DataError, InsufficientDataError, ParseError
from kinauth.signal import (STD_FLOOR, NormalizationStats, SensorStream, apply_affine,
                            assemble_blocks, draw_obfuscation, extract_features,
                            fit_normalization, ingest_csv, obfuscate, obfuscation_from_mu,
                            raw_features, resample, write_csv)

HEADER = "t,ax,ay,az,gx,gy,gz\n"


def _write(tmp_path, body, name="s.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body)
    return p


def _stream(values, rate=50.0):
    values = np.asarray(values, dtype=float)
    return SensorStream(np.arange(len(values)) / rate, values, rate)


# -- ingestion ---------------------------------------------------------------------

def test_ingest_three_rows(tmp_path):
    p = _write(tmp_path, "0,1,2,3,4,5,6\n0.02,1,2,3,4,5,6\n0.04,1,2,3,4,5,6\n")
    s = ingest_csv(p)
    assert len(s) == 3
    assert np.array_equal(s.values[1], [1, 2, 3, 4, 5, 6])


def test_ingest_nan_names_line_2(tmp_path):
    p = _write(tmp_path, "0,NaN,2,3,4,5,6\n0.02,1,2,3,4,5,6\n")
    with pytest.raises(ParseError, match="line 2"):
        ingest_csv(p)


def test_ingest_malformed_row_is_a_data_error(tmp_path):
    p = _write(tmp_path, "0,1,2,3,4,5,6\n0.02,1,2,3\n")
    with pytest.raises(DataError, match="line 3"):
        ingest_csv(p)


def test_ingest_duplicate_timestamp_keeps_first(tmp_path):
    p = _write(tmp_path, "0.00,1,0,0,0,0,0\n0.00,9,0,0,0,0,0\n0.02,2,0,0,0,0,0\n")
    s = ingest_csv(p)
    assert len(s) == 2
    assert s.values[0, 0] == 1.0


def test_ingest_backwards_time_is_rejected(tmp_path):
    p = _write(tmp_path, "0.04,1,0,0,0,0,0\n0.02,2,0,0,0,0,0\n")
    with pytest.raises(DataError):
        ingest_csv(p)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = _stream(rng.normal(size=(20, 6)))
    write_csv(tmp_path / "x.csv", s)
    back = ingest_csv(tmp_path / "x.csv")
    assert np.array_equal(back.values, s.values)
    assert np.array_equal(back.t, s.t)


# -- resampling --------------------------------------------------------------------

def test_resample_constant():
    t = np.arange(400) / 200.0
    v = np.zeros((400, 6))
    v[:, 0] = 1.0
    out = resample(SensorStream(t, v, 200.0), 50.0)
    assert np.all(out.values[:, 0] == 1.0)
    assert out.rate_hz == 50.0
    assert np.allclose(np.diff(out.t), 1 / 50.0, atol=1e-9)


def test_resample_ramp_by_hand():
    v = np.zeros((2, 6))
    v[:, 0] = [0.0, 0.1]
    out = resample(SensorStream(np.array([0.0, 0.1]), v, 10.0), 50.0)
    assert np.allclose(out.values[:, 0], [0, 0.02, 0.04, 0.06, 0.08, 0.1], atol=1e-12)


@pytest.mark.parametrize("n", [0, 1])
def test_resample_needs_two_frames(n):
    with pytest.raises(InsufficientDataError):
        resample(SensorStream(np.arange(n) / 50.0, np.zeros((n, 6)), 50.0), 25.0)


# -- obfuscation -------------------------------------------------------------------

def test_obfuscation_identity_is_bit_exact():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(30, 6)) * 1e3
    vec = obfuscation_from_mu(np.ones(12), channel_std=rng.uniform(0.1, 5, 6))
    assert np.array_equal(apply_affine(v, vec.gains, vec.offsets), v)


def test_obfuscation_gain_by_hand():
    mu = np.ones(12)
    mu[0] = 1.02
    vec = obfuscation_from_mu(mu)
    out = apply_affine(np.array([[1.0, 2.0, 3.0, 0, 0, 0]]), vec.gains, vec.offsets)
    assert np.allclose(out[0, :3], [1.02, 2.0, 3.0], atol=1e-15)


def test_obfuscation_draw_range_and_determinism():
    a = draw_obfuscation(np.random.default_rng(5), np.full(6, 2.0))
    b = draw_obfuscation(np.random.default_rng(5), np.full(6, 2.0))
    assert np.array_equal(a.raw_mu, b.raw_mu)
    assert np.all((a.raw_mu >= 0.98) & (a.raw_mu <= 1.02))
    assert np.allclose(a.offsets, (a.raw_mu[6:] - 1) * 2.0)


def test_obfuscate_stream():
    s = _stream(np.ones((10, 6)))
    out, vec = obfuscate(s, np.random.default_rng(0))
    assert np.allclose(out.values, vec.gains + vec.offsets)
    with pytest.raises(InsufficientDataError):
        obfuscate(_stream(np.zeros((0, 6))), np.random.default_rng(0))


# -- features ----------------------------------------------------------------------

def _feat(a, w=(0.0, 0.0, 0.0)):
    return raw_features(np.array([list(a) + list(w)]))[0]


def test_axis_aligned_angles():
    f = _feat((1, 0, 0))
    assert f[12] == 1.0
    assert np.allclose(f[6:9], [0, math.pi / 2, math.pi / 2])


def test_three_four_five():
    f = _feat((3, 4, 0))
    assert f[12] == 5.0
    assert f[6] == pytest.approx(0.927295, abs=1e-6)


def test_zero_vector_angles():
    f = _feat((0, 0, 0))
    assert f[12] == 0.0
    assert np.all(f[6:12] == math.pi / 2)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (7, 6), elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_features_finite_and_in_range(values):
    f = raw_features(values)
    assert f.shape == (7, 14)
    assert np.all(np.isfinite(f))
    assert np.all((f[:, 6:12] >= 0) & (f[:, 6:12] <= math.pi))
    assert np.all(f[:, 12:] >= 0)


def test_normalization_two_points():
    # only the ax coordinate is checked; its raw feature values are {1, 3}
    v = np.zeros((2, 6))
    v[:, 0] = [1.0, 3.0]
    stats = fit_normalization([v])
    assert stats.mean[0] == 2.0 and stats.std[0] == 1.0
    assert np.allclose(extract_features(v, stats)[:, 0], [-1.0, 1.0])


def test_normalization_constant_dim_floored():
    v = np.full((3, 6), 5.0)
    stats = fit_normalization([v])
    assert stats.std[0] == STD_FLOOR
    assert np.all(np.isfinite(extract_features(v, stats)))


def test_normalization_empty_corpus():
    with pytest.raises(InsufficientDataError):
        fit_normalization([])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=4), st.integers(0, 10_000))
def test_normalization_matches_concatenation(lengths, seed):
    rng = np.random.default_rng(seed)
    parts = [rng.normal(size=(n, 6)) * rng.uniform(0.1, 10) for n in lengths]
    cat = np.concatenate(parts)
    if len(cat) < 2:
        return
    stats = fit_normalization(parts)
    feats = raw_features(cat)
    assert np.allclose(stats.mean, feats.mean(axis=0), rtol=1e-10, atol=1e-10)
    assert np.allclose(stats.std, np.maximum(feats.std(axis=0), STD_FLOOR), rtol=1e-9, atol=1e-12)


def test_normalized_fitting_corpus_is_standard():
    rng = np.random.default_rng(3)
    parts = [rng.normal(size=(200, 6)) + rng.normal(size=6) for _ in range(3)]
    stats = fit_normalization(parts)
    z = extract_features(np.concatenate(parts), stats)
    assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
    assert np.allclose(z.std(axis=0), 1.0, atol=1e-9)


def test_stats_apply_is_affine():
    stats = NormalizationStats(np.arange(14.0), np.full(14, 2.0))
    assert np.allclose(stats.apply(np.arange(14.0)[None]), 0.0)


# -- blocks ------------------------------------------------------------------------

def test_blocks_default_layout():
    frames = np.arange(525 * 14, dtype=float).reshape(525, 14)
    seq = assemble_blocks(frames, 50, 20, 0.5)
    assert seq.blocks.shape == (20, 50, 14)
    assert seq.stride == 25
    assert np.array_equal(seq.blocks[19, -1], frames[-1])


def test_single_block_equals_input():
    frames = np.random.default_rng(0).normal(size=(50, 14))
    assert np.array_equal(assemble_blocks(frames, 50, 1, 0.5).blocks[0], frames)


def test_blocks_insufficient_reports_need():
    with pytest.raises(InsufficientDataError, match="75"):
        assemble_blocks(np.zeros((60, 14)), 50, 2, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.sampled_from([0.0, 0.25, 0.5, 0.75]),
       st.integers(0, 5))
def test_block_index_identity(L, B, overlap, extra):
    stride = max(1, int(math.floor(L * (1 - overlap) + 1e-9)))
    n = L + (B - 1) * stride + extra
    frames = np.arange(n * 2, dtype=float).reshape(n, 2)
    blocks = assemble_blocks(frames, L, B, overlap).blocks
    for i in range(B):
        for j in range(L):
            assert np.array_equal(blocks[i, j], frames[i * stride + j])


def test_blocks_as_many_as_fit():
    seq = assemble_blocks(np.zeros((3100, 14)), 50, None, 0.5)
    assert len(seq.blocks) == (3100 - 50) // 25 + 1
