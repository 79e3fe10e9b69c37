import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinauth.cells import ClockworkConfig
from kinauth.errors import InsufficientDataError
from kinauth.evaluation import (classes_kept, compute_eer, det_sweep, hter,
                                invariance_cell, invariance_trace, per_group_eer,
                                topk_session_accuracy)


def _brute_eer(gen, imp):
    # every candidate threshold, rates by explicit counting
    cands = sorted(set(gen) | set(imp))
    cands.append(np.nextafter(cands[-1], np.inf))
    best = None
    for t in cands:
        far = sum(1 for s in imp if s >= t) / len(imp)
        frr = sum(1 for s in gen if s < t) / len(gen)
        gap = abs(far - frr)
        if best is None or gap < best[0]:
            best = (gap, (far + frr) / 2, t)
    return best[1], best[2]


# -- DET and EER ---------------------------------------------------------------------

def test_separable_sets():
    e, theta = compute_eer([0.9, 0.8, 0.7], [0.6, 0.5, 0.4])
    assert e == 0.0
    assert 0.6 < theta <= 0.7


def test_interleaved_pair_by_hand():
    e, theta = compute_eer([0.8, 0.4], [0.6, 0.2])
    assert e == 0.5
    assert 0.4 < theta <= 0.6


def test_chance_level():
    rng = np.random.default_rng(0)
    e, _ = compute_eer(rng.normal(size=5000), rng.normal(size=5000))
    assert e == pytest.approx(0.5, abs=0.03)


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        det_sweep([], [1.0])
    with pytest.raises(ValueError):
        hter([1.0], [], 0.0)


def test_matches_brute_force_on_1000_scores():
    rng = np.random.default_rng(1)
    gen, imp = rng.normal(1, 1, 500).round(2), rng.normal(0, 1, 500).round(2)
    assert compute_eer(gen, imp) == _brute_eer(gen.tolist(), imp.tolist())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=12),
       st.lists(st.integers(-5, 5), min_size=1, max_size=12))
def test_tie_break_parity_with_brute_force(gen, imp):
    g, i = [float(v) for v in gen], [float(v) for v in imp]
    assert compute_eer(g, i) == _brute_eer(g, i)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_rates_are_monotone(seed):
    rng = np.random.default_rng(seed)
    c = det_sweep(rng.normal(size=30).round(1), rng.normal(size=20).round(1))
    assert np.all(np.diff(c.thresholds) > 0)
    assert np.all(np.diff(c.far) <= 0) and np.all(np.diff(c.frr) >= 0)
    assert c.far.min() >= 0 and c.frr.max() <= 1
    assert c.far[-1] == 0.0 and c.frr[0] == 0.0


def test_det_csv_header():
    text = det_sweep([1.0], [0.0]).to_csv()
    assert text.splitlines()[1] == "theta,far,frr"
    assert ">=" in text.splitlines()[0]


# -- HTER ----------------------------------------------------------------------------

def test_hter_threshold_below_everything():
    assert hter([0.3, 0.5], [0.1, 0.2], -10.0) == 0.5


def test_hter_at_validation_threshold_tracks_eer():
    rng = np.random.default_rng(2)
    val_e, theta = compute_eer(rng.normal(1.5, 1, 4000), rng.normal(0, 1, 4000))
    test_h = hter(rng.normal(1.5, 1, 4000), rng.normal(0, 1, 4000), theta)
    assert test_h == pytest.approx(val_e, abs=0.02)


# -- top-p% --------------------------------------------------------------------------

def test_classes_kept():
    assert classes_kept(587, 0.05) == 29
    assert classes_kept(20, 0.05) == 1
    assert classes_kept(10, 1.0) == 10
    with pytest.raises(ValueError):
        classes_kept(10, 0.0)


def test_topk_full_set_always_hits():
    rng = np.random.default_rng(3)
    outs = [rng.dirichlet(np.ones(7), size=4) for _ in range(9)]
    assert topk_session_accuracy(outs, rng.integers(0, 7, 9), p=1.0) == 1.0


def test_topk_perfect_classifier():
    labels = np.arange(20)
    outs = [np.eye(20)[[c, c]] for c in labels]
    assert topk_session_accuracy(outs, labels, p=0.05) == 1.0


def test_topk_uses_mean_of_blocks():
    # block 0 favours class 0, block 1 strongly favours class 1: the mean picks 1
    out = np.array([[0.6, 0.3, 0.1], [0.0, 0.9, 0.1]])
    assert topk_session_accuracy([out], [1], p=0.34) == 1.0
    assert topk_session_accuracy([out], [0], p=0.34) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_topk_monotone_in_p(seed):
    rng = np.random.default_rng(seed)
    outs = [rng.dirichlet(np.ones(30), size=3) for _ in range(15)]
    labels = rng.integers(0, 30, 15)
    accs = [topk_session_accuracy(outs, labels, p) for p in (0.05, 0.1, 0.3, 0.6, 1.0)]
    assert accs == sorted(accs)


# -- per-group EER ---------------------------------------------------------------------

def test_identical_groups_equal_pooled():
    gen, imp = [0.9, 0.3, 0.6], [0.5, 0.1, 0.7]
    recs = [(g, s, True) for g in "ab" for s in gen] + [(g, s, False) for g in "ab" for s in imp]
    mean, used, skipped = per_group_eer(recs)
    assert mean == compute_eer(gen, imp)[0]
    assert (used, skipped) == (2, 0)


def test_group_mean_by_hand():
    recs = [("a", 1.0, True), ("a", 0.0, False), ("b", 0.8, True), ("b", 0.4, True),
            ("b", 0.6, False), ("b", 0.2, False)]
    assert per_group_eer(recs)[0] == 0.25


def test_group_missing_a_class_is_skipped():
    recs = [("a", 1.0, True), ("a", 0.0, False), ("b", 0.5, True)]
    assert per_group_eer(recs) == (0.0, 1, 1)
    with pytest.raises(InsufficientDataError):
        per_group_eer([("b", 0.5, True)])


def test_per_group_thresholds_beat_pooled_on_offset_groups():
    # groups whose scores sit at different offsets: a shared threshold pays for
    # the offsets, per-group thresholds do not
    rng = np.random.default_rng(4)
    for _ in range(100):
        recs = []
        for g in range(4):
            shift = rng.normal(0, 2)
            recs += [(g, s, True) for s in rng.normal(1 + shift, 1, 50)]
            recs += [(g, s, False) for s in rng.normal(shift, 1, 50)]
        pooled = compute_eer([s for _, s, y in recs if y], [s for _, s, y in recs if not y])[0]
        assert per_group_eer(recs)[0] <= pooled + 1e-12


def test_homogeneous_random_splits_scatter_around_pooled():
    # with no offsets the per-group mean is a noisy estimate of the pooled EER,
    # not a bound on it
    rng = np.random.default_rng(5)
    diffs = []
    for _ in range(100):
        gen, imp = rng.normal(1, 1, 200), rng.normal(0, 1, 200)
        pooled = compute_eer(gen, imp)[0]
        recs = [(int(g), s, True) for g, s in zip(rng.integers(0, 4, 200), gen)]
        recs += [(int(g), s, False) for g, s in zip(rng.integers(0, 4, 200), imp)]
        diffs.append(per_group_eer(recs)[0] - pooled)
    assert abs(np.mean(diffs)) < 0.02


# -- shift invariance ----------------------------------------------------------------------

EIGHT_BANDS = ClockworkConfig.uniform(2, 8, 1)


def _trace(family, seed, cfg=EIGHT_BANDS, steps=200):
    x = np.random.default_rng(1000 + seed).normal(size=steps)
    return invariance_trace(family, x, cfg, invariance_cell(family, cfg, seed))


def test_run_count_is_two_to_k_minus_one():
    rep = _trace("dcwrnn", 0)
    assert rep.n_runs == 128
    assert rep.traces.shape == (128, 200)


@pytest.mark.parametrize("family", ["rnn", "dcwrnn"])
def test_zero_bias_cells_are_shift_invariant(family):
    assert _trace(family, 0).max_deviation <= 1e-12


def test_cwrnn_is_not_shift_invariant_over_seeds():
    devs = [_trace("cwrnn", s).max_deviation for s in range(20)]
    dcw = [_trace("dcwrnn", s).max_deviation for s in range(20)]
    assert sum(d > 1e-3 for d in devs) >= 18
    assert all(d <= 1e-9 for d in dcw)


def test_single_band_cwrnn_is_invariant():
    cfg = ClockworkConfig.uniform(2, 1, 8)
    rep = invariance_trace("cwrnn", np.random.default_rng(0).normal(size=50), cfg,
                           invariance_cell("cwrnn", cfg, 0), n_runs=5)
    assert rep.max_deviation <= 1e-12


def test_short_sequence_rejected():
    with pytest.raises(InsufficientDataError):
        invariance_trace("rnn", np.zeros(128), EIGHT_BANDS, invariance_cell("rnn", EIGHT_BANDS))
    with pytest.raises(ValueError):
        invariance_trace("lstm", np.zeros(300), EIGHT_BANDS, invariance_cell("rnn", EIGHT_BANDS))


def test_invariance_csv_rows():
    cfg = ClockworkConfig.uniform(2, 2, 1)
    rep = invariance_trace("rnn", np.ones(5), cfg, invariance_cell("rnn", cfg))
    lines = rep.to_csv().splitlines()
    assert lines[1] == "shift,step,value"
    assert len(lines) == 2 + 2 * 5
