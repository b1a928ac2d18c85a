"""Metric tests against exhaustive pair counting and rank walking, plus
model scoring and the sweep harness on a miniature dataset."""

import numpy as np
import pytest

from rtfm import data as dio
from rtfm import losses as ls
from rtfm import metrics as mt
from rtfm import model as md
from rtfm import trainer as tr

from oracles import ap_rank_walk_oracle, auc_pair_oracle


# ---------------------------------------------------------------------------
# auc

def test_auc_perfect_separation():
    assert mt.auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert mt.auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0


def test_auc_all_ties_is_half():
    assert mt.auc(np.full(10, 0.5), [1, 0] * 5) == 0.5


def test_auc_hand_computed_tie_case():
    # pairs: (1,.5)+(1,0)+(.5,.5 tie)+(.5,0) = 1+1+0.5+1 of 4
    assert mt.auc([1.0, 0.5, 0.5, 0.0], [1, 1, 0, 0]) == 0.875


def test_auc_matches_pair_oracle_with_ties():
    rng = np.random.default_rng(90)
    for _ in range(20):
        n = int(rng.integers(10, 60))
        scores = np.round(rng.random(n), 1)  # coarse grid forces ties
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        np.testing.assert_allclose(mt.auc(scores, labels),
                                   auc_pair_oracle(scores, labels), atol=1e-12)


def test_auc_invariant_under_monotone_transforms():
    rng = np.random.default_rng(91)
    scores = rng.normal(size=40)
    labels = rng.integers(0, 2, size=40)
    labels[:2] = [0, 1]
    base = mt.auc(scores, labels)
    for transform in (lambda s: 3.0 * s + 7.0, np.tanh, lambda s: s ** 3):
        assert mt.auc(transform(scores), labels) == base


def test_auc_error_cases():
    with pytest.raises(mt.UndefinedMetricError):
        mt.auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        mt.auc([0.1, 0.2], [1, 2])
    with pytest.raises(ValueError):
        mt.auc([0.1], [1, 0])


# ---------------------------------------------------------------------------
# ap

def test_ap_single_positive_positions():
    assert mt.ap([0.9, 0.5, 0.1], [1, 0, 0]) == 1.0
    assert mt.ap([0.9, 0.5, 0.1], [0, 0, 1]) == pytest.approx(1.0 / 3.0)


def test_ap_tie_broken_by_lower_index():
    assert mt.ap([0.5, 0.5], [0, 1]) == 0.5
    assert mt.ap([0.5, 0.5], [1, 0]) == 1.0


def test_ap_is_one_iff_positives_outrank_negatives():
    assert mt.ap([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert mt.ap([0.9, 0.4, 0.5, 0.2], [1, 1, 0, 0]) < 1.0


def test_ap_matches_rank_walk_oracle():
    rng = np.random.default_rng(92)
    for _ in range(20):
        n = int(rng.integers(5, 80))
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, size=n)
        labels[0] = 1
        np.testing.assert_allclose(mt.ap(scores, labels),
                                   ap_rank_walk_oracle(scores, labels),
                                   atol=1e-12)


def test_ap_requires_a_positive():
    with pytest.raises(mt.UndefinedMetricError):
        mt.ap([0.4, 0.2], [0, 0])


# ---------------------------------------------------------------------------
# frame expansion

def test_expand_to_frames_repeats_and_preserves_auc():
    np.testing.assert_array_equal(mt.expand_to_frames([1.0, 2.0], 3),
                                  [1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
    rng = np.random.default_rng(93)
    scores = rng.random(30)
    labels = rng.integers(0, 2, size=30)
    labels[:2] = [0, 1]
    assert mt.auc(mt.expand_to_frames(scores, 16),
                  mt.expand_to_frames(labels, 16)) == mt.auc(scores, labels)
    with pytest.raises(ValueError):
        mt.expand_to_frames([1.0], 0)


# ---------------------------------------------------------------------------
# scoring

def test_scored_sequence_validation():
    with pytest.raises(ValueError):
        mt.ScoredSequence("v", [0.5, 1.5], [1.0, 1.0], [0, 0])
    with pytest.raises(ValueError):
        mt.ScoredSequence("v", [0.5], [-1.0], [0])
    with pytest.raises(ValueError):
        mt.ScoredSequence("v", [0.5, 0.5], [1.0], [0, 0])


def test_score_video_zero_weight_model():
    mtn = md.MtnConfig(t=8, d=16)
    clf = md.ClassifierConfig()
    params = md.ModelParams.zeros(mtn, clf)
    f = np.random.default_rng(94).normal(size=(8, 16))
    seq = mt.score_video(params, f, mtn, clf, video_id="v0")
    np.testing.assert_array_equal(seq.scores, np.full(8, 0.5))
    np.testing.assert_allclose(seq.magnitudes, np.linalg.norm(f, axis=1),
                               rtol=1e-12)
    np.testing.assert_array_equal(seq.labels, np.zeros(8, dtype=np.int64))


def test_score_video_magnitudes_match_external_recompute():
    rng = np.random.default_rng(95)
    mtn = md.MtnConfig(t=8, d=16)
    clf = md.ClassifierConfig(layer_widths=(16, 8, 1))
    params = md.ModelParams.init(mtn, clf, rng)
    f = rng.normal(size=(8, 16))
    seq = mt.score_video(params, f, mtn, clf)
    from rtfm import autodiff as ad
    x = md.mtn_forward(ad.Tensor(f), params, mtn).values
    np.testing.assert_allclose(seq.magnitudes,
                               np.sqrt((x * x).sum(axis=1)), rtol=1e-12)
    # inference is a pure function
    again = mt.score_video(params, f, mtn, clf)
    np.testing.assert_array_equal(seq.scores, again.scores)
    np.testing.assert_array_equal(seq.magnitudes, again.magnitudes)


# ---------------------------------------------------------------------------
# sweep

def tiny_dataset(rng, n_each=3, t=8, d=8):
    videos = []
    for i in range(n_each):
        f = rng.normal(size=(t, d))
        labels = np.zeros(t, dtype=np.int64)
        f[:2] += 3.0
        labels[:2] = 1
        videos.append(dio.LabeledVideo(f"abn{i}", f, 1, labels))
    for i in range(n_each):
        videos.append(dio.LabeledVideo(f"nrm{i}", rng.normal(size=(t, d)), 0,
                                       np.zeros(t, dtype=np.int64)))
    return videos


def tiny_configs():
    mtn = md.MtnConfig(t=8, d=8)
    clf = md.ClassifierConfig(layer_widths=(8, 4, 1), dropout_rate=0.3)
    cfg = tr.TrainConfig(batch_abnormal=2, batch_normal=2, epochs=2,
                         rng_seed=5, loss=ls.LossConfig(k=2, margin=20.0))
    return mtn, clf, cfg


def test_sweep_validates_inputs():
    mtn, clf, cfg = tiny_configs()
    with pytest.raises(ValueError):
        mt.sweep([], [], mtn, clf, cfg, "q", [1])
    with pytest.raises(ValueError):
        mt.sweep([], [], mtn, clf, cfg, "k", [])


def test_write_scores_csv_round_trip(tmp_path):
    import csv as csv_mod
    seq = mt.ScoredSequence("v", [0.25, 0.75], [1.5, 2.5], [0, 1])
    path = tmp_path / "v.csv"
    mt.write_scores_csv(path, seq)
    with open(path, newline="") as fh:
        rows = list(csv_mod.reader(fh))
    assert rows[0] == list(mt.SCORE_COLUMNS)
    assert rows[1] == ["0", "0.25", "1.5", "0"]
    assert rows[2] == ["1", "0.75", "2.5", "1"]


def test_write_sweep_csv_round_trip(tmp_path):
    import csv as csv_mod
    points = [mt.SweepPoint("k", 3.0, 0.875), mt.SweepPoint("k", 8.0, 0.75)]
    path = tmp_path / "sweep.csv"
    mt.write_sweep_csv(path, points)
    with open(path, newline="") as fh:
        rows = list(csv_mod.reader(fh))
    assert rows[0] == list(mt.SWEEP_COLUMNS)
    assert rows[1] == ["k", "3", "0.875"]
    assert rows[2] == ["k", "8", "0.75"]


def test_sweep_repeated_value_is_deterministic():
    rng = np.random.default_rng(96)
    videos = tiny_dataset(rng)
    held_out = tiny_dataset(np.random.default_rng(97))
    mtn, clf, cfg = tiny_configs()
    points = mt.sweep(videos, held_out, mtn, clf, cfg, "k", [2, 2])
    assert points[0].auc == points[1].auc
    assert [p.value for p in points] == [2.0, 2.0]
    single = mt.sweep(videos, held_out, mtn, clf, cfg, "m", [20.0])
    assert single[0].axis == "m"
    assert 0.0 <= single[0].auc <= 1.0
