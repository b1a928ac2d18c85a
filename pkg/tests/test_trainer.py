"""Optimizer, sampler, and training-loop tests: hand-computed Adam steps,
coverage counting for the cycling sampler, log/checkpoint round-trips,
seeded reproducibility, and the divergence abort path."""

import csv

import numpy as np
import pytest

from rtfm import autodiff as ad
from rtfm import data as dio
from rtfm import losses as ls
from rtfm import metrics
from rtfm import model as md
from rtfm import trainer as tr


def make_videos(rng, n_abnormal, n_normal, t=8, d=8, shift=3.0):
    videos = []
    for i in range(n_abnormal):
        f = rng.normal(size=(t, d))
        f[:2] += shift
        labels = np.zeros(t, dtype=np.int64)
        labels[:2] = 1
        videos.append(dio.LabeledVideo(f"abn{i}", f, 1, labels))
    for i in range(n_normal):
        videos.append(dio.LabeledVideo(f"nrm{i}", rng.normal(size=(t, d)), 0,
                                       np.zeros(t, dtype=np.int64)))
    return videos


# ---------------------------------------------------------------------------
# config and optimizer state

def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(weight_decay=-0.1)
    with pytest.raises(ValueError):
        tr.TrainConfig(batch_abnormal=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(epochs=0)


def test_optim_state_mirrors_param_shapes():
    named = {"a": ad.Tensor(np.zeros((2, 3))), "b": ad.Tensor(np.zeros(4))}
    state = tr.OptimState.for_params(named)
    assert state.step == 0
    for key, t in named.items():
        assert state.m[key].shape == t.shape
        assert np.all(state.m[key] == 0.0) and np.all(state.v[key] == 0.0)


# ---------------------------------------------------------------------------
# adam_step

def scalar_param(value):
    return {"x": ad.Tensor(np.array([value]), requires_grad=True)}


def test_adam_first_step_matches_hand_computation():
    # x=1, g=2, lr=0.1, no decay: m̂=g, v̂=g², x' = 1 − 0.1·2/(2+ε)
    named = scalar_param(1.0)
    state = tr.OptimState.for_params(named)
    cfg = tr.TrainConfig(learning_rate=0.1, weight_decay=0.0)
    tr.adam_step(named, {"x": np.array([2.0])}, state, cfg)
    expected = 1.0 - 0.1 * 2.0 / (2.0 + state.eps)
    np.testing.assert_allclose(named["x"].values, [expected], rtol=0, atol=1e-15)
    np.testing.assert_allclose(named["x"].values, [0.9], atol=1e-7)
    assert state.step == 1


def test_adam_zero_gradient_zero_decay_is_fixed_point():
    named = scalar_param(1.7)
    state = tr.OptimState.for_params(named)
    cfg = tr.TrainConfig(learning_rate=0.1, weight_decay=0.0)
    for _ in range(3):
        tr.adam_step(named, {"x": np.zeros(1)}, state, cfg)
    assert named["x"].values[0] == 1.7


def test_adam_decay_alone_shrinks_multiplicatively():
    named = scalar_param(1.0)
    state = tr.OptimState.for_params(named)
    cfg = tr.TrainConfig(learning_rate=0.1, weight_decay=0.5)
    tr.adam_step(named, {"x": np.zeros(1)}, state, cfg)
    tr.adam_step(named, {"x": np.zeros(1)}, state, cfg)
    assert named["x"].values[0] == 0.95 * 0.95


def test_adam_descends_a_quadratic():
    x = ad.Tensor(np.array([3.0]), requires_grad=True)
    named = {"x": x}
    state = tr.OptimState.for_params(named)
    cfg = tr.TrainConfig(learning_rate=0.1, weight_decay=0.0)
    previous = abs(x.values[0])
    for _ in range(4):
        loss = ad.square(x).sum()
        ad.backward(loss)
        tr.adam_step(named, {"x": x.grad}, state, cfg)
        assert abs(x.values[0]) < previous
        previous = abs(x.values[0])


def test_adam_rejects_non_finite_gradients_atomically():
    named = {"a": ad.Tensor(np.array([1.0, 2.0]), requires_grad=True),
             "b": ad.Tensor(np.array([3.0]), requires_grad=True)}
    state = tr.OptimState.for_params(named)
    cfg = tr.TrainConfig(learning_rate=0.1, weight_decay=0.5)
    before = {k: t.values.copy() for k, t in named.items()}
    grads = {"a": np.array([0.1, 0.2]), "b": np.array([np.inf])}
    with pytest.raises(tr.NonFiniteGradientError):
        tr.adam_step(named, grads, state, cfg)
    for key in named:
        np.testing.assert_array_equal(named[key].values, before[key])
        assert np.all(state.m[key] == 0.0)
    assert state.step == 0


def test_adam_rejects_gradient_shape_mismatch():
    named = scalar_param(1.0)
    state = tr.OptimState.for_params(named)
    with pytest.raises(ValueError):
        tr.adam_step(named, {"x": np.zeros(2)}, state, tr.TrainConfig())


# ---------------------------------------------------------------------------
# sampler

def test_sampler_equal_counts_batch_is_whole_dataset():
    rng = np.random.default_rng(40)
    videos = make_videos(rng, 4, 4)
    cfg = tr.TrainConfig(batch_abnormal=4, batch_normal=4)
    sampler = tr.MinibatchSampler(videos, cfg, np.random.default_rng(0))
    assert sampler.steps_per_epoch() == 1
    batch = sampler.sample_minibatch()
    assert [v.label for v in batch] == [1] * 4 + [0] * 4
    assert sorted(v.video_id for v in batch) == sorted(v.video_id for v in videos)


def test_sampler_rejects_class_smaller_than_batch():
    rng = np.random.default_rng(41)
    videos = make_videos(rng, 3, 8)
    cfg = tr.TrainConfig(batch_abnormal=4, batch_normal=4)
    with pytest.raises(ValueError, match="abnormal"):
        tr.MinibatchSampler(videos, cfg, np.random.default_rng(0))


def test_sampler_coverage_even_when_epoch_tiles_the_class():
    # 10 draws per epoch over 10 videos: every epoch is one full pass
    rng = np.random.default_rng(42)
    videos = make_videos(rng, 10, 10)
    cfg = tr.TrainConfig(batch_abnormal=5, batch_normal=5)
    sampler = tr.MinibatchSampler(videos, cfg, np.random.default_rng(7))
    assert sampler.steps_per_epoch() == 2
    for _ in range(10):
        epoch_counts = {v.video_id: 0 for v in videos}
        for _ in range(sampler.steps_per_epoch()):
            for v in sampler.sample_minibatch():
                epoch_counts[v.video_id] += 1
        assert set(epoch_counts.values()) == {1}


def test_sampler_cumulative_coverage_within_one_at_every_epoch():
    # epoch windows that straddle a reshuffle can skip a video for one
    # epoch, but counts from the start never spread by more than one
    rng = np.random.default_rng(45)
    videos = make_videos(rng, 10, 7)
    cfg = tr.TrainConfig(batch_abnormal=4, batch_normal=3)
    sampler = tr.MinibatchSampler(videos, cfg, np.random.default_rng(7))
    assert sampler.steps_per_epoch() == 3
    totals = {v.video_id: 0 for v in videos}
    for _ in range(10):
        for _ in range(sampler.steps_per_epoch()):
            for v in sampler.sample_minibatch():
                totals[v.video_id] += 1
        for label in (0, 1):
            counts = [c for vid, c in totals.items()
                      if vid.startswith("abn" if label else "nrm")]
            assert max(counts) - min(counts) <= 1


def test_sampler_is_seed_deterministic():
    rng = np.random.default_rng(43)
    videos = make_videos(rng, 6, 6)
    cfg = tr.TrainConfig(batch_abnormal=2, batch_normal=2)
    def draw_ids(seed):
        sampler = tr.MinibatchSampler(videos, cfg, np.random.default_rng(seed))
        return [v.video_id for _ in range(9) for v in sampler.sample_minibatch()]
    assert draw_ids(5) == draw_ids(5)


# ---------------------------------------------------------------------------
# training loop

def small_setup():
    mtn = md.MtnConfig(t=8, d=8)
    clf = md.ClassifierConfig(layer_widths=(16, 8, 1), dropout_rate=0.3)
    return mtn, clf


def test_train_one_epoch_two_videos_logs_one_step():
    rng = np.random.default_rng(50)
    videos = make_videos(rng, 1, 1)
    mtn, clf = small_setup()
    cfg = tr.TrainConfig(batch_abnormal=1, batch_normal=1, epochs=1, rng_seed=3)
    result = tr.train(videos, mtn, clf, cfg)
    assert not result.diverged
    assert len(result.log_rows) == 1
    row = result.log_rows[0]
    assert row["epoch"] == 1 and row["step"] == 1
    for key in ("loss_total", "loss_s", "loss_f", "g_abn", "g_norm"):
        assert np.isfinite(row[key])
    assert row["val_auc"] is None and result.final_val_auc is None
    for name, t in result.params.named().items():
        assert np.all(np.isfinite(t.values)), name


def test_train_log_and_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(51)
    videos = make_videos(rng, 4, 4)
    val = make_videos(np.random.default_rng(52), 2, 2)
    mtn, clf = small_setup()
    cfg = tr.TrainConfig(batch_abnormal=2, batch_normal=2, epochs=2, rng_seed=9)
    log_path = tmp_path / "train.csv"
    ckpt_path = tmp_path / "model.ckpt"
    result = tr.train(videos, mtn, clf, cfg, val_videos=val,
                      log_path=log_path, checkpoint_path=ckpt_path)

    with open(log_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(tr.LOG_COLUMNS)
    body = rows[1:]
    steps = 2  # ceil(4/2) per class, two epochs
    assert len(body) == 2 * steps
    for row, logged in zip(body, result.log_rows):
        assert int(row[0]) == logged["epoch"] and int(row[1]) == logged["step"]
        np.testing.assert_allclose(float(row[2]), logged["loss_total"],
                                   rtol=1e-9)
        if logged["val_auc"] is None:
            assert row[7] == ""
        else:
            np.testing.assert_allclose(float(row[7]), logged["val_auc"],
                                       rtol=1e-9)
    # val AUC only on each epoch's final step
    assert [r[7] == "" for r in body] == [True, False, True, False]
    assert result.final_val_auc == result.log_rows[-1]["val_auc"]

    loaded_params, loaded_mtn, loaded_clf = md.load_model(ckpt_path)
    assert loaded_mtn == mtn and loaded_clf == clf
    for name, t in result.params.named().items():
        np.testing.assert_array_equal(loaded_params.named()[name].values,
                                      t.values)


def test_train_returns_best_validation_epoch_params(tmp_path):
    videos = make_videos(np.random.default_rng(60), 4, 4, shift=1.5)
    val = make_videos(np.random.default_rng(160), 3, 3, shift=1.5)
    mtn, clf = small_setup()
    cfg = tr.TrainConfig(batch_abnormal=2, batch_normal=2, epochs=8,
                         rng_seed=13)
    result = tr.train(videos, mtn, clf, cfg, val_videos=val,
                      checkpoint_path=tmp_path / "model.ckpt")
    aucs = [r["val_auc"] for r in result.log_rows if r["val_auc"] is not None]
    assert len(aucs) == 8
    # this seed peaks before the last epoch, so best and final differ
    assert max(aucs) > aucs[-1]
    assert result.best_val_auc == max(aucs)
    # the returned parameters reproduce the best epoch's AUC exactly
    scored = metrics.score_dataset(result.params, val, mtn, clf)
    assert metrics.pooled_auc(scored) == result.best_val_auc
    # and the checkpoint holds those same parameters
    loaded, _, _ = md.load_model(tmp_path / "model.ckpt")
    for name, t in result.params.named().items():
        np.testing.assert_array_equal(loaded.named()[name].values, t.values)


def test_train_same_seed_is_bit_identical(tmp_path):
    rng = np.random.default_rng(53)
    videos = make_videos(rng, 4, 4)
    mtn, clf = small_setup()
    cfg = tr.TrainConfig(batch_abnormal=4, batch_normal=4, epochs=3, rng_seed=21)
    first = tr.train(videos, mtn, clf, cfg, checkpoint_path=tmp_path / "a.ckpt")
    second = tr.train(videos, mtn, clf, cfg, checkpoint_path=tmp_path / "b.ckpt")
    for name, t in first.params.named().items():
        np.testing.assert_array_equal(t.values, second.params.named()[name].values)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert [r["loss_total"] for r in first.log_rows] == \
        [r["loss_total"] for r in second.log_rows]


def test_train_separability_grows_on_separable_data(tmp_path):
    spec = dio.SyntheticSpec(n_normal=8, n_abnormal=8, t=16, d=16, mu=3,
                             rng_seed=11)
    dio.generate_synthetic_dataset(spec, tmp_path)
    videos = dio.load_dataset(tmp_path / "manifest.txt")
    mtn = md.MtnConfig(t=16, d=16)
    clf = md.ClassifierConfig(layer_widths=(32, 16, 1), dropout_rate=0.3)
    cfg = tr.TrainConfig(batch_abnormal=4, batch_normal=4, epochs=10,
                         rng_seed=1, loss=ls.LossConfig())
    result = tr.train(videos, mtn, clf, cfg)
    assert not result.diverged
    gaps = []
    for epoch in range(1, 11):
        rows = [r for r in result.log_rows if r["epoch"] == epoch]
        gaps.append(np.mean([r["g_abn"] - r["g_norm"] for r in rows]))
    assert all(later > earlier for earlier, later in zip(gaps, gaps[1:])), gaps


@pytest.mark.filterwarnings("ignore:overflow")
def test_train_divergence_restores_last_good_params():
    rng = np.random.default_rng(54)
    videos = make_videos(rng, 1, 1)
    mtn, clf = small_setup()
    cfg = tr.TrainConfig(batch_abnormal=1, batch_normal=1, epochs=3, rng_seed=2)
    params = md.ModelParams.init(mtn, clf, np.random.default_rng(0))
    for t in params.named().values():
        t.values = np.full(t.shape, 1e200)
    before = {k: t.values.copy() for k, t in params.named().items()}
    result = tr.train(videos, mtn, clf, cfg, initial_params=params)
    assert result.diverged
    assert result.message
    assert result.log_rows == []
    for name, t in result.params.named().items():
        np.testing.assert_array_equal(t.values, before[name])
