"""Snippet-level evaluation: ROC AUC and average precision with pinned
tie policies, model scoring of whole videos, and the hyperparameter
sweep harness.

AUC is the Mann-Whitney pair statistic (ties credited 0.5), computed via
average ranks. AP walks the ranking sorted by descending score with
lower index winning ties, averaging precision at each recalled positive.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import model as md


class UndefinedMetricError(ValueError):
    """The metric has no value on this input (single-class labels)."""


def _check_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError(f"metric: scores {scores.shape} vs labels "
                         f"{labels.shape}")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("metric: labels must be 0/1")
    return scores, labels.astype(np.int64)


def _average_ranks(scores):
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and scores[order[j]] == scores[order[i]]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + 1 + j)  # mean of ranks i+1 .. j
        i = j
    return ranks


def auc(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly, ties 0.5."""
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc: needs both classes")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ap(scores, labels):
    """Mean precision at each newly recalled positive."""
    scores, labels = _check_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("ap: needs at least one positive")
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = 0
    total = 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            total += hits / rank
    return float(total / n_pos)


def expand_to_frames(values, factor):
    """Repeat each per-snippet value `factor` times (snippet -> frames)."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"expand_to_frames: factor {factor} < 1")
    return np.repeat(np.asarray(values), factor)


@dataclass
class ScoredSequence:
    """Per-snippet anomaly scores, feature magnitudes and ground truth."""

    video_id: str
    scores: np.ndarray
    magnitudes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        t = len(self.scores)
        if len(self.magnitudes) != t or len(self.labels) != t:
            raise ValueError("ScoredSequence: length mismatch")
        if ((self.scores < 0).any() or (self.scores > 1).any()
                or (self.magnitudes < 0).any()):
            raise ValueError("ScoredSequence: scores outside [0,1] or "
                             "negative magnitudes")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("ScoredSequence: labels must be 0/1")


def score_video(params, features, mtn_config, classifier_config,
                video_id="", snippet_labels=None):
    """Inference pass: learned-feature magnitudes and classifier scores.

    Dropout is off; no graph is recorded. Missing snippet labels are
    stored as all zeros.
    """
    features = np.asarray(features, dtype=np.float64)
    with ad.no_grad():
        x = md.mtn_forward(ad.Tensor(features), params, mtn_config)
        scores = md.classify_snippets(x, params, classifier_config,
                                      training=False)
        magnitudes = ad.row_l2norm(x).values
    if snippet_labels is None:
        snippet_labels = np.zeros(features.shape[0], dtype=np.int64)
    return ScoredSequence(video_id, scores.values, magnitudes, snippet_labels)


def score_dataset(params, videos, mtn_config, classifier_config):
    """ScoredSequence per video, in dataset order."""
    return [score_video(params, v.features, mtn_config, classifier_config,
                        video_id=v.video_id, snippet_labels=v.snippet_labels)
            for v in videos]


def pooled_auc(sequences):
    """Snippet-level AUC over the concatenation of all sequences."""
    scores = np.concatenate([s.scores for s in sequences])
    labels = np.concatenate([s.labels for s in sequences])
    return auc(scores, labels)


def pooled_ap(sequences):
    scores = np.concatenate([s.scores for s in sequences])
    labels = np.concatenate([s.labels for s in sequences])
    return ap(scores, labels)


SCORE_COLUMNS = ("t", "score", "magnitude", "label")


def write_scores_csv(path, sequence):
    """Export one video's per-snippet curves as CSV (t, score, magnitude,
    label), ready for plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_COLUMNS)
        for t in range(len(sequence.scores)):
            writer.writerow([t, "%.10g" % sequence.scores[t],
                             "%.10g" % sequence.magnitudes[t],
                             int(sequence.labels[t])])


@dataclass
class SweepPoint:
    axis: str
    value: float
    auc: float


SWEEP_COLUMNS = ("axis", "value", "auc")


def write_sweep_csv(path, points):
    """Export sweep results as CSV (axis, value, auc)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for p in points:
            writer.writerow([p.axis, "%.10g" % p.value, "%.10g" % p.auc])


def sweep(train_videos, eval_videos, mtn_config, classifier_config,
          train_config, axis, values):
    """Train one model per axis value with identical seeding and report
    snippet-level evaluation AUC for each.

    axis "k" varies the top-k count, "m" the hinge margin. Each run
    tracks the evaluation set during training, so the AUC reported is
    that of the best epoch within the configured budget.
    """
    from . import trainer  # deferred: trainer imports metrics for val AUC

    if axis not in ("k", "m"):
        raise ValueError(f"sweep: axis {axis!r} not in ('k', 'm')")
    values = list(values)
    if not values:
        raise ValueError("sweep: no values")
    points = []
    for value in values:
        if axis == "k":
            loss_cfg = replace(train_config.loss, k=int(value))
        else:
            loss_cfg = replace(train_config.loss, margin=float(value))
        cfg = replace(train_config, loss=loss_cfg)
        result = trainer.train(train_videos, mtn_config, classifier_config, cfg,
                               val_videos=eval_videos)
        scored = score_dataset(result.params, eval_videos, mtn_config,
                               classifier_config)
        points.append(SweepPoint(axis=axis, value=float(value),
                                 auc=pooled_auc(scored)))
    return points
