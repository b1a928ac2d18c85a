"""The training objective: top-k magnitude separability with a hinge
margin, binary cross-entropy on the top-k magnitude snippets, and
smoothness/sparsity score regularizers, combined over a mixed batch.

Feature magnitude means the l2 norm of a learned snippet feature row; a
video is summarized by g, the mean magnitude of its k largest-norm
snippets. The hinge pushes g of abnormal videos above g of normal videos
by a margin, while the classifier trains only on each video's top-k
magnitude snippets, which inherit the video label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as md

SCORE_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    k: int = 3
    margin: float = 100.0
    smoothness_weight: float = 8e-5
    sparsity_weight: float = 8e-5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"LossConfig: k={self.k} < 1")
        if self.margin <= 0:
            raise ValueError(f"LossConfig: margin={self.margin} <= 0")
        if self.smoothness_weight < 0 or self.sparsity_weight < 0:
            raise ValueError("LossConfig: regularizer weights must be >= 0")


@dataclass
class SeparabilityResult:
    """Top-k mean magnitudes of an (abnormal, normal) pair and their gap."""

    g_abnormal: ad.Tensor
    g_normal: ad.Tensor
    d: ad.Tensor


def topk_mean_magnitude(x, k):
    """Mean l2 norm of the k largest-norm rows; differentiable through
    the selected rows only."""
    if k > x.shape[0]:
        raise ValueError(f"topk_mean_magnitude: k={k} > T={x.shape[0]}")
    idx = ad.topk_rows_by_l2(x, k)
    return ad.take1d(ad.row_l2norm(x), idx).mean()


def separability(x_plus, x_minus, k):
    g_plus = topk_mean_magnitude(x_plus, k)
    g_minus = topk_mean_magnitude(x_minus, k)
    return SeparabilityResult(g_plus, g_minus, ad.sub(g_plus, g_minus))


def _check_label(y):
    if y not in (0, 1):
        raise ValueError(f"label {y!r} not in {{0, 1}}")
    return int(y)


def magnitude_loss(x_i, x_j, y_i, y_j, config):
    """Hinge on the separability gap; nonzero only for an ordered
    (abnormal, normal) pair."""
    y_i = _check_label(y_i)
    y_j = _check_label(y_j)
    if (y_i, y_j) != (1, 0):
        return ad.Tensor(0.0, op="zero_pair")
    gap = separability(x_i, x_j, config.k).d
    return ad.relu(ad.affine(gap, -1.0, config.margin))


def classifier_loss(scores, x, y, config):
    """BCE of the video label against the scores of the top-k magnitude
    snippets of X, summed over the k selected snippets."""
    y = _check_label(y)
    idx = ad.topk_rows_by_l2(x, config.k)
    selected = ad.take1d(scores, idx)
    if y == 1:
        p = clamp_scores(selected)
    else:
        p = clamp_scores(ad.affine(selected, -1.0, 1.0))
    return ad.affine(ad.log(p).sum(), -1.0)


def clamp_scores(scores):
    return ad.clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS)


def smoothness(scores):
    """Sum of squared neighboring score differences; 0 for T < 2."""
    t = scores.shape[0]
    if t < 2:
        return ad.Tensor(0.0, op="smoothness_empty")
    diffs = ad.sub(ad.slice1d(scores, 1, t), ad.slice1d(scores, 0, t - 1))
    return ad.square(diffs).sum()


def sparsity(scores):
    """Sum of absolute scores."""
    return ad.absolute(scores).sum()


def _mean_scalars(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = ad.add(acc, t)
    return ad.affine(acc, 1.0 / len(tensors))


@dataclass
class TotalLossResult:
    """Scalar objective plus float components for logging.

    `total` is the differentiable tensor; the rest are detached values.
    `selected` maps batch position to the top-k snippet indices that fed
    the classifier loss, for selection-consistency instrumentation.
    """

    total: ad.Tensor
    magnitude: float
    classifier: float
    g_abnormal: float
    g_normal: float
    selected: dict


def total_loss(batch, params, mtn_config, classifier_config, loss_config,
               training=False, rng=None):
    """Objective over a batch of (features, label) pairs.

    Mean hinge over all ordered (abnormal, normal) pairs, plus the mean
    over videos of the classifier loss with smoothness and sparsity
    regularizers added for abnormal videos.

    Args:
        batch: sequence of (F, y) with F a (T, D) array or tensor and
            y in {0, 1}. Needs at least one video of each class.
        training: enables classifier dropout; requires rng.

    Returns:
        TotalLossResult.
    """
    feats, labels = [], []
    for f, y in batch:
        if not isinstance(f, ad.Tensor):
            f = ad.Tensor(f)
        feats.append(f)
        labels.append(_check_label(y))
    abnormal = [i for i, y in enumerate(labels) if y == 1]
    normal = [i for i, y in enumerate(labels) if y == 0]
    if not abnormal or not normal:
        raise ValueError(f"total_loss: batch has {len(abnormal)} abnormal and "
                         f"{len(normal)} normal videos; need both classes")

    g_values = {}
    clf_terms = []
    video_terms = []
    selected = {}
    for i, (f, y) in enumerate(zip(feats, labels)):
        x = md.mtn_forward(f, params, mtn_config)
        scores = md.classify_snippets(x, params, classifier_config,
                                      training=training, rng=rng)
        idx = ad.topk_rows_by_l2(x, loss_config.k)
        selected[i] = np.array(sorted(int(j) for j in idx))
        g_values[i] = ad.take1d(ad.row_l2norm(x), idx).mean()
        term = classifier_loss(scores, x, y, loss_config)
        clf_terms.append(term)
        if y == 1:
            reg = ad.add(ad.affine(smoothness(scores), loss_config.smoothness_weight),
                         ad.affine(sparsity(scores), loss_config.sparsity_weight))
            term = ad.add(term, reg)
        video_terms.append(term)

    hinges = []
    for i in abnormal:
        for j in normal:
            gap = ad.sub(g_values[i], g_values[j])
            hinges.append(ad.relu(ad.affine(gap, -1.0, loss_config.margin)))
    pair_mean = _mean_scalars(hinges)
    video_mean = _mean_scalars(video_terms)
    total = ad.add(pair_mean, video_mean)

    return TotalLossResult(
        total=total,
        magnitude=pair_mean.item(),
        classifier=float(np.mean([t.item() for t in clf_terms])),
        g_abnormal=float(np.mean([g_values[i].item() for i in abnormal])),
        g_normal=float(np.mean([g_values[i].item() for i in normal])),
        selected=selected,
    )
