"""Mini-batch training loop: per-class without-replacement sampling,
Adam with decoupled weight decay, per-step logging and checkpointing.

When a validation set is supplied, the loop scores it after every epoch
and keeps the parameters from the best-scoring epoch, so the returned
model (and checkpoint) is the best one seen rather than whatever the
last step left behind. Every step asserts a finite loss; a non-finite
loss or gradient aborts the run with the best parameters seen, or the
last clean epoch's if none were validated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import metrics
from . import model as md


class NonFiniteGradientError(RuntimeError):
    """A gradient came back NaN or infinite; the step was rejected."""


LOG_COLUMNS = ("epoch", "step", "loss_total", "loss_s", "loss_f",
               "g_abn", "g_norm", "val_auc")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    batch_abnormal: int = 32
    batch_normal: int = 32
    epochs: int = 50
    rng_seed: int = 0
    loss: ls.LossConfig = field(default_factory=ls.LossConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"TrainConfig: learning_rate {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"TrainConfig: weight_decay {self.weight_decay}")
        if self.batch_abnormal < 1 or self.batch_normal < 1:
            raise ValueError("TrainConfig: batch sizes must be >= 1")
        if self.epochs < 1:
            raise ValueError(f"TrainConfig: epochs {self.epochs}")


@dataclass
class OptimState:
    """Adam moment accumulators keyed like ModelParams.named()."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, named):
        return cls(m={k: np.zeros(t.shape) for k, t in named.items()},
                   v={k: np.zeros(t.shape) for k, t in named.items()})


def adam_step(named_params, grads, state, config):
    """Decoupled weight decay, then the bias-corrected adaptive update.

    Mutates parameter values and state in place; rejects the whole step
    if any gradient is non-finite.
    """
    for name in named_params:
        g = grads[name]
        if g.shape != named_params[name].shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} vs "
                             f"param {named_params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r} "
                                         f"at optimizer step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    decay = 1.0 - config.learning_rate * config.weight_decay
    for name, param in named_params.items():
        g = grads[name]
        param.values *= decay
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        param.values -= config.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return named_params, state


class MinibatchSampler:
    """Without-replacement cycling within each class; a class's queue
    reshuffles whenever it empties, so over an epoch every video appears
    equally often give or take one."""

    def __init__(self, videos, config, rng):
        self.abnormal = [v for v in videos if v.label == 1]
        self.normal = [v for v in videos if v.label == 0]
        if len(self.abnormal) < config.batch_abnormal:
            raise ValueError(f"sampler: {len(self.abnormal)} abnormal videos "
                             f"< batch_abnormal={config.batch_abnormal}")
        if len(self.normal) < config.batch_normal:
            raise ValueError(f"sampler: {len(self.normal)} normal videos "
                             f"< batch_normal={config.batch_normal}")
        self.config = config
        self.rng = rng
        self._queues = {1: [], 0: []}

    def _draw(self, label, count):
        pool = self.abnormal if label == 1 else self.normal
        queue = self._queues[label]
        out = []
        while len(out) < count:
            if not queue:
                order = self.rng.permutation(len(pool))
                queue.extend(int(i) for i in order)
            out.append(pool[queue.pop(0)])
        return out

    def sample_minibatch(self):
        return (self._draw(1, self.config.batch_abnormal)
                + self._draw(0, self.config.batch_normal))

    def steps_per_epoch(self):
        return max(math.ceil(len(self.abnormal) / self.config.batch_abnormal),
                   math.ceil(len(self.normal) / self.config.batch_normal))


@dataclass
class TrainResult:
    params: md.ModelParams
    log_rows: list
    diverged: bool = False
    message: str = ""
    best_val_auc: float = None

    @property
    def final_val_auc(self):
        for row in reversed(self.log_rows):
            if row["val_auc"] is not None:
                return row["val_auc"]
        return None


def _snapshot(params):
    return {name: t.values.copy() for name, t in params.named().items()}


def _restore(params, snapshot):
    for name, t in params.named().items():
        t.values = snapshot[name].copy()


def write_training_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([
                row["epoch"], row["step"],
                f"{row['loss_total']:.10g}", f"{row['loss_s']:.10g}",
                f"{row['loss_f']:.10g}", f"{row['g_abn']:.10g}",
                f"{row['g_norm']:.10g}",
                "" if row["val_auc"] is None else f"{row['val_auc']:.10g}",
            ])


def train(train_videos, mtn_config, classifier_config, config,
          val_videos=None, log_path=None, checkpoint_path=None,
          initial_params=None):
    """Run the full loop; deterministic given (data, configs, seed).

    Per-step log rows carry the loss components and batch g statistics;
    the epoch's last row also carries snippet-level AUC on val_videos
    when those are provided. When val_videos are given, the parameters
    returned (and checkpointed) are those of the epoch with the highest
    validation AUC — the log still records the full trajectory, so late
    over-training is visible but does not cost the saved model. Without
    val_videos the final parameters are returned. Divergence aborts with
    the best parameters seen, or the last clean epoch's if none were
    validated.
    """
    seed_seq = np.random.SeedSequence(config.rng_seed)
    init_seq, sample_seq, dropout_seq = seed_seq.spawn(3)
    if initial_params is None:
        params = md.ModelParams.init(mtn_config, classifier_config,
                                     np.random.default_rng(init_seq))
    else:
        params = initial_params
    sampler = MinibatchSampler(train_videos, config,
                               np.random.default_rng(sample_seq))
    dropout_rng = np.random.default_rng(dropout_seq)
    named = params.named()
    state = OptimState.for_params(named)

    rows = []
    last_good = _snapshot(params)
    best_snapshot = None
    best_val = None
    diverged = False
    message = ""
    global_step = 0
    for epoch in range(1, config.epochs + 1):
        try:
            for _ in range(sampler.steps_per_epoch()):
                global_step += 1
                batch = [(v.features, v.label) for v in sampler.sample_minibatch()]
                result = ls.total_loss(batch, params, mtn_config,
                                       classifier_config, config.loss,
                                       training=True, rng=dropout_rng)
                loss_value = result.total.item()
                if not np.isfinite(loss_value):
                    raise ad.NonFiniteError(f"loss {loss_value} at step {global_step}")
                ad.backward(result.total)
                grads = {name: (t.grad if t.grad is not None
                                else np.zeros(t.shape))
                         for name, t in named.items()}
                adam_step(named, grads, state, config)
                rows.append(dict(epoch=epoch, step=global_step,
                                 loss_total=loss_value,
                                 loss_s=result.magnitude,
                                 loss_f=result.classifier,
                                 g_abn=result.g_abnormal,
                                 g_norm=result.g_normal,
                                 val_auc=None))
        except (ad.NonFiniteError, NonFiniteGradientError) as exc:
            diverged = True
            message = str(exc)
            _restore(params, best_snapshot if best_snapshot is not None
                     else last_good)
            break
        if val_videos:
            scored = metrics.score_dataset(params, val_videos, mtn_config,
                                           classifier_config)
            auc = metrics.pooled_auc(scored)
            rows[-1]["val_auc"] = auc
            if best_val is None or auc > best_val:
                best_val = auc
                best_snapshot = _snapshot(params)
        last_good = _snapshot(params)

    if not diverged and best_snapshot is not None:
        _restore(params, best_snapshot)
    if log_path is not None:
        write_training_log(log_path, rows)
    if checkpoint_path is not None:
        md.save_model(checkpoint_path, params, mtn_config, classifier_config)
    return TrainResult(params=params, log_rows=rows, diverged=diverged,
                       message=message, best_val_auc=best_val)
