"""Multi-scale temporal network (MTN) and the per-snippet classifier.

The MTN maps a video's (T, D) snippet-feature matrix to learned temporal
features X of the same shape: three pyramid dilated-convolution (PDC)
branches capture local multi-resolution dependencies, a temporal
self-attention (TSA) branch captures global pairwise ones, and the four
D/4-wide branch outputs concatenate back to D with a skip connection from
the input. The classifier scores each row of X independently through a
small FC stack ending in a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data

KERNEL_WIDTH = 3
ATTENTION_NORMS = ("none", "scale_by_t", "row_softmax")


@dataclass(frozen=True)
class MtnConfig:
    """Shape and wiring of the temporal feature extractor."""

    t: int = 32
    d: int = 64
    dilation_rates: tuple = (1, 2, 4)
    attention_norm: str = "none"

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"MtnConfig: t={self.t} < 1")
        if self.d < 4 or self.d % 4 != 0:
            raise ValueError(f"MtnConfig: d={self.d} not divisible by 4")
        object.__setattr__(self, "dilation_rates", tuple(self.dilation_rates))
        if len(self.dilation_rates) != 3:
            raise ValueError("MtnConfig: exactly three PDC dilation rates "
                             "(three PDC branches + TSA concatenate to d)")
        if any(int(r) < 1 for r in self.dilation_rates):
            raise ValueError(f"MtnConfig: dilation rates {self.dilation_rates} "
                             "must be strictly positive")
        if self.attention_norm not in ATTENTION_NORMS:
            raise ValueError(f"MtnConfig: attention_norm {self.attention_norm!r} "
                             f"not in {ATTENTION_NORMS}")

    @property
    def branch_width(self):
        return self.d // 4


@dataclass(frozen=True)
class ClassifierConfig:
    """FC stack widths and dropout rate (drop probability)."""

    layer_widths: tuple = (512, 128, 1)
    dropout_rate: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(self.layer_widths))
        if not self.layer_widths or self.layer_widths[-1] != 1:
            raise ValueError(f"ClassifierConfig: final width must be 1, "
                             f"got {self.layer_widths}")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"ClassifierConfig: widths {self.layer_widths}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"ClassifierConfig: dropout_rate {self.dropout_rate} "
                             "outside [0, 1)")


def _glorot(rng, fan_in, fan_out, shape):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass
class ModelParams:
    """All learnable tensors of the MTN and classifier.

    1x1 convolutions are stored as (C_out, C_in) matrices; PDC kernel
    banks as (D/4, D, W). Biases exist on every conv and FC layer and
    initialize to zero, which keeps the zero-weight identity exact.
    """

    pdc_kernels: list
    pdc_biases: list
    tsa_reduce_w: ad.Tensor
    tsa_reduce_b: ad.Tensor
    tsa_proj_w: list
    tsa_proj_b: list
    tsa_out_w: ad.Tensor
    tsa_out_b: ad.Tensor
    fc_weights: list
    fc_biases: list

    @classmethod
    def init(cls, mtn_config, classifier_config, rng):
        """Fan-scaled uniform weights, zero biases."""
        d = mtn_config.d
        bw = mtn_config.branch_width
        w = KERNEL_WIDTH

        def tensor(values):
            return ad.Tensor(values, requires_grad=True)

        pdc_kernels = [tensor(_glorot(rng, d * w, bw * w, (bw, d, w)))
                       for _ in range(3)]
        pdc_biases = [tensor(np.zeros(bw)) for _ in range(3)]
        tsa_reduce_w = tensor(_glorot(rng, d, bw, (bw, d)))
        tsa_reduce_b = tensor(np.zeros(bw))
        tsa_proj_w = [tensor(_glorot(rng, bw, bw, (bw, bw))) for _ in range(3)]
        tsa_proj_b = [tensor(np.zeros(bw)) for _ in range(3)]
        tsa_out_w = tensor(_glorot(rng, bw, bw, (bw, bw)))
        tsa_out_b = tensor(np.zeros(bw))

        fc_weights, fc_biases = [], []
        fan_in = d
        for width in classifier_config.layer_widths:
            fc_weights.append(tensor(_glorot(rng, fan_in, width, (width, fan_in))))
            fc_biases.append(tensor(np.zeros(width)))
            fan_in = width
        return cls(pdc_kernels, pdc_biases, tsa_reduce_w, tsa_reduce_b,
                   tsa_proj_w, tsa_proj_b, tsa_out_w, tsa_out_b,
                   fc_weights, fc_biases)

    @classmethod
    def zeros(cls, mtn_config, classifier_config):
        """All-zero parameters; mtn_forward becomes the identity on F."""
        zero_rng = _ZeroRng()
        return cls.init(mtn_config, classifier_config, zero_rng)

    def named(self):
        """Stable name -> tensor mapping; the checkpoint and optimizer key."""
        out = {}
        for i in range(3):
            out[f"pdc{i + 1}.kernels"] = self.pdc_kernels[i]
            out[f"pdc{i + 1}.bias"] = self.pdc_biases[i]
        out["tsa.reduce.w"] = self.tsa_reduce_w
        out["tsa.reduce.b"] = self.tsa_reduce_b
        for i in range(3):
            out[f"tsa.proj{i + 1}.w"] = self.tsa_proj_w[i]
            out[f"tsa.proj{i + 1}.b"] = self.tsa_proj_b[i]
        out["tsa.out.w"] = self.tsa_out_w
        out["tsa.out.b"] = self.tsa_out_b
        for i in range(len(self.fc_weights)):
            out[f"fc{i + 1}.w"] = self.fc_weights[i]
            out[f"fc{i + 1}.b"] = self.fc_biases[i]
        return out


class _ZeroRng:
    def uniform(self, lo, hi, size):
        return np.zeros(size)


def _check_input(f, config, op):
    if f.shape != (config.t, config.d):
        raise ad.ShapeError(f"{op}: input {f.shape} vs config "
                            f"({config.t}, {config.d})")


def _linear(x, w, b):
    """x @ w.T + b for a (C_out, C_in) weight; the 1x1 conv."""
    return ad.add_rowvec(ad.matmul(x, ad.transpose(w)), b)


def pdc_forward(f, params, config):
    """Three dilated-conv branches, each (T, D) -> (T, D/4)."""
    _check_input(f, config, "pdc_forward")
    out = []
    for kernels, bias, rate in zip(params.pdc_kernels, params.pdc_biases,
                                   config.dilation_rates):
        branch = ad.conv1d_dilated(f, kernels, rate)
        out.append(ad.add_rowvec(branch, bias))
    return out


def tsa_forward(f, params, config):
    """Self-attention branch (T, D) -> (T, D/4).

    Reduces F to F_c, projects it three ways, forms the T x T attention
    map from the first two projections, applies it to the third, maps the
    result through the output 1x1 conv, and adds the F_c skip.
    """
    _check_input(f, config, "tsa_forward")
    f_c = _linear(f, params.tsa_reduce_w, params.tsa_reduce_b)
    f_c1 = _linear(f_c, params.tsa_proj_w[0], params.tsa_proj_b[0])
    f_c2 = _linear(f_c, params.tsa_proj_w[1], params.tsa_proj_b[1])
    f_c3 = _linear(f_c, params.tsa_proj_w[2], params.tsa_proj_b[2])
    attention = ad.matmul(f_c1, ad.transpose(f_c2))
    if config.attention_norm == "scale_by_t":
        attention = ad.affine(attention, 1.0 / config.t)
    elif config.attention_norm == "row_softmax":
        attention = ad.row_softmax(attention)
    attended = ad.matmul(attention, f_c3)
    f_c4 = _linear(attended, params.tsa_out_w, params.tsa_out_b)
    return ad.add(f_c4, f_c)


def mtn_forward(f, params, config):
    """Full extractor: concat(PDC1, PDC2, PDC3, TSA) + skip from F."""
    _check_input(f, config, "mtn_forward")
    branches = pdc_forward(f, params, config) + [tsa_forward(f, params, config)]
    stacked = ad.concat_cols(branches)
    if stacked.shape[1] != config.d:
        raise ad.ShapeError(f"mtn_forward: branch widths sum to "
                            f"{stacked.shape[1]}, expected {config.d}")
    return ad.add(stacked, f)


def save_model(path, params, mtn_config, classifier_config):
    """Checkpoint the parameters plus enough metadata to rebuild configs."""
    arrays = {name: t.values for name, t in params.named().items()}
    arrays["meta/t"] = np.array([mtn_config.t], dtype=np.float64)
    arrays["meta/dilation_rates"] = np.array(mtn_config.dilation_rates,
                                             dtype=np.float64)
    arrays["meta/attention_norm"] = np.array(
        [ATTENTION_NORMS.index(mtn_config.attention_norm)], dtype=np.float64)
    arrays["meta/dropout_rate"] = np.array([classifier_config.dropout_rate],
                                           dtype=np.float64)
    data.save_checkpoint(path, arrays)


def load_model(path):
    """Rebuild (params, MtnConfig, ClassifierConfig) from a checkpoint.

    D and the classifier widths come from the stored array shapes, the
    rest from the meta entries.
    """
    arrays = data.load_checkpoint(path)
    try:
        d = arrays["pdc1.kernels"].shape[1]
        t = int(arrays["meta/t"][0])
        rates = tuple(int(r) for r in arrays["meta/dilation_rates"])
        norm = ATTENTION_NORMS[int(arrays["meta/attention_norm"][0])]
        dropout_rate = float(arrays["meta/dropout_rate"][0])
        widths = []
        i = 1
        while f"fc{i}.w" in arrays:
            widths.append(arrays[f"fc{i}.w"].shape[0])
            i += 1
    except (KeyError, IndexError) as exc:
        raise data.FormatError(f"{path}: not a model checkpoint "
                               f"({exc!r})") from exc
    mtn_config = MtnConfig(t=t, d=d, dilation_rates=rates, attention_norm=norm)
    classifier_config = ClassifierConfig(layer_widths=tuple(widths),
                                         dropout_rate=dropout_rate)
    params = ModelParams.zeros(mtn_config, classifier_config)
    for name, tensor in params.named().items():
        if name not in arrays:
            raise data.FormatError(f"{path}: missing parameter {name!r}")
        if arrays[name].shape != tensor.shape:
            raise data.FormatError(f"{path}: {name!r} has shape "
                                   f"{arrays[name].shape}, expected {tensor.shape}")
        if not np.all(np.isfinite(arrays[name])):
            raise data.FormatError(f"{path}: non-finite values in {name!r}")
        tensor.values = arrays[name]
    return params, mtn_config, classifier_config


def classify_snippets(x, params, config, training=False, rng=None):
    """Row-wise FC stack -> per-snippet scores in [0, 1], shape (T,).

    Dropout follows each hidden ReLU and is active only when training;
    train mode needs an rng for the masks.
    """
    h = x
    n_layers = len(params.fc_weights)
    for i, (w, b) in enumerate(zip(params.fc_weights, params.fc_biases)):
        h = _linear(h, w, b)
        if i < n_layers - 1:
            h = ad.relu(h)
            h = ad.dropout(h, config.dropout_rate, rng=rng, training=training)
    return ad.reshape(ad.sigmoid(h), (x.shape[0],))
