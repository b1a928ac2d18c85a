"""Minimal reverse-mode autodiff over float64 numpy arrays.

Implements exactly the operations the magnitude-learning graph needs:
dense matmul, dilated 1-d convolution over snippet sequences, elementwise
nonlinearities, row-norm reductions and top-k row selection with
subgradient routing, plus masked dropout. Every node creation validates
finiteness, so a NaN or overflow surfaces at the op that produced it
instead of three modules later.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand ranks or extents incompatible with the requested op."""


class NonFiniteError(ValueError):
    """An op produced (or was handed) a NaN or infinite value."""


class UnsupportedKernelError(ValueError):
    """Convolution kernel layout the engine does not support."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block; ops return plain values."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _validated(values, op):
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    return arr


class Tensor:
    """Graph node: a float64 array plus the plumbing to backpropagate.

    `grad` stays None until `backward` reaches the node; a leaf the loss
    never touches therefore reports None, and a leaf whose contribution
    is scaled to zero reports an exact zero array.
    """

    __slots__ = ("values", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, op="leaf"):
        self.values = _validated(values, op)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item: tensor has {self.values.size} elements")
        return float(self.values.reshape(()))

    def sum(self):
        return _reduce(self, np.sum(self.values), "sum", lambda g: np.full(self.shape, g))

    def mean(self):
        n = self.values.size
        return _reduce(self, np.mean(self.values), "mean", lambda g: np.full(self.shape, g / n))

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def _make(values, op, parents, backward):
    """Build an op output; records the graph edge only when grads are on."""
    out = Tensor(values, op=op)
    live = tuple(p for p in parents if p.requires_grad)
    if _GRAD_ENABLED and live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _reduce(x, value, op, spread):
    return _make(value, op, (x,), lambda g: ((x, spread(g)),))


def _check_rank(x, rank, op):
    if x.values.ndim != rank:
        raise ShapeError(f"{op}: expected rank {rank}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise and shape ops

def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.values + b.values, "add", (a, b), lambda g: ((a, g), (b, g)))


def affine(x, scale, shift=0.0):
    """scale * x + shift with python-float coefficients."""
    scale = float(scale)
    return _make(scale * x.values + float(shift), "affine", (x,),
                 lambda g: ((x, scale * g),))


def sub(a, b):
    return add(a, affine(b, -1.0))


def square(x):
    v = x.values
    return _make(v * v, "square", (x,), lambda g: ((x, 2.0 * v * g),))


def absolute(x):
    s = np.sign(x.values)
    return _make(np.abs(x.values), "absolute", (x,), lambda g: ((x, s * g),))


def relu(x):
    mask = x.values > 0.0
    return _make(np.where(mask, x.values, 0.0), "relu", (x,),
                 lambda g: ((x, np.where(mask, g, 0.0)),))


def sigmoid(x):
    v = x.values
    out = np.empty_like(v)
    pos = v >= 0.0
    with np.errstate(over="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def backward(g):
        return ((x, out * (1.0 - out) * g),)

    return _make(out, "sigmoid", (x,), backward)


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(x.values)
    return _make(v, "log", (x,), lambda g: ((x, g / x.values),))


def clamp(x, lo, hi):
    if not lo < hi:
        raise ValueError(f"clamp: empty interval [{lo}, {hi}]")
    inside = (x.values > lo) & (x.values < hi)
    return _make(np.clip(x.values, lo, hi), "clamp", (x,),
                 lambda g: ((x, np.where(inside, g, 0.0)),))


def transpose(x):
    _check_rank(x, 2, "transpose")
    return _make(x.values.T, "transpose", (x,), lambda g: ((x, g.T),))


def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.values.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _make(x.values.reshape(shape), "reshape", (x,),
                 lambda g: ((x, g.reshape(old)),))


def concat_cols(parts):
    """Concatenate rank-2 tensors along the channel (column) axis."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols: no inputs")
    rows = parts[0].shape[0]
    for p in parts:
        _check_rank(p, 2, "concat_cols")
        if p.shape[0] != rows:
            raise ShapeError(f"concat_cols: row counts differ ({p.shape[0]} vs {rows})")
    widths = [p.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(zip(parts, np.split(g, splits, axis=1)))

    return _make(np.concatenate([p.values for p in parts], axis=1),
                 "concat_cols", tuple(parts), backward)


def slice_cols(x, start, stop):
    _check_rank(x, 2, "slice_cols")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: [{start}, {stop}) outside width {x.shape[1]}")

    def backward(g):
        full = np.zeros(x.shape)
        full[:, start:stop] = g
        return ((x, full),)

    return _make(x.values[:, start:stop], "slice_cols", (x,), backward)


def slice1d(x, start, stop):
    _check_rank(x, 1, "slice1d")
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice1d: [{start}, {stop}) outside length {x.shape[0]}")

    def backward(g):
        full = np.zeros(x.shape)
        full[start:stop] = g
        return ((x, full),)

    return _make(x.values[start:stop], "slice1d", (x,), backward)


def take1d(x, indices):
    """Gather entries of a vector; backward scatter-adds into place."""
    _check_rank(x, 1, "take1d")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take1d: indices must be a vector, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take1d: index out of range for length {x.shape[0]}")

    def backward(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return ((x, full),)

    return _make(x.values[idx], "take1d", (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    _check_rank(a, 2, "matmul")
    _check_rank(b, 2, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")

    def backward(g):
        return ((a, g @ b.values.T), (b, a.values.T @ g))

    return _make(a.values @ b.values, "matmul", (a, b), backward)


def add_rowvec(x, b):
    """Add a length-C vector to every row of a (T, C) tensor."""
    _check_rank(x, 2, "add_rowvec")
    _check_rank(b, 1, "add_rowvec")
    if x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec: width {x.shape[1]} vs bias {b.shape[0]}")
    return _make(x.values + b.values[None, :], "add_rowvec", (x, b),
                 lambda g: ((x, g), (b, g.sum(axis=0))))


def row_l2norm(x):
    """Per-row Euclidean norm of a (T, D) tensor; zero rows get zero grad."""
    _check_rank(x, 2, "row_l2norm")
    norms = np.sqrt(np.sum(x.values * x.values, axis=1))

    def backward(g):
        safe = np.where(norms > 0.0, norms, 1.0)
        scale = np.where(norms > 0.0, g / safe, 0.0)
        return ((x, scale[:, None] * x.values),)

    return _make(norms, "row_l2norm", (x,), backward)


def row_softmax(x):
    _check_rank(x, 2, "row_softmax")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = np.sum(g * s, axis=1, keepdims=True)
        return ((x, (g - dot) * s),)

    return _make(s, "row_softmax", (x,), backward)


def conv1d_dilated(signal, kernels, dilation):
    """Dilated 1-d convolution along the snippet axis, length preserving.

    Args:
        signal: (T, C_in) tensor, rows are snippets.
        kernels: (C_out, C_in, W) tensor, W odd.
        dilation: positive int; zero padding of (W-1)//2 * dilation per
            side keeps the output length at T.

    Returns:
        (T, C_out) tensor.
    """
    _check_rank(signal, 2, "conv1d_dilated")
    if kernels.values.ndim != 3:
        raise UnsupportedKernelError(
            f"conv1d_dilated: kernels must be (C_out, C_in, W), got {kernels.shape}")
    t, c_in = signal.shape
    c_out, k_in, width = kernels.shape
    if k_in != c_in:
        raise ShapeError(f"conv1d_dilated: signal channels {c_in}, kernel expects {k_in}")
    if width % 2 == 0:
        raise UnsupportedKernelError(f"conv1d_dilated: kernel width {width} is even")
    dilation = int(dilation)
    if dilation < 1:
        raise ValueError(f"conv1d_dilated: dilation {dilation} < 1")

    pad = (width - 1) // 2 * dilation
    padded = np.zeros((t + 2 * pad, c_in))
    padded[pad:pad + t] = signal.values
    kv = kernels.values
    out = np.zeros((t, c_out))
    for w in range(width):
        out += padded[w * dilation:w * dilation + t] @ kv[:, :, w].T

    def backward(g):
        dk = np.zeros_like(kv)
        dpad = np.zeros_like(padded)
        for w in range(width):
            lo = w * dilation
            dk[:, :, w] = g.T @ padded[lo:lo + t]
            dpad[lo:lo + t] += g @ kv[:, :, w]
        return ((signal, dpad[pad:pad + t]), (kernels, dk))

    return _make(out, "conv1d_dilated", (signal, kernels), backward)


def topk_rows_by_l2(x, k):
    """Indices of the k rows with largest Euclidean norm.

    Returns an int64 array ordered by descending norm; equal norms break
    toward the lower row index. Selection is data-dependent control flow,
    not a graph op, so no gradient flows through the indices themselves.
    """
    _check_rank(x, 2, "topk_rows_by_l2")
    t = x.shape[0]
    if not 1 <= k <= t:
        raise ValueError(f"topk_rows_by_l2: k={k} outside [1, {t}]")
    norms = np.sqrt(np.sum(x.values * x.values, axis=1))
    order = np.argsort(-norms, kind="stable")
    return order[:k]


def dropout(x, rate, rng=None, training=True, mask=None):
    """Inverted dropout; eval mode returns the input unchanged.

    In train mode a kept entry is scaled by 1/(1-rate) and the drawn mask
    is captured by the backward closure, so forward and backward use the
    identical mask.
    """
    rate = float(rate)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if not training:
        return x
    if rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout: train mode needs an rng or an explicit mask")
        mask = rng.random(x.shape) >= rate
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"dropout: mask {mask.shape} vs input {x.shape}")
    keep = mask / (1.0 - rate)
    return _make(x.values * keep, "dropout", (x,), lambda g: ((x, g * keep),))


# ---------------------------------------------------------------------------
# graph traversal and gradients

@dataclass
class Graph:
    """Topological trace of every grad-relevant node reachable from an output.

    `nodes` lists dependencies before dependents; the traced output is the
    final entry. `backward` walks the list once in reverse, so each node's
    closure fires exactly one time no matter how often it is shared.
    """

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output):
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self):
        """Propagate d(output)/d(node) into `.grad` of every traced node."""
        if not self.nodes:
            return
        loss = self.nodes[-1]
        if loss.values.size != 1:
            raise ShapeError(f"backward: output must be scalar, got {loss.shape}")
        for node in self.nodes:
            node.grad = np.zeros(node.shape)
        loss.grad = np.ones(loss.shape)
        for node in reversed(self.nodes):
            if node._backward is None:
                continue
            for parent, contribution in node._backward(node.grad):
                if parent.requires_grad:
                    if contribution.shape != parent.shape:
                        raise ShapeError(
                            f"{node.op}: gradient shape {contribution.shape} "
                            f"vs parent {parent.shape}")
                    parent.grad += contribution


def backward(loss):
    """Trace the graph below `loss`, run backpropagation, return the trace."""
    graph = Graph.trace(loss)
    graph.backward()
    return graph


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class CoordinateError:
    """One finite-difference coordinate that exceeded tolerance."""

    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coordinates: int
    tolerance: float
    per_param: dict
    failures: list
    passed: bool
    error: str = ""

    def format_lines(self):
        lines = []
        for name in sorted(self.per_param):
            lines.append(f"  {name}: max rel err {self.per_param[name]:.3e}")
        status = "pass" if self.passed else "FAIL"
        lines.append(f"grad check {status}: {self.n_coordinates} coordinates, "
                     f"max rel err {self.max_rel_error:.3e} "
                     f"(tolerance {self.tolerance:.1e})")
        if self.error:
            lines.append(f"  aborted: {self.error}")
        return lines


def grad_check(fn, params, names=None, step=1e-4, tolerance=1e-4,
               rel_floor=1e-6, max_coords_per_param=None, rng=None):
    """Compare analytic gradients of `fn()` against central differences.

    Args:
        fn: zero-argument callable rebuilding the scalar loss from the
            current values of `params`. Must be deterministic; freeze any
            dropout masks before checking.
        params: tensors (requires_grad) whose coordinates get perturbed.
        names: labels for the report, defaults to p0, p1, ...
        step: central-difference half step.
        tolerance: rel-error threshold for pass/fail.
        rel_floor: denominator floor, guards 0-vs-0 coordinates.
        max_coords_per_param: if set, check a random subset of that many
            coordinates per tensor instead of every coordinate.
        rng: numpy Generator for the subset draw.

    Returns:
        GradCheckReport. A non-finite evaluation is reported as a failed
        check, not raised.
    """
    params = list(params)
    if names is None:
        names = [f"p{i}" for i in range(len(params))]
    if len(names) != len(params):
        raise ValueError("grad_check: names and params length mismatch")
    if max_coords_per_param is not None and rng is None:
        rng = np.random.default_rng(0)

    def failed(message):
        return GradCheckReport(
            max_rel_error=float("inf"), n_coordinates=0, tolerance=tolerance,
            per_param={}, failures=[], passed=False, error=message)

    try:
        loss = fn()
        backward(loss)
    except NonFiniteError as exc:
        return failed(str(exc))
    analytic = []
    for name, p in zip(names, params):
        if p.grad is None:
            analytic.append(np.zeros(p.shape))
        else:
            analytic.append(p.grad.copy())

    per_param = {}
    failures = []
    n_checked = 0
    worst = 0.0
    for name, p, grad in zip(names, params, analytic):
        flat = p.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = np.sort(rng.choice(flat.size, size=max_coords_per_param,
                                        replace=False))
        worst_here = 0.0
        for c in coords:
            saved = flat[c]
            try:
                with no_grad():
                    flat[c] = saved + step
                    f_plus = fn().item()
                    flat[c] = saved - step
                    f_minus = fn().item()
            except NonFiniteError as exc:
                flat[c] = saved
                return failed(str(exc))
            flat[c] = saved
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(grad.reshape(-1)[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            n_checked += 1
            worst_here = max(worst_here, rel)
            if rel > tolerance:
                failures.append(CoordinateError(
                    param=name,
                    index=tuple(int(i) for i in np.unravel_index(c, p.shape)),
                    analytic=a, numeric=numeric, rel_error=rel))
        per_param[name] = worst_here
        worst = max(worst, worst_here)

    return GradCheckReport(
        max_rel_error=worst, n_coordinates=n_checked, tolerance=tolerance,
        per_param=per_param, failures=failures, passed=not failures)
