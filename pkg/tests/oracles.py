"""Brute-force reference implementations used across the test suite.

Everything here is written from first principles (explicit loops, full
sorts, exhaustive pair enumeration) and deliberately shares no code with
the package under test.
"""

import numpy as np


def matmul_oracle(a, b):
    """Triple loop, no numpy matmul."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def conv_oracle(signal, kernels, dilation):
    """Index-by-index dilated convolution with explicit zero padding."""
    t, c_in = signal.shape
    c_out, _, width = kernels.shape
    pad = (width - 1) // 2 * dilation
    out = np.zeros((t, c_out))
    for i in range(t):
        for o in range(c_out):
            acc = 0.0
            for w in range(width):
                src = i + w * dilation - pad
                if 0 <= src < t:
                    for c in range(c_in):
                        acc += signal[src, c] * kernels[o, c, w]
            out[i, o] = acc
    return out


def topk_oracle(x, k):
    """Sort rows by (descending norm, ascending index), keep first k."""
    norms = [float(np.sqrt(np.sum(row * row))) for row in x]
    order = sorted(range(len(norms)), key=lambda i: (-norms[i], i))
    return sorted(order[:k])


def topk_mean_norm_oracle(x, k):
    norms = sorted((float(np.sqrt(np.sum(row * row))) for row in x), reverse=True)
    return sum(norms[:k]) / k


def central_diff(fn, arrays, step=1e-6):
    """Plain central finite differences over in-place perturbed arrays."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = fn()
            flat[i] = saved - step
            f_minus = fn()
            flat[i] = saved
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def auc_pair_oracle(scores, labels):
    """O(P*N) pair counting, ties credited 0.5."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def ap_rank_walk_oracle(scores, labels):
    """Sort by (descending score, ascending index); average the precision
    at each newly recalled positive."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(1 for y in labels if y == 1)
    hits = 0
    total = 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            total += hits / rank
    return total / n_pos


def gaussian_norm_mean_oracle(d, sigma, noncentrality):
    """Closed-form E||x|| for x ~ N(mu_vec, sigma^2 I_d), ||mu_vec|| given.

    E||x|| = sigma * sqrt(2) * Gamma((d+1)/2) / Gamma(d/2)
             * 1F1(-1/2; d/2; -||mu||^2 / (2 sigma^2))
    """
    from scipy import special

    lam = (noncentrality / sigma) ** 2
    ratio = np.exp(special.gammaln((d + 1) / 2.0) - special.gammaln(d / 2.0))
    return sigma * np.sqrt(2.0) * ratio * special.hyp1f1(-0.5, d / 2.0, -lam / 2.0)


def truncated_normal_mean_oracle(mean, std, n=4_000_001):
    """E of N(mean, std^2) truncated to [0, inf), by dense numeric quadrature."""
    if std == 0.0:
        return float(mean)
    lo, hi = 0.0, mean + 12.0 * std
    xs = np.linspace(lo, hi, n)
    pdf = np.exp(-0.5 * ((xs - mean) / std) ** 2)
    return float(np.trapezoid(xs * pdf, xs) / np.trapezoid(pdf, xs))
