"""Pure numpy versions of the per-example kernels.

Signatures match the compiled ``_kernels`` module one for one.  Inputs are
expected to be contiguous float64 / uint8 arrays; :mod:`avucal.kernels`
does the coercion.
"""
import numpy as np


def entropy_rows(probs, eps):
    return -(probs * np.log(probs + eps)).sum(axis=1)


def hard_counts(correct, u, u_th):
    acc = correct.astype(bool)
    unc = u > u_th
    return np.array([
        np.count_nonzero(acc & ~unc),
        np.count_nonzero(acc & unc),
        np.count_nonzero(~acc & ~unc),
        np.count_nonzero(~acc & unc),
    ], dtype=np.int64)


def soft_counts_forward(p, t, correct, uncertain):
    acc = correct.astype(bool)
    unc = uncertain.astype(bool)
    return np.array([
        (p * (1.0 - t))[acc & ~unc].sum(),
        (p * t)[acc & unc].sum(),
        ((1.0 - p) * (1.0 - t))[~acc & ~unc].sum(),
        ((1.0 - p) * t)[~acc & unc].sum(),
    ])


def soft_counts_backward(p, t, correct, uncertain, g):
    acc = correct.astype(bool)
    unc = uncertain.astype(bool)
    ac, au, ic, iu = acc & ~unc, acc & unc, ~acc & ~unc, ~acc & unc
    dp = np.zeros_like(p)
    dt = np.zeros_like(t)
    dp[ac] = g[0] * (1.0 - t[ac])
    dt[ac] = -g[0] * p[ac]
    dp[au] = g[1] * t[au]
    dt[au] = g[1] * p[au]
    dp[ic] = -g[2] * (1.0 - t[ic])
    dt[ic] = -g[2] * (1.0 - p[ic])
    dp[iu] = -g[3] * t[iu]
    dt[iu] = g[3] * (1.0 - p[iu])
    return dp, dt


def binned_sums(values, targets, n_bins):
    # bin l (0-based) holds values in (l/L, (l+1)/L]; zero falls into bin 0
    idx = np.clip(np.ceil(values * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    sum_v = np.bincount(idx, weights=values, minlength=n_bins)
    sum_t = np.bincount(idx, weights=targets, minlength=n_bins)
    return counts, sum_v, sum_t


def average_ranks(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(n)
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks
