"""Accuracy-versus-uncertainty utility, its differentiable surrogate, and the training losses.

Every prediction falls into one of four groups:

    AC  accurate and certain      AU  accurate and uncertain
    IC  inaccurate and certain    IU  inaccurate and uncertain

where "uncertain" means predictive entropy above a threshold ``u_th``.
AvU = (n_AC + n_IU) / (n_AC + n_AU + n_IC + n_IU).  The soft counts replace
each indicator with a weight built from the confidence ``p`` and
``tanh(u)``; group membership itself is decided on detached values.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from avucal import diffcore as dc
from avucal import kernels

AVUC_EPS = 1e-10
ENTROPY_EPS = 1e-12
DEFAULT_T_GRID = np.linspace(0.0, 1.0, 21)

Scalar = Union[float, int, dc.Node]


@dataclass
class AvuCounts:
    n_ac: Scalar
    n_au: Scalar
    n_ic: Scalar
    n_iu: Scalar
    u_th: float

    def values(self) -> np.ndarray:
        return np.array([_val(self.n_ac), _val(self.n_au), _val(self.n_ic), _val(self.n_iu)])

    @property
    def total(self) -> float:
        return float(self.values().sum())


def _val(x) -> float:
    return x.item() if isinstance(x, dc.Node) else float(x)


@dataclass
class PredictiveBatch:
    """Detached per-example summary of a predictive distribution."""

    probs: np.ndarray
    labels: np.ndarray
    pred_label: np.ndarray
    confidence: np.ndarray
    uncertainty: np.ndarray

    @classmethod
    def from_probs(cls, probs, labels) -> "PredictiveBatch":
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if probs.ndim != 2 or labels.shape != (probs.shape[0],):
            raise ValueError("probs must be (batch, K) with one label per row")
        return cls(probs=probs, labels=labels, pred_label=probs.argmax(axis=1),
                   confidence=probs.max(axis=1),
                   uncertainty=np.maximum(kernels.entropy_rows(probs, ENTROPY_EPS), 0.0))

    @property
    def correct(self) -> np.ndarray:
        return self.pred_label == self.labels

    def __len__(self):
        return self.labels.shape[0]


# ------------------------------------------------------------------ hard utility

def hard_counts(batch: PredictiveBatch, u_th: float) -> AvuCounts:
    if u_th < 0:
        raise ValueError("u_th must be non-negative")
    ac, au, ic, iu = (int(v) for v in kernels.hard_counts(batch.correct, batch.uncertainty, u_th))
    return AvuCounts(ac, au, ic, iu, float(u_th))


def avu(counts: AvuCounts) -> float:
    v = counts.values()
    total = v.sum()
    if total <= 0:
        raise ValueError("AvU of an empty batch is undefined")
    return float((v[0] + v[3]) / total)


# ------------------------------------------------------------------ soft utility

def predictive_entropy_node(probs: dc.Node) -> dc.Node:
    return dc.neg(dc.sum(probs * dc.log(probs, eps=ENTROPY_EPS), axis=1))


def mean_probs(logits_samples: Sequence[dc.Node], temperature: float = 1.0) -> dc.Node:
    """Average of the softmaxed samples (the Monte Carlo predictive distribution)."""
    if not logits_samples:
        raise ValueError("need at least one logit sample")
    acc = None
    for logits in logits_samples:
        z = logits if temperature == 1.0 else dc.scale(logits, 1.0 / temperature)
        s = dc.softmax(z)
        acc = s if acc is None else acc + s
    return dc.scale(acc, 1.0 / len(logits_samples))


def _soft_count_vector(p: dc.Node, t: dc.Node, correct: np.ndarray, uncertain: np.ndarray) -> dc.Node:
    """Fused (n_AC, n_AU, n_IC, n_IU) with gradients w.r.t. confidence and tanh(u)."""
    correct = np.ascontiguousarray(correct, dtype=np.uint8)
    uncertain = np.ascontiguousarray(uncertain, dtype=np.uint8)
    pv, tv = p.value, t.value
    out = kernels.soft_counts_forward(pv, tv, correct, uncertain)

    def grad_fn(g):
        return kernels.soft_counts_backward(pv, tv, correct, uncertain, g)

    return dc._make(out, (p, t), grad_fn, "soft_counts")


def soft_counts_from(confidence: dc.Node, uncertainty: dc.Node, correct, u_th: float) -> AvuCounts:
    """Soft counts from per-example confidence and uncertainty nodes."""
    uncertain = uncertainty.value > u_th
    vec = _soft_count_vector(confidence, dc.tanh(uncertainty), np.asarray(correct, bool), uncertain)
    return AvuCounts(dc.index(vec, 0), dc.index(vec, 1), dc.index(vec, 2), dc.index(vec, 3), float(u_th))


def soft_counts(probs: dc.Node, labels, u_th: float) -> AvuCounts:
    """Differentiable counts for a batch of predictive distributions (batch x K)."""
    labels = np.asarray(labels, dtype=np.int64)
    correct = probs.value.argmax(axis=1) == labels
    return soft_counts_from(dc.max(probs, axis=1), predictive_entropy_node(probs), correct, u_th)


def avuc_loss(counts: AvuCounts) -> dc.Node:
    """log(1 + (n_AU + n_IC) / (n_AC + n_IU + 1e-10))."""
    bad = counts.n_au + counts.n_ic
    good = dc.add_scalar(counts.n_ac + counts.n_iu, AVUC_EPS)
    return dc.log(dc.add_scalar(bad / good, 1.0))


def _soft_avu(counts: AvuCounts) -> dc.Node:
    good = counts.n_ac + counts.n_iu
    total = dc.add_scalar(good + counts.n_au + counts.n_ic, AVUC_EPS)
    return good / total


def au_avuc_loss(probs: dc.Node, labels, t_grid: Optional[Sequence[float]] = None) -> dc.Node:
    """-log of the area under soft AvU across thresholds u_min + t (u_max - u_min).

    The area is normalized by the span of ``t_grid`` (trapezoid rule).  If all
    uncertainties coincide, falls back to :func:`avuc_loss` at that value.
    """
    t_grid = DEFAULT_T_GRID if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size < 2 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be sorted with at least two distinct points")
    labels = np.asarray(labels, dtype=np.int64)
    correct = probs.value.argmax(axis=1) == labels
    conf = dc.max(probs, axis=1)
    u = predictive_entropy_node(probs)
    u_min, u_max = float(u.value.min()), float(u.value.max())
    if u_max <= u_min:
        return avuc_loss(soft_counts_from(conf, u, correct, u_min))
    t_node = dc.tanh(u)
    curve = []
    for t in t_grid:
        u_th = u_min + t * (u_max - u_min)
        vec = _soft_count_vector(conf, t_node, correct, u.value > u_th)
        counts = AvuCounts(dc.index(vec, 0), dc.index(vec, 1), dc.index(vec, 2), dc.index(vec, 3), u_th)
        curve.append(_soft_avu(counts))
    avus = dc.concat(curve)
    widths = np.diff(t_grid) / (t_grid[-1] - t_grid[0])
    weights = np.zeros(t_grid.size)
    weights[:-1] += widths / 2.0
    weights[1:] += widths / 2.0
    area = dc.sum(avus * dc.constant(weights))
    return dc.neg(dc.log(dc.add_scalar(area, AVUC_EPS)))


# ------------------------------------------------------------------ likelihood terms

def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels


def cross_entropy_loss(logits: dc.Node, labels) -> dc.Node:
    labels = _check_labels(labels, logits.shape[1])
    return dc.neg(dc.mean(dc.pick(dc.log_softmax(logits), labels)))


def elbo_loss(logits_samples: Sequence[dc.Node], labels, kl: Optional[dc.Node],
              kl_scale: float) -> dc.Node:
    """Monte Carlo expected NLL (batch mean, averaged over samples) + kl_scale * KL."""
    if not logits_samples:
        raise ValueError("need at least one logit sample")
    nll = None
    for logits in logits_samples:
        ce = cross_entropy_loss(logits, labels)
        nll = ce if nll is None else nll + ce
    nll = dc.scale(nll, 1.0 / len(logits_samples))
    if kl is None or kl_scale == 0:
        return nll
    return nll + dc.scale(kl, kl_scale)


def total_loss(elbo: dc.Node, avuc: dc.Node, beta: float = 3.0) -> dc.Node:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return elbo + dc.scale(avuc, beta)
