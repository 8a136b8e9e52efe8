"""Calibration, uncertainty-quality and shift-detection metrics.

All functions take plain numpy arrays and return floats (or small arrays);
nothing here touches the autodiff graph.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from avucal import kernels
from avucal.avuc import AvuCounts, PredictiveBatch, avu, hard_counts

DEFAULT_BINS = 15
NLL_EPS = 1e-12


@dataclass
class BinStat:
    index: int
    count: int
    mean_target: float  # acc (ECE) or err (UCE)
    mean_value: float   # conf (ECE) or uncert (UCE)


def _binned(values, targets, n_bins: int) -> Tuple[float, List[BinStat]]:
    values = np.asarray(values, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty input")
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if values.shape != targets.shape:
        raise ValueError("values and targets differ in length")
    counts, sum_v, sum_t = kernels.binned_sums(values, targets, n_bins)
    n = values.size
    gap, stats = 0.0, []
    for l in range(n_bins):
        c = int(counts[l])
        if c == 0:
            stats.append(BinStat(l, 0, 0.0, 0.0))
            continue
        mv, mt = sum_v[l] / c, sum_t[l] / c
        gap += c / n * abs(mt - mv)
        stats.append(BinStat(l, c, float(mt), float(mv)))
    return float(gap), stats


def ece(confidences, correctness, n_bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error over equal-width confidence bins ((l-1)/L, l/L]."""
    return _binned(confidences, np.asarray(correctness, dtype=np.float64), n_bins)[0]


def ece_bins(confidences, correctness, n_bins: int = DEFAULT_BINS) -> List[BinStat]:
    return _binned(confidences, np.asarray(correctness, dtype=np.float64), n_bins)[1]


def uce(normalized_uncertainties, errors, n_bins: int = DEFAULT_BINS) -> float:
    """Expected uncertainty calibration error: |error rate - mean normalized uncertainty| per bin."""
    return _binned(normalized_uncertainties, np.asarray(errors, dtype=np.float64), n_bins)[0]


def normalized_uncertainty(u, k: int) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=np.float64) / np.log(k), 0.0, 1.0)


def nll(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    p_true = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(p_true, NLL_EPS))))


def brier(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.size), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def accuracy(probs, labels) -> float:
    return float(np.mean(np.asarray(probs).argmax(axis=1) == np.asarray(labels)))


# ------------------------------------------------------------------ AvU family

def conditional_probs(counts: AvuCounts) -> Tuple[Optional[float], Optional[float]]:
    """(p(accurate | certain), p(uncertain | inaccurate)); None where a denominator is zero."""
    ac, au, ic, iu = counts.values()
    p_ac = ac / (ac + ic) if ac + ic > 0 else None
    p_ui = iu / (ic + iu) if ic + iu > 0 else None
    return (None if p_ac is None else float(p_ac), None if p_ui is None else float(p_ui))


def threshold_grid(uncertainty, t_grid) -> np.ndarray:
    u = np.asarray(uncertainty, dtype=np.float64)
    return u.min() + np.asarray(t_grid, dtype=np.float64) * (u.max() - u.min())


def avu_curve(batch: PredictiveBatch, t_grid) -> np.ndarray:
    return np.array([avu(hard_counts(batch, th)) for th in threshold_grid(batch.uncertainty, t_grid)])


def conditional_curves(batch: PredictiveBatch, t_grid) -> Tuple[np.ndarray, np.ndarray]:
    """p(acc|certain) and p(unc|inacc) across normalized thresholds; NaN where undefined."""
    pac, pui = [], []
    for th in threshold_grid(batch.uncertainty, t_grid):
        a, b = conditional_probs(hard_counts(batch, th))
        pac.append(np.nan if a is None else a)
        pui.append(np.nan if b is None else b)
    return np.array(pac), np.array(pui)


def trapezoid_area(t_grid, y) -> float:
    t = np.asarray(t_grid, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(np.diff(t) * (y[1:] + y[:-1]) / 2.0))


def avu_auc(batch: PredictiveBatch, t_grid=None) -> float:
    """Trapezoidal area under hard AvU over t in [0, 1]."""
    t_grid = np.linspace(0.0, 1.0, 21) if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    return trapezoid_area(t_grid, avu_curve(batch, t_grid))


# ------------------------------------------------------------------ detection

def auroc(scores_pos, scores_neg) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via the rank-sum statistic."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score sets must be non-empty")
    ranks = kernels.average_ranks(np.concatenate([pos, neg]))
    r_pos = ranks[:pos.size].sum()
    return float((r_pos - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def average_precision(scores, labels) -> float:
    """Step-wise area under precision-recall; tied scores enter as one threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = labels.sum()
    if n_pos == 0:
        raise ValueError("no positive examples")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[s[1:] != s[:-1], True]  # end of each tie group
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def aupr(scores_pos, scores_neg, positive: str = "out") -> float:
    """AUPR with the shifted set (``out``) or the in-distribution set (``in``) as positives.

    Scores are uncertainties, so for ``in`` they are negated.
    """
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    scores = np.concatenate([pos, neg])
    is_out = np.r_[np.ones(pos.size, bool), np.zeros(neg.size, bool)]
    if positive == "out":
        return average_precision(scores, is_out)
    if positive == "in":
        return average_precision(-scores, ~is_out)
    raise ValueError("positive must be 'in' or 'out'")


def detection_accuracy(scores_pos, scores_neg) -> float:
    """max over thresholds of (TPR + TNR) / 2, flagging score >= threshold as positive."""
    pos = np.sort(np.asarray(scores_pos, dtype=np.float64))
    neg = np.sort(np.asarray(scores_neg, dtype=np.float64))
    cands = np.unique(np.concatenate([pos, neg, [np.inf]]))
    tpr = 1.0 - np.searchsorted(pos, cands, side="left") / pos.size
    tnr = np.searchsorted(neg, cands, side="left") / neg.size
    return float(np.max((tpr + tnr) / 2.0))


def wasserstein1(a, b) -> float:
    """1-D earth mover's distance between two empirical distributions."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    allv = np.sort(np.concatenate([a, b]))
    widths = np.diff(allv)
    cdf_a = np.searchsorted(a, allv[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, allv[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


def spearman_rho(x, y) -> float:
    rx = kernels.average_ranks(np.asarray(x, dtype=np.float64))
    ry = kernels.average_ranks(np.asarray(y, dtype=np.float64))
    if rx.size != ry.size or rx.size < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return float("nan")
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))


def entropy_histogram(u_in, u_shift, n_bins: int = 30, upper: Optional[float] = None):
    """Density histograms of two entropy samples on shared bins."""
    u_in = np.asarray(u_in, dtype=np.float64)
    u_shift = np.asarray(u_shift, dtype=np.float64)
    hi = upper if upper is not None else max(u_in.max(), u_shift.max(), 1e-12)
    edges = np.linspace(0.0, hi, n_bins + 1)
    d_in, _ = np.histogram(u_in, bins=edges, density=True)
    d_sh, _ = np.histogram(u_shift, bins=edges, density=True)
    return edges, d_in, d_sh


# ------------------------------------------------------------------ reports

@dataclass
class EvalReport:
    accuracy: float
    ece: float
    uce: float
    nll: float
    brier: float
    avu: float
    avu_auc: float
    u_th: float
    thresholds: List[float] = field(default_factory=list)
    avu_curve: List[float] = field(default_factory=list)
    p_acc_given_certain: List[Optional[float]] = field(default_factory=list)
    p_unc_given_inaccurate: List[Optional[float]] = field(default_factory=list)
    auroc: Optional[float] = None
    aupr_in: Optional[float] = None
    aupr_out: Optional[float] = None
    detection_accuracy: Optional[float] = None
    wasserstein: Optional[float] = None
    meta: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _nan_to_none(a) -> list:
    return [None if np.isnan(v) else float(v) for v in a]


def evaluate_predictions(probs, labels, u_th: Optional[float] = None, n_bins: int = DEFAULT_BINS,
                         t_grid=None, reference_uncertainty=None) -> EvalReport:
    """Full calibration report for one set of (averaged) predictive probabilities.

    If ``reference_uncertainty`` is given (in-distribution entropies), the
    detection metrics treat this set as the positive (shifted) class.
    """
    batch = PredictiveBatch.from_probs(probs, labels)
    k = batch.probs.shape[1]
    t_grid = np.linspace(0.0, 1.0, 21) if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    if u_th is None:
        correct = batch.correct
        u_th = ((batch.uncertainty[correct].mean() + batch.uncertainty[~correct].mean()) / 2.0
                if correct.any() and not correct.all() else float(np.median(batch.uncertainty)))
    curve = avu_curve(batch, t_grid)
    pac, pui = conditional_curves(batch, t_grid)
    report = EvalReport(
        accuracy=float(batch.correct.mean()),
        ece=ece(batch.confidence, batch.correct, n_bins),
        uce=uce(normalized_uncertainty(batch.uncertainty, k), ~batch.correct, n_bins),
        nll=nll(batch.probs, batch.labels),
        brier=brier(batch.probs, batch.labels),
        avu=avu(hard_counts(batch, u_th)),
        avu_auc=trapezoid_area(t_grid, curve),
        u_th=float(u_th),
        thresholds=[float(t) for t in t_grid],
        avu_curve=[float(v) for v in curve],
        p_acc_given_certain=_nan_to_none(pac),
        p_unc_given_inaccurate=_nan_to_none(pui),
    )
    if reference_uncertainty is not None:
        ref = np.asarray(reference_uncertainty, dtype=np.float64)
        report.auroc = auroc(batch.uncertainty, ref)
        report.aupr_in = aupr(batch.uncertainty, ref, positive="in")
        report.aupr_out = aupr(batch.uncertainty, ref, positive="out")
        report.detection_accuracy = detection_accuracy(batch.uncertainty, ref)
        report.wasserstein = wasserstein1(ref, batch.uncertainty)
    return report
