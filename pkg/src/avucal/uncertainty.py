"""Monte Carlo predictive distributions, entropy / mutual information, and the threshold rule."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from avucal import kernels
from avucal.bayeslayers import BnnModel, sample_forward

ENTROPY_EPS = 1e-12


class ThresholdFallbackWarning(UserWarning):
    """One of the accurate / inaccurate groups was empty; the median was used."""


@dataclass
class McPrediction:
    per_sample_probs: np.ndarray  # (T, batch, K)
    mean_probs: np.ndarray
    entropy: np.ndarray
    mutual_info: np.ndarray
    confidence: np.ndarray
    pred_label: np.ndarray


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mc_seeds(seed: int, T: int) -> list:
    """Per-pass seeds for T stochastic forward passes derived from one seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(T, dtype=np.uint64)]


def mc_logits(model: BnnModel, x, T: int, seed: int) -> np.ndarray:
    if T < 1:
        raise ValueError("T must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    return np.stack([sample_forward(model, x, s).value for s in mc_seeds(seed, T)])


def summarize(per_sample_probs: np.ndarray) -> McPrediction:
    per_sample_probs = np.asarray(per_sample_probs, dtype=np.float64)
    mean = per_sample_probs.mean(axis=0)
    return McPrediction(
        per_sample_probs=per_sample_probs,
        mean_probs=mean,
        entropy=predictive_entropy(mean),
        mutual_info=mutual_information(per_sample_probs),
        confidence=mean.max(axis=1),
        pred_label=mean.argmax(axis=1),
    )


def mc_predict(model: BnnModel, x, T: int, seed: int, temperature: float = None) -> McPrediction:
    """T stochastic passes, softmaxed at the model's temperature (or the one given)."""
    temp = model.temperature if temperature is None else temperature
    logits = mc_logits(model, x, T, seed)
    return summarize(softmax_np(logits / temp))


def predictive_entropy(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0):
        raise ValueError("negative probability")
    # the log epsilon makes one-hot rows come out at -1e-12
    return np.maximum(kernels.entropy_rows(probs, ENTROPY_EPS), 0.0)


def mutual_information(per_sample_probs) -> np.ndarray:
    """Entropy of the mean minus mean per-sample entropy, clamped at zero."""
    ps = np.asarray(per_sample_probs, dtype=np.float64)
    if ps.ndim != 3 or ps.shape[0] < 1:
        raise ValueError("per_sample_probs must be (T, batch, K) with T >= 1")
    h_mean = predictive_entropy(ps.mean(axis=0))
    h_each = np.mean([predictive_entropy(p) for p in ps], axis=0)
    return np.maximum(h_mean - h_each, 0.0)


def learn_threshold(uncertainties, correctness) -> float:
    """Midpoint of the mean uncertainty of accurate and of inaccurate predictions."""
    u = np.asarray(uncertainties, dtype=np.float64)
    c = np.asarray(correctness, dtype=bool)
    if u.size == 0:
        raise ValueError("no uncertainties given")
    if c.all() or not c.any():
        warnings.warn("accurate or inaccurate group is empty; using median uncertainty",
                      ThresholdFallbackWarning, stacklevel=2)
        return float(np.median(u))
    return float((u[c].mean() + u[~c].mean()) / 2.0)


class RunningThreshold:
    """Accumulates group means over many batches (the warm-up phase)."""

    def __init__(self):
        self.sum_acc = 0.0
        self.n_acc = 0
        self.sum_inacc = 0.0
        self.n_inacc = 0
        self._all = []

    def update(self, uncertainties, correctness) -> None:
        u = np.asarray(uncertainties, dtype=np.float64)
        c = np.asarray(correctness, dtype=bool)
        self.sum_acc += float(u[c].sum())
        self.n_acc += int(c.sum())
        self.sum_inacc += float(u[~c].sum())
        self.n_inacc += int((~c).sum())
        self._all.append(u)

    def reset(self) -> None:
        self.__init__()

    @property
    def empty(self) -> bool:
        return self.n_acc + self.n_inacc == 0

    def value(self) -> float:
        if self.n_acc and self.n_inacc:
            return (self.sum_acc / self.n_acc + self.sum_inacc / self.n_inacc) / 2.0
        if self.empty:
            raise ValueError("no batches accumulated")
        warnings.warn("accurate or inaccurate group is empty; using median uncertainty",
                      ThresholdFallbackWarning, stacklevel=2)
        return float(np.median(np.concatenate(self._all)))
