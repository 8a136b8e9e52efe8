"""Multi-seed comparison harness on shifted synthetic data.

Trains each method per seed, optionally fits a post-hoc temperature on the
validation split, then evaluates on the test split and on shifted copies of
it.  Method names are trainer methods, optionally suffixed with ``-ts``
(NLL temperature scaling) or ``-avuts`` (AvUC temperature scaling).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from avucal import metrics
from avucal.bayeslayers import BnnModel
from avucal.posthoc import fit_temperature
from avucal.shiftlab import ShiftSpec, apply_shift, make_two_moons
from avucal.trainer import TrainConfig, sub_seed, train
from avucal.uncertainty import ThresholdFallbackWarning, mc_logits, mc_predict

POSTHOC_SUFFIXES = {"-avuts": "avuc", "-ts": "nll"}


def split_method(name: str):
    """'vanilla-avuts' -> ('vanilla', 'avuc'); 'svi' -> ('svi', None)."""
    for suffix, objective in POSTHOC_SUFFIXES.items():
        if name.endswith(suffix):
            return name[: -len(suffix)], objective
    return name, None


@dataclass
class RunMetrics:
    """Metrics of one (method, seed) run; index 0 of each list is the unshifted test set."""

    method: str
    seed: int
    intensities: List[int]
    accuracy: List[float] = field(default_factory=list)
    ece: List[float] = field(default_factory=list)
    uce: List[float] = field(default_factory=list)
    avu_auc: List[float] = field(default_factory=list)
    auroc: List[Optional[float]] = field(default_factory=list)
    wasserstein: List[Optional[float]] = field(default_factory=list)
    temperature: float = 1.0

    def at(self, name: str, intensity: int):
        return getattr(self, name)[self.intensities.index(intensity)]


def run_method(method: str, seed: int, *, n: int = 1000, noise: float = 0.1, shift_kind: str = "gauss_noise",
               intensities: Sequence[int] = (1, 2, 3, 4, 5), mc: int = 32, hidden=(32, 32),
               train_overrides: Optional[dict] = None) -> RunMetrics:
    base, objective = split_method(method)
    ds = make_two_moons(n, noise=noise, seed=seed)
    test, val = ds.subset("test"), ds.subset("val")
    config = TrainConfig(**{"hidden": list(hidden), **(train_overrides or {}), "method": base, "seed": seed})
    model = BnnModel.create([ds.n_features, *config.hidden, ds.class_count], seed=seed)
    result = train(model, ds, config)
    T = 1 if model.deterministic else mc
    if objective is not None:
        logits = mc_logits(model, val.features, T, sub_seed(seed, 1))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ThresholdFallbackWarning)
            model.temperature = fit_temperature(logits, val.labels, objective).temperature

    eval_seed = sub_seed(seed, 2)
    ref = mc_predict(model, test.features, T, eval_seed)
    out = RunMetrics(method, seed, [0, *intensities], temperature=model.temperature)
    for i in out.intensities:
        if i == 0:
            pred, labels = ref, test.labels
        else:
            shifted = apply_shift(test, ShiftSpec(shift_kind, i, sub_seed(seed, 3)))
            pred, labels = mc_predict(model, shifted.features, T, eval_seed), shifted.labels
        rep = metrics.evaluate_predictions(pred.mean_probs, labels, u_th=result.u_th,
                                           reference_uncertainty=None if i == 0 else ref.entropy)
        out.accuracy.append(rep.accuracy)
        out.ece.append(rep.ece)
        out.uce.append(rep.uce)
        out.avu_auc.append(rep.avu_auc)
        out.auroc.append(rep.auroc)
        out.wasserstein.append(rep.wasserstein)
    return out


def compare(methods: Sequence[str], seeds: Sequence[int], **kw) -> Dict[str, List[RunMetrics]]:
    return {m: [run_method(m, s, **kw) for s in seeds] for m in methods}


def mean_over(runs: Sequence[RunMetrics], name: str, intensities: Sequence[int]) -> np.ndarray:
    """Per-seed mean of a metric over the given intensities."""
    return np.array([np.mean([r.at(name, i) for i in intensities]) for r in runs])


def beta_ablation(betas: Sequence[float], seeds: Sequence[int], method: str = "svi-avuc",
                  intensities: Sequence[int] = (3, 4, 5), train_overrides: Optional[dict] = None,
                  **kw) -> Dict[float, Dict[str, float]]:
    """Mean accuracy / ECE / UCE / AvU-AUC over seeds and intensities for each beta."""
    table = {}
    for beta in betas:
        overrides = {**(train_overrides or {}), "beta": float(beta)}
        runs = [run_method(method, s, intensities=tuple(intensities), train_overrides=overrides, **kw)
                for s in seeds]
        table[float(beta)] = {name: float(mean_over(runs, name, intensities).mean())
                              for name in ("accuracy", "ece", "uce", "avu_auc")}
    return table
