"""Post-hoc temperature scaling with an NLL, AvUC or area-under-AvU objective.

The temperature is optimized in log space so it stays positive.  For
stochastic models the same fixed set of Monte Carlo logits is reused at
every iteration, and each sample is divided by the temperature before the
softmax average.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from avucal import avuc as av
from avucal import diffcore as dc
from avucal.trainer import adam_step
from avucal.uncertainty import learn_threshold, softmax_np

OBJECTIVES = ("nll", "avuc", "au-avuc")
NLL_EPS = 1e-12
# search range for T; the AvUC surfaces keep decreasing towards T -> 0 (and
# sometimes T -> inf), so an unbounded fit can run off to degenerate values
T_MIN, T_MAX = 0.05, 20.0
_LOG_T_MIN, _LOG_T_MAX = float(np.log(T_MIN)), float(np.log(T_MAX))


@dataclass
class TemperatureFit:
    temperature: float
    objective: str
    u_th: Optional[float]
    final_objective: float
    initial_objective: float
    iterations: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def apply_temperature(logits, temperature: float) -> np.ndarray:
    """softmax(logits / T); (T_mc, N, K) logits are averaged after scaling."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    probs = softmax_np(logits / temperature)
    return probs.mean(axis=0) if logits.ndim == 3 else probs


def _as_mc(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 2:
        return logits[None]
    if logits.ndim != 3:
        raise ValueError("logits must be (N, K) or (T, N, K)")
    return logits


def objective_node(log_t: dc.Node, logits: np.ndarray, labels: np.ndarray, objective: str,
                   u_th: Optional[float], t_grid=None) -> dc.Node:
    inv_t = dc.exp(dc.neg(log_t))
    scaled = [dc.mul_scalar(dc.constant(l), inv_t) for l in logits]
    if objective == "nll":
        if len(scaled) == 1:
            return av.cross_entropy_loss(scaled[0], labels)
        probs = av.mean_probs(scaled)
        return dc.neg(dc.mean(dc.log(dc.pick(probs, labels), eps=NLL_EPS)))
    probs = av.mean_probs(scaled)
    if objective == "avuc":
        return av.avuc_loss(av.soft_counts(probs, labels, u_th))
    if objective == "au-avuc":
        return av.au_avuc_loss(probs, labels, t_grid)
    raise ValueError(f"unknown objective {objective!r}")


def objective_value(temperature: float, logits, labels, objective: str, u_th: Optional[float] = None,
                    t_grid=None) -> float:
    mc = _as_mc(logits)
    node = objective_node(dc.constant(np.log(temperature)), mc, np.asarray(labels, dtype=np.int64),
                          objective, u_th, t_grid)
    return node.item()


def _value_and_grad(s: float, mc, labels, objective, u_th, t_grid):
    log_t = dc.parameter(np.array(s))
    obj = objective_node(log_t, mc, labels, objective, u_th, t_grid)
    dc.backward(obj)
    return obj.item(), float(log_t.grad)


def _secant_polish(s: float, mc, labels, objective, u_th, t_grid, max_iter: int = 60) -> float:
    """Refine a stationary point of the objective in log T by secant steps on its gradient.

    Steps that raise the objective are rejected, so this never undoes the
    first-order phase.
    """
    f0, g0 = _value_and_grad(s, mc, labels, objective, u_th, t_grid)
    step = -np.sign(g0) * 1e-3
    for _ in range(max_iter):
        if g0 == 0.0 or abs(step) < 1e-12:
            break
        s1 = float(np.clip(s + step, _LOG_T_MIN, _LOG_T_MAX))
        if s1 == s:
            break
        f1, g1 = _value_and_grad(s1, mc, labels, objective, u_th, t_grid)
        if f1 > f0 + 1e-15:
            step *= 0.5
            continue
        dg = g1 - g0
        nxt = -g1 * (s1 - s) / dg if dg != 0.0 else step
        # keep steps bounded where the curvature estimate is unreliable
        step = float(np.clip(nxt, -0.5, 0.5))
        s, f0, g0 = s1, f1, g1
    return s


def fit_temperature(logits, labels, objective: str = "nll", u_th: Optional[float] = None,
                    lr: float = 0.005, max_iter: int = 500, tol: float = 1e-7, t_grid=None,
                    init_temperature: float = 1.0) -> TemperatureFit:
    """Fit a single temperature on held-out logits by Adam on log T.

    T is kept inside [T_MIN, T_MAX].  The smooth NLL objective gets a final
    secant refinement; the AvUC objectives are piecewise (group membership
    switches with T), so for them the Adam iterate is returned as is.  For
    ``objective="avuc"`` without ``u_th``, the threshold is learned from the
    uncalibrated (T=1) predictions.  If the fitted temperature scores worse
    than T=1 on the objective, T=1 is returned.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    if not T_MIN <= init_temperature <= T_MAX:
        raise ValueError(f"init_temperature must lie in [{T_MIN}, {T_MAX}]")
    mc = _as_mc(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if objective == "avuc" and u_th is None:
        batch = av.PredictiveBatch.from_probs(apply_temperature(mc, 1.0), labels)
        u_th = learn_threshold(batch.uncertainty, batch.correct)

    log_t = dc.parameter(np.array(np.log(init_temperature)))
    state: dict = {}
    prev = None
    it = 0
    for it in range(1, max_iter + 1):
        obj = objective_node(log_t, mc, labels, objective, u_th, t_grid)
        value = obj.item()
        if not np.isfinite(value):
            raise dc.NumericalError("temperature objective is not finite")
        if prev is not None and abs(prev - value) < tol:
            break
        prev = value
        dc.backward(obj)
        adam_step([log_t], [log_t.grad], state, lr)
        log_t.value = np.clip(log_t.value, _LOG_T_MIN, _LOG_T_MAX)
        log_t.grad = None
    s_final = float(log_t.value)
    if objective == "nll":
        s_final = _secant_polish(s_final, mc, labels, objective, u_th, t_grid)

    temperature = float(np.exp(s_final))
    final = objective_value(temperature, mc, labels, objective, u_th, t_grid)
    initial = objective_value(1.0, mc, labels, objective, u_th, t_grid)
    if final > initial:
        temperature, final = 1.0, initial
    return TemperatureFit(temperature=temperature, objective=objective,
                          u_th=None if u_th is None else float(u_th),
                          final_objective=float(final), initial_objective=float(initial), iterations=it)


# ------------------------------------------------------------------ logit dumps

def write_logit_dump(path, logits, labels) -> None:
    """CSV with columns sample_index, mc_index, label, logit_0 .. logit_{K-1}."""
    mc = _as_mc(logits)
    t, n, k = mc.shape
    labels = np.asarray(labels, dtype=np.int64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "mc_index", "label"] + [f"logit_{j}" for j in range(k)])
        for i in range(n):
            for m in range(t):
                w.writerow([i, m, int(labels[i])] + [repr(float(v)) for v in mc[m, i]])


def read_logit_dump(path):
    """Returns ((T, N, K) logits, labels)."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:3] != ["sample_index", "mc_index", "label"]:
        raise ValueError(f"{path}: unexpected header {header[:3]}")
    k = len(header) - 3
    si = np.array([int(r[0]) for r in body])
    mi = np.array([int(r[1]) for r in body])
    n, t = si.max() + 1, mi.max() + 1
    logits = np.full((t, n, k), np.nan)
    labels = np.full(n, -1, dtype=np.int64)
    for r, i, m in zip(body, si, mi):
        logits[m, i] = [float(v) for v in r[3:]]
        labels[i] = int(r[2])
    if np.isnan(logits).any():
        raise ValueError(f"{path}: incomplete logit dump")
    return logits, labels
