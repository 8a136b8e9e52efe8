"""Training loops: SVI / SVI-AvUC / SVI-AU-AvUC and their deterministic (vanilla) counterparts.

The first ``warmup_epochs`` epochs optimize only the data term (negative ELBO
or cross-entropy) while the uncertainty threshold is accumulated from the
batch predictions; afterwards the threshold is frozen and ``beta`` times the
calibration loss is added.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from avucal import avuc as av
from avucal import diffcore as dc
from avucal import metrics
from avucal.bayeslayers import BnnModel, empirical_bayes_init, kl_to_prior, sample_forward
from avucal.shiftlab import Dataset
from avucal.uncertainty import RunningThreshold

log = logging.getLogger(__name__)

METHODS = ("svi", "svi-avuc", "svi-au-avuc", "vanilla", "vanilla-avuc")
AVUC_METHODS = ("svi-avuc", "svi-au-avuc", "vanilla-avuc")
HISTORY_COLUMNS = ("epoch", "elbo", "avuc", "total", "acc", "avu")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, cause: Exception):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {cause}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    method: str = "svi-avuc"
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.01
    lr_schedule: List[Tuple[int, float]] = field(default_factory=list)
    optimizer: str = "adam"
    momentum: float = 0.9
    beta: float = 3.0
    mc_train_samples: int = 1
    mc_eval_samples: int = 32
    warmup_epochs: int = 3
    seed: int = 0
    kl_scale: Union[str, float] = "examples"
    refresh_threshold: bool = False
    t_grid_points: int = 21
    hidden: List[int] = field(default_factory=lambda: [32, 32])
    init: str = "default"
    eb_delta: float = 0.5
    pretrain_epochs: int = 20

    def __post_init__(self):
        self.lr_schedule = [tuple(p) for p in self.lr_schedule]
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 1 <= self.mc_train_samples <= 8:
            raise ValueError("mc_train_samples must be in 1..8")
        if self.mc_eval_samples < 1:
            raise ValueError("mc_eval_samples must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.method in AVUC_METHODS and self.epochs < self.warmup_epochs:
            raise ValueError("epochs must be >= warmup_epochs for AvUC methods")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("batch_size, epochs and warmup_epochs must be non-negative (batch_size >= 1)")
        if self.init not in ("default", "empirical_bayes"):
            raise ValueError("init must be 'default' or 'empirical_bayes'")
        if not (self.kl_scale in ("batches", "examples") or isinstance(self.kl_scale, (int, float))):
            raise ValueError("kl_scale must be 'batches', 'examples' or a number")

    @property
    def deterministic(self) -> bool:
        return self.method.startswith("vanilla")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(p) for p in self.lr_schedule]
        return d


@dataclass
class TrainResult:
    model: BnnModel
    history: List[Dict[str, float]]
    u_th: Optional[float]
    warmup_snapshot: Optional[BnnModel] = None


# ------------------------------------------------------------------ optimizers

def sgd_step(params: Sequence[dc.Node], grads: Sequence[np.ndarray], state: dict, lr: float,
             momentum: float = 0.0) -> None:
    if lr <= 0:
        raise ValueError("lr must be positive")
    vel = state.setdefault("velocity", [np.zeros_like(p.value) for p in params])
    for i, (p, g) in enumerate(zip(params, grads)):
        if momentum:
            vel[i] = momentum * vel[i] + g
            g = vel[i]
        p.value = p.value - lr * g


def adam_step(params: Sequence[dc.Node], grads: Sequence[np.ndarray], state: dict, lr: float,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> None:
    if lr <= 0:
        raise ValueError("lr must be positive")
    m = state.setdefault("m", [np.zeros_like(p.value) for p in params])
    v = state.setdefault("v", [np.zeros_like(p.value) for p in params])
    state["t"] = t = state.get("t", 0) + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m[i] = b1 * m[i] + (1.0 - b1) * g
        v[i] = b2 * v[i] + (1.0 - b2) * g * g
        p.value = p.value - lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def lr_at(config: TrainConfig, epoch: int) -> float:
    mult = 1.0
    for start, factor in sorted(config.lr_schedule):
        if epoch >= start:
            mult = factor
    return config.lr * mult


def resolve_kl_scale(config: TrainConfig, n_train: int) -> float:
    n_batches = -(-n_train // config.batch_size)
    if config.kl_scale == "batches":
        return 1.0 / n_batches
    if config.kl_scale == "examples":
        return 1.0 / n_train
    return float(config.kl_scale)


def sub_seed(seed: int, stream: int) -> int:
    """Independent 63-bit seed for a named stream (fixed splitting of the master seed)."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, dtype=np.uint64)[0] >> 1)


# ------------------------------------------------------------------ training

def _pretrain_mle(model: BnnModel, x: np.ndarray, y: np.ndarray, config: TrainConfig) -> None:
    det = model.copy()
    det.deterministic = True
    cfg = TrainConfig(**{**config.to_dict(), "method": "vanilla", "epochs": config.pretrain_epochs,
                         "init": "default", "lr_schedule": []})
    res = _fit(det, x, y, cfg)
    empirical_bayes_init(model, res.model.mean_weights(), config.eb_delta)


def train(model: BnnModel, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Run the configured method on the ``train`` split of ``dataset``.

    ``model`` is updated in place and also returned inside the result.
    """
    train_set = dataset.subset("train") if np.any(dataset.split == "train") else dataset
    if len(train_set) == 0:
        raise ValueError("empty training split")
    model.deterministic = config.deterministic
    model.method = config.method
    if config.init == "empirical_bayes" and not config.deterministic:
        _pretrain_mle(model, train_set.features, train_set.labels, config)
    return _fit(model, train_set.features, train_set.labels, config)


def _fit(model: BnnModel, x: np.ndarray, y: np.ndarray, config: TrainConfig) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    n = x.shape[0]
    kl_scale = resolve_kl_scale(config, n)
    params = model.trainable_parameters()
    opt_state: dict = {}
    uses_avuc = config.method in AVUC_METHODS
    t_grid = np.linspace(0.0, 1.0, config.t_grid_points)
    running = RunningThreshold()
    u_th = model.u_th if config.warmup_epochs == 0 else None
    history: List[Dict[str, float]] = []
    snapshot = None
    if config.warmup_epochs == 0 and u_th is None and uses_avuc and config.method != "svi-au-avuc":
        raise ValueError("warmup_epochs=0 needs a model with a stored u_th")

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        in_warmup = epoch < config.warmup_epochs
        perm = rng.permutation(n)
        sums = {"elbo": 0.0, "avuc": 0.0, "total": 0.0}
        ep_probs, ep_labels = [], []
        n_batches = 0
        if not in_warmup and config.refresh_threshold:
            running.reset()
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            xb, yb = x[idx], y[idx]
            seeds = rng.integers(0, 2 ** 63, size=config.mc_train_samples)
            try:
                if config.deterministic:
                    samples = [sample_forward(model, xb, None)]
                    data_loss = av.cross_entropy_loss(samples[0], yb)
                else:
                    samples = [sample_forward(model, xb, int(s)) for s in seeds]
                    data_loss = av.elbo_loss(samples, yb, kl_to_prior(model), kl_scale)
                probs = av.mean_probs(samples)
                active = uses_avuc and not in_warmup
                if active and config.method == "svi-au-avuc":
                    cal = av.au_avuc_loss(probs, yb, t_grid)
                elif active:
                    cal = av.avuc_loss(av.soft_counts(probs, yb, u_th))
                else:
                    cal = None
                loss = av.total_loss(data_loss, cal, config.beta) if cal is not None else data_loss
                if not np.isfinite(loss.item()):
                    raise dc.NumericalError("loss is not finite")
                dc.backward(loss)
            except (dc.NumericalError, FloatingPointError) as exc:
                raise TrainingDiverged(epoch, b, exc) from exc
            grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
            if config.optimizer == "adam":
                adam_step(params, grads, opt_state, lr)
            else:
                sgd_step(params, grads, opt_state, lr, config.momentum)
            dc.zero_grad(params)

            pv = probs.value
            batch = av.PredictiveBatch.from_probs(pv, yb)
            if in_warmup or config.refresh_threshold:
                running.update(batch.uncertainty, batch.correct)
            if cal is not None:
                cal_value = cal.item()
            else:
                th = u_th if u_th is not None else running.value()
                cal_value = av.avuc_loss(av.soft_counts(dc.constant(pv), yb, th)).item()
            sums["elbo"] += data_loss.item()
            sums["avuc"] += cal_value
            sums["total"] += loss.item()
            ep_probs.append(pv)
            ep_labels.append(yb)
            n_batches += 1

        if in_warmup and epoch == config.warmup_epochs - 1:
            u_th = running.value()
            snapshot = model.copy()
            snapshot.u_th = u_th
        elif not in_warmup and config.refresh_threshold:
            u_th = running.value()
        th = u_th if u_th is not None else running.value()
        ep_batch = av.PredictiveBatch.from_probs(np.concatenate(ep_probs), np.concatenate(ep_labels))
        row = {
            "epoch": epoch,
            "elbo": sums["elbo"] / n_batches,
            "avuc": sums["avuc"] / n_batches,
            "total": sums["total"] / n_batches,
            "acc": float(ep_batch.correct.mean()),
            "avu": av.avu(av.hard_counts(ep_batch, th)),
            "avu_auc": metrics.avu_auc(ep_batch, t_grid),
            "u_th": th,
        }
        history.append(row)
        log.debug("epoch %d %s", epoch, row)

    if u_th is None and not running.empty:
        u_th = running.value()
    model.u_th = u_th
    return TrainResult(model=model, history=history, u_th=u_th, warmup_snapshot=snapshot)


def write_history_csv(history: Sequence[Dict[str, float]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
