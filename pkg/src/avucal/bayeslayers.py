"""Mean-field Gaussian variational layers and the MLP built from them.

Each weight (biases included) has a Gaussian posterior N(mu, sigma^2) with
``sigma = softplus(rho)``.  Forward passes use the reparameterization
``w = mu + softplus(rho) * eps`` so gradients reach both mu and rho.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from avucal import diffcore as dc

FORMAT_VERSION = 1
DEFAULT_RHO = -5.0
MLE_ABS_FLOOR = 1e-6


def inverse_softplus(x):
    """rho such that softplus(rho) == x (x > 0)."""
    x = np.asarray(x, dtype=np.float64)
    # log(expm1(x)) loses precision for large x; x + log(-expm1(-x)) does not
    return np.where(x > 20.0, x + np.log(-np.expm1(-np.minimum(x, 700.0))),
                    np.log(np.expm1(np.minimum(x, 20.0))))


class VariationalLinear:
    """Affine layer with a factorized Gaussian posterior over weights and bias.

    ``mu`` and ``rho`` are stored as two parameter nodes each: the (out, in)
    weight matrix and the (out,) bias vector.
    """

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None,
                 rho_init: float = DEFAULT_RHO, prior_std: Union[float, np.ndarray] = 1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.mu_w = dc.parameter(rng.normal(0.0, np.sqrt(1.0 / in_features), (out_features, in_features)))
        self.mu_b = dc.parameter(np.zeros(out_features))
        self.rho_w = dc.parameter(np.full((out_features, in_features), rho_init))
        self.rho_b = dc.parameter(np.full(out_features, rho_init))
        self.prior_mean_w = np.zeros((out_features, in_features))
        self.prior_mean_b = np.zeros(out_features)
        self.prior_std = prior_std

    def parameters(self) -> List[dc.Node]:
        return [self.mu_w, self.mu_b, self.rho_w, self.rho_b]

    def sigma(self) -> Tuple[np.ndarray, np.ndarray]:
        return dc._softplus(self.rho_w.value), dc._softplus(self.rho_b.value)

    def _prior_std_parts(self):
        s = np.asarray(self.prior_std, dtype=np.float64)
        if s.ndim == 0:
            return (np.full(self.mu_w.shape, float(s)), np.full(self.mu_b.shape, float(s)))
        flat = s.reshape(-1)
        nw = self.out_features * self.in_features
        return flat[:nw].reshape(self.mu_w.shape), flat[nw:]

    def forward(self, x: dc.Node, rng: Optional[np.random.Generator]) -> dc.Node:
        """One stochastic pass; ``rng=None`` uses the posterior means."""
        if x.value.ndim != 2 or x.shape[1] != self.in_features:
            raise dc.ShapeError(f"layer expects (batch, {self.in_features}) input, got {x.shape}")
        if rng is None:
            w, b = self.mu_w, self.mu_b
        else:
            eps_w = rng.standard_normal(self.mu_w.shape)
            eps_b = rng.standard_normal(self.mu_b.shape)
            w = self.mu_w + dc.softplus(self.rho_w) * dc.constant(eps_w)
            b = self.mu_b + dc.softplus(self.rho_b) * dc.constant(eps_b)
        return dc.add(dc.matmul(x, dc.transpose(w)), b)

    def kl(self) -> dc.Node:
        """Closed-form KL(q || prior) summed over weights and bias."""
        sw, sb = self._prior_std_parts()
        terms = []
        for mu, rho, m, s in ((self.mu_w, self.rho_w, self.prior_mean_w, sw),
                              (self.mu_b, self.rho_b, self.prior_mean_b, sb)):
            sigma = dc.softplus(rho)
            diff = mu - dc.constant(m)
            inv2s2 = dc.constant(1.0 / (2.0 * s * s))
            kl = (dc.constant(np.log(s)) - dc.log(sigma)
                  + (dc.square(sigma) + dc.square(diff)) * inv2s2)
            terms.append(dc.add_scalar(dc.sum(kl), -0.5 * mu.value.size))
        return terms[0] + terms[1]

    # serialization helpers: weights row-major followed by bias
    def _flat(self, w, b) -> list:
        return np.concatenate([np.asarray(w).reshape(-1), np.asarray(b).reshape(-1)]).tolist()

    def to_dict(self) -> dict:
        s = np.asarray(self.prior_std, dtype=np.float64)
        return {
            "mu": self._flat(self.mu_w.value, self.mu_b.value),
            "rho": self._flat(self.rho_w.value, self.rho_b.value),
            "prior_mean": self._flat(self.prior_mean_w, self.prior_mean_b),
            "prior_std": float(s) if s.ndim == 0 else s.reshape(-1).tolist(),
            "in": self.in_features,
            "out": self.out_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariationalLinear":
        n_in, n_out = int(d["in"]), int(d["out"])
        layer = cls(n_in, n_out)
        nw = n_in * n_out

        def split(flat):
            a = np.asarray(flat, dtype=np.float64)
            if a.shape != (nw + n_out,):
                raise ValueError(f"layer {n_in}->{n_out}: expected {nw + n_out} values, got {a.shape[0]}")
            return a[:nw].reshape(n_out, n_in).copy(), a[nw:].copy()

        layer.mu_w.value, layer.mu_b.value = split(d["mu"])
        layer.rho_w.value, layer.rho_b.value = split(d["rho"])
        layer.prior_mean_w, layer.prior_mean_b = split(d["prior_mean"])
        ps = d["prior_std"]
        layer.prior_std = float(ps) if np.ndim(ps) == 0 else np.asarray(ps, dtype=np.float64)
        if np.any(np.asarray(layer.prior_std) <= 0):
            raise ValueError("prior_std must be positive")
        return layer


@dataclass
class BnnModel:
    """ReLU MLP of variational layers; the last layer emits ``class_count`` logits.

    ``deterministic`` models (the vanilla path) always forward with the means.
    """

    layers: List[VariationalLinear]
    class_count: int
    u_th: Optional[float] = None
    temperature: float = 1.0
    deterministic: bool = False
    method: Optional[str] = None

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_features != b.in_features:
                raise ValueError(f"layer widths do not chain: {a.out_features} -> {b.in_features}")
        if self.layers and self.layers[-1].out_features != self.class_count:
            raise ValueError("final layer width must equal class_count")

    @classmethod
    def create(cls, sizes: Sequence[int], seed: int = 0, rho_init: float = DEFAULT_RHO,
               deterministic: bool = False) -> "BnnModel":
        rng = np.random.default_rng(seed)
        layers = [VariationalLinear(a, b, rng, rho_init=rho_init) for a, b in zip(sizes[:-1], sizes[1:])]
        return cls(layers, class_count=sizes[-1], deterministic=deterministic)

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    def parameters(self) -> List[dc.Node]:
        return [p for layer in self.layers for p in layer.parameters()]

    def trainable_parameters(self) -> List[dc.Node]:
        if self.deterministic:
            return [p for layer in self.layers for p in (layer.mu_w, layer.mu_b)]
        return self.parameters()

    def mean_weights(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(layer.mu_w.value.copy(), layer.mu_b.value.copy()) for layer in self.layers]

    def copy(self) -> "BnnModel":
        return model_from_dict(model_to_dict(self))

    def to_json(self) -> str:
        return json.dumps(model_to_dict(self))


def sample_forward(model: BnnModel, x, rng_seed: Optional[int]) -> dc.Node:
    """Logits from one weight sample per layer (shared across the batch).

    With ``rng_seed=None`` or a deterministic model the posterior means are
    used instead of a sample.
    """
    h = x if isinstance(x, dc.Node) else dc.constant(x)
    if h.value.ndim != 2 or h.shape[1] != model.in_features:
        raise dc.ShapeError(f"model expects (batch, {model.in_features}) input, got {h.shape}")
    rng = None if (rng_seed is None or model.deterministic) else np.random.default_rng(rng_seed)
    for i, layer in enumerate(model.layers):
        h = layer.forward(h, rng)
        if i < len(model.layers) - 1:
            h = dc.relu(h)
    return h


def kl_to_prior(model: BnnModel) -> dc.Node:
    total = model.layers[0].kl()
    for layer in model.layers[1:]:
        total = total + layer.kl()
    return total


def empirical_bayes_init(model: BnnModel, mle_weights: Sequence[Tuple[np.ndarray, np.ndarray]],
                         delta: float = 0.5) -> None:
    """Center posterior and prior on point-estimate weights.

    mu <- w, softplus(rho) <- delta * |w| (|w| floored at 1e-6), prior N(w, 1).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if len(mle_weights) != len(model.layers):
        raise dc.ShapeError("number of weight sets does not match number of layers")
    for layer, (w, b) in zip(model.layers, mle_weights):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.shape != layer.mu_w.shape or b.shape != layer.mu_b.shape:
            raise dc.ShapeError(f"MLE shapes {w.shape}/{b.shape} do not match layer "
                                f"{layer.mu_w.shape}/{layer.mu_b.shape}")
        layer.mu_w.value = w.copy()
        layer.mu_b.value = b.copy()
        layer.rho_w.value = inverse_softplus(delta * np.maximum(np.abs(w), MLE_ABS_FLOOR))
        layer.rho_b.value = inverse_softplus(delta * np.maximum(np.abs(b), MLE_ABS_FLOOR))
        layer.prior_mean_w = w.copy()
        layer.prior_mean_b = b.copy()
        layer.prior_std = 1.0


# ------------------------------------------------------------------ checkpoint

def model_to_dict(model: BnnModel) -> dict:
    d = {
        "format_version": FORMAT_VERSION,
        "layers": [layer.to_dict() for layer in model.layers],
        "class_count": model.class_count,
        "u_th": None if model.u_th is None else float(model.u_th),
        "temperature": float(model.temperature),
    }
    # optional keys; readers that only know the base format ignore them
    if model.deterministic:
        d["deterministic"] = True
    if model.method is not None:
        d["method"] = model.method
    return d


def model_from_dict(d: dict) -> BnnModel:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {d.get('format_version')!r}")
    layers = [VariationalLinear.from_dict(ld) for ld in d["layers"]]
    temperature = float(d.get("temperature", 1.0))
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return BnnModel(layers, class_count=int(d["class_count"]),
                    u_th=None if d.get("u_th") is None else float(d["u_th"]),
                    temperature=temperature,
                    deterministic=bool(d.get("deterministic", False)),
                    method=d.get("method"))


def save_checkpoint(model: BnnModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)


def load_checkpoint(path) -> BnnModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
