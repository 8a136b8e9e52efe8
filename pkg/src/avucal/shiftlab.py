"""Synthetic classification sets, graded feature-space shifts and far-away OOD sets.

Shift intensities run 1..5 and every kind is linear in the intensity index:

    gauss_noise   additive N(0, (0.1 i)^2) noise, one fixed draw scaled by i
    feature_blur  x <- (1 - 0.15 i) x + 0.15 i * mean(x)  (features mixed toward their row mean)
    rotation      rotate each feature pair (0,1), (2,3), ... by i * 15 degrees
    scale         x <- (1 + 0.15 i) x
    mean_shift    x <- x + 0.2 i * e, e a seeded unit vector
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

SHIFT_KINDS = ("gauss_noise", "feature_blur", "rotation", "scale", "mean_shift")
INTENSITIES = (1, 2, 3, 4, 5)
OOD_LABEL = -1
SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    descriptor: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (N, d) with one label per row")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def class_count(self) -> int:
        known = self.labels[self.labels >= 0]
        return int(self.descriptor.get("K", known.max() + 1 if known.size else 0))

    def subset(self, split: str) -> "Dataset":
        m = self.split == split
        return Dataset(self.features[m], self.labels[m], self.split[m], dict(self.descriptor))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(self.n_features)] + ["label", "split"])
        for x, y, s in zip(self.features, self.labels, self.split):
            w.writerow([repr(float(v)) for v in x] + [int(y), s])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def load(cls, path, descriptor: Optional[dict] = None) -> "Dataset":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[-2:] != ["label", "split"] or any(h != f"f{j}" for j, h in enumerate(header[:-2])):
            raise ValueError(f"{path}: unexpected header {header}")
        d = len(header) - 2
        feats = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
        return cls(feats, [int(r[d]) for r in body], [r[d + 1] for r in body], dict(descriptor or {}))


def _assign_splits(n: int, rng: np.random.Generator, fractions=(0.6, 0.2, 0.2)) -> np.ndarray:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tags = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val), dtype=object)
    return tags[rng.permutation(n)]


def make_two_moons(n: int, noise: float = 0.1, seed: int = 0, fractions=(0.6, 0.2, 0.2)) -> Dataset:
    """Two interleaving half circles of radius 1 centered at (0, 0) and (1, 0.5)."""
    rng = np.random.default_rng(seed)
    n_outer = n // 2
    n_inner = n - n_outer
    t_out = rng.uniform(0.0, np.pi, n_outer)
    t_in = rng.uniform(0.0, np.pi, n_inner)
    outer = np.c_[np.cos(t_out), np.sin(t_out)]
    inner = np.c_[1.0 - np.cos(t_in), 0.5 - np.sin(t_in)]
    x = np.r_[outer, inner]
    y = np.r_[np.zeros(n_outer, np.int64), np.ones(n_inner, np.int64)]
    if noise > 0:
        x = x + rng.normal(0.0, noise, x.shape)
    perm = rng.permutation(n)
    desc = {"generator": "two_moons", "n": n, "noise": noise, "seed": seed, "K": 2}
    return Dataset(x[perm], y[perm], _assign_splits(n, rng, fractions), desc)


def make_blobs(n: int, K: int = 3, d: int = 2, spread: float = 1.0, seed: int = 0,
               center_scale: float = 4.0, fractions=(0.6, 0.2, 0.2)) -> Dataset:
    """Isotropic Gaussian clusters around K random centers."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-center_scale, center_scale, (K, d))
    y = np.arange(n) % K
    rng.shuffle(y)
    x = centers[y] + rng.normal(0.0, spread, (n, d))
    desc = {"generator": "blobs", "n": n, "K": K, "d": d, "spread": spread, "seed": seed,
            "center_scale": center_scale}
    return Dataset(x, y, _assign_splits(n, rng, fractions), desc)


def make_dataset(spec: dict) -> Dataset:
    """Build a dataset from a descriptor such as ``{"generator": "two_moons", ...}``."""
    spec = dict(spec)
    gen = spec.pop("generator")
    if gen == "two_moons":
        spec.pop("K", None)
        return make_two_moons(**spec)
    if gen == "blobs":
        return make_blobs(**spec)
    raise ValueError(f"unknown generator {gen!r}")


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    intensity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}")
        if self.intensity not in INTENSITIES:
            raise ValueError("intensity must be in 1..5")


def _rotate_pairs(x: np.ndarray, theta: float) -> np.ndarray:
    out = x.copy()
    c, s = np.cos(theta), np.sin(theta)
    for j in range(0, x.shape[1] - 1, 2):
        a, b = x[:, j], x[:, j + 1]
        out[:, j] = c * a - s * b
        out[:, j + 1] = s * a + c * b
    return out


def shift_features(x: np.ndarray, spec: ShiftSpec) -> np.ndarray:
    i = spec.intensity
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gauss_noise":
        return x + 0.1 * i * rng.standard_normal(x.shape)
    if spec.kind == "feature_blur":
        a = 0.15 * i
        return (1.0 - a) * x + a * x.mean(axis=1, keepdims=True)
    if spec.kind == "rotation":
        return _rotate_pairs(x, np.deg2rad(15.0 * i))
    if spec.kind == "scale":
        return x * (1.0 + 0.15 * i)
    if spec.kind == "mean_shift":
        e = rng.standard_normal(x.shape[1])
        e /= np.linalg.norm(e)
        return x + 0.2 * i * e
    raise ValueError(f"unknown shift kind {spec.kind!r}")


def apply_shift(dataset: Dataset, spec: ShiftSpec) -> Dataset:
    """Label- and size-preserving feature transform at the given intensity."""
    desc = dict(dataset.descriptor)
    desc["shift"] = {"kind": spec.kind, "intensity": spec.intensity, "seed": spec.seed}
    return Dataset(shift_features(dataset.features, spec), dataset.labels.copy(), dataset.split.copy(), desc)


def make_ood(dataset: Dataset, seed: int = 0, n: Optional[int] = None, radius_factor: float = 5.0) -> Dataset:
    """Points on a sphere of radius ``radius_factor`` x (max training norm), labeled -1."""
    train = dataset.subset("train") if np.any(dataset.split == "train") else dataset
    r = float(np.linalg.norm(train.features, axis=1).max())
    n = len(dataset.subset("test")) if n is None else n
    n = n or len(dataset)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n, dataset.n_features))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    desc = dict(dataset.descriptor)
    desc["ood"] = {"seed": seed, "radius": radius_factor * r}
    return Dataset(radius_factor * r * dirs, np.full(n, OOD_LABEL), np.full(n, "test", dtype=object), desc)


def save_descriptor(dataset: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset.descriptor, indent=2, sort_keys=True), encoding="utf-8")
