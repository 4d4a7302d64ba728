"""Frozen-encoder evaluation: linear probe, DisSim k-NN probe and collapse diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .errors import ContractError
from .loss import dissim_matrix_values, normalize_rows
from .model import EncoderSpec, ParamSet, encode


@dataclass
class VarianceStats:
    summary: float
    min_dim: float
    max_dim: float


@dataclass
class EvalReport:
    mode: str
    top1: float
    top5: float
    n_eval: int
    per_class: list
    variance: VarianceStats

    def lines(self) -> list:
        v = self.variance
        out = [
            f"mode: {self.mode}",
            f"n_eval: {self.n_eval}",
            f"top1: {self.top1:.6f}",
            f"top5: {self.top5:.6f}",
            f"rep_variance_mean: {v.summary:.6g}",
            f"rep_variance_min: {v.min_dim:.6g}",
            f"rep_variance_max: {v.max_dim:.6g}",
        ]
        out += [f"class_{c}_accuracy: {a:.6f}" for c, a in enumerate(self.per_class)]
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    lr: float
    epochs: int

    def logits(self, reps: np.ndarray) -> np.ndarray:
        return ((reps - self.mean) / self.scale) @ self.weight + self.bias


@dataclass
class ProbeHyper:
    lr: float = 0.5
    epochs: int = 300
    test_fraction: float = 0.2
    seed: int = 0
    split: Optional[tuple] = field(default=None, repr=False)


def extract_representations(params: ParamSet, spec: EncoderSpec, dataset: Dataset, chunk: int = 512):
    """Encode every sample without augmentation or tape; returns ``(reps, labels)``."""
    rows = []
    with ad.no_grad():
        for start in range(0, len(dataset), chunk):
            rows.append(encode(params, spec, dataset.samples[start : start + chunk]).values.copy())
    return np.concatenate(rows, axis=0), dataset.labels


def collapse_diagnostics(reps) -> VarianceStats:
    reps = np.atleast_2d(np.asarray(reps, dtype=np.float64))
    if len(reps) < 2:
        raise ContractError("collapse diagnostics need at least 2 rows")
    var = normalize_rows(reps).var(axis=0)
    return VarianceStats(float(var.mean()), float(var.min()), float(var.max()))


def _check_labels(labels, n):
    if labels is None:
        raise ContractError("evaluation needs labels")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ContractError(f"{len(labels)} labels for {n} representations")
    if len(np.unique(labels)) < 2:
        raise ContractError("evaluation needs at least 2 classes")
    return labels


def _scores(ranked_correct: np.ndarray, labels: np.ndarray, n_classes: int, top1_hit: np.ndarray):
    per_class = []
    for c in range(n_classes):
        sel = labels == c
        per_class.append(float(top1_hit[sel].mean()) if sel.any() else float("nan"))
    return float(top1_hit.mean()), float(ranked_correct.mean()), per_class


def split_indices(n: int, test_fraction: float, seed: int):
    perm = np.random.Generator(np.random.Philox(int(seed))).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def linear_probe(reps, labels, hyper: Optional[ProbeHyper] = None):
    """Train a softmax linear classifier on frozen features; report held-out accuracy."""
    hyper = hyper or ProbeHyper()
    reps = np.asarray(reps, dtype=np.float64)
    labels = _check_labels(labels, len(reps))
    k = int(labels.max()) + 1
    train_idx, test_idx = hyper.split if hyper.split is not None else split_indices(len(reps), hyper.test_fraction, hyper.seed)
    if len(np.unique(labels[train_idx])) < 2:
        raise ContractError("training split holds a single class")
    xtr = reps[train_idx]
    mean = xtr.mean(axis=0)
    scale = xtr.std(axis=0)
    scale[scale == 0] = 1.0
    xtr = (xtr - mean) / scale
    onehot = np.eye(k)[labels[train_idx]]
    w = np.zeros((reps.shape[1], k))
    b = np.zeros(k)
    n = len(xtr)
    for _ in range(hyper.epochs):
        z = xtr @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= hyper.lr * (xtr.T @ g)
        b -= hyper.lr * g.sum(axis=0)
    probe = LinearProbe(w, b, mean, scale, hyper.lr, hyper.epochs)
    logits = probe.logits(reps[test_idx])
    yte = labels[test_idx]
    order = np.argsort(-logits, axis=1, kind="stable")
    top = min(5, k)
    top1, top5, per_class = _scores((order[:, :top] == yte[:, None]).any(axis=1), yte, k, order[:, 0] == yte)
    report = EvalReport("linear", top1, top5, len(yte), per_class, collapse_diagnostics(reps))
    return probe, report


def knn_probe(reps, labels, k_neighbors: int = 5) -> EvalReport:
    """Leave-one-out k-NN under DisSim; vote ties go to the class with the smaller summed DisSim."""
    if k_neighbors < 1:
        raise ContractError("k_neighbors must be at least 1")
    reps = np.asarray(reps, dtype=np.float64)
    labels = _check_labels(labels, len(reps))
    n = len(reps)
    n_classes = int(labels.max()) + 1
    dist = dissim_matrix_values(reps, reps)
    np.fill_diagonal(dist, np.inf)
    kk = min(k_neighbors, n - 1)
    hit1 = np.zeros(n, bool)
    hit5 = np.zeros(n, bool)
    top = min(5, n_classes)
    for i in range(n):
        nbrs = np.argsort(dist[i], kind="stable")[:kk]
        votes = np.bincount(labels[nbrs], minlength=n_classes)
        summed = np.bincount(labels[nbrs], weights=dist[i, nbrs], minlength=n_classes)
        # more votes first, then smaller summed distance, then smaller label
        ranking = np.lexsort((np.arange(n_classes), summed, -votes))
        hit1[i] = ranking[0] == labels[i]
        hit5[i] = labels[i] in ranking[:top]
    top1, top5, per_class = _scores(hit5, labels, n_classes, hit1)
    return EvalReport("knn", top1, top5, n, per_class, collapse_diagnostics(reps))
