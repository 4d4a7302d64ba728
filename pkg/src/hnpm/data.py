"""Desk-scale datasets: synthetic Gaussian clusters and CIFAR-10 binary files."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


@dataclass
class Dataset:
    samples: np.ndarray
    labels: Optional[np.ndarray]
    class_count: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ConfigError("a dataset needs at least one sample")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.samples):
                raise ConfigError("labels and samples differ in length")
            if self.labels.min() < 0 or self.labels.max() >= self.class_count:
                raise ConfigError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.samples)

    @property
    def is_image(self) -> bool:
        return self.samples.ndim == 4

    @property
    def input_shape(self) -> tuple:
        return tuple(self.samples.shape[1:])


def _simplex_centers(k: int, d: int, separation: float, rng: np.random.Generator):
    if k > d + 1:
        raise ConfigError(f"cannot place {k} equidistant centers in dimension {d} (need k <= d + 1)")
    # regular simplex: centred standard basis of R^k, distances sqrt(2)
    e = np.eye(k) - 1.0 / k
    u, s, _ = np.linalg.svd(e)
    coords = u[:, : k - 1] * s[: k - 1]
    basis, _ = np.linalg.qr(rng.standard_normal((d, k - 1)))
    return (separation / np.sqrt(2.0)) * coords @ basis.T


def gen_synthetic_clusters(k=5, d=32, n_per_class=500, spread=1.0, separation=6.0, seed=0) -> Dataset:
    """k isotropic Gaussian clusters whose centers are pairwise ``separation`` apart."""
    if k < 2 or d < 2:
        raise ConfigError("need k >= 2 and d >= 2")
    if not spread > 0:
        raise ConfigError("spread must be positive")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be at least 1")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    centers = _simplex_centers(k, d, float(separation), rng)
    noise = rng.standard_normal((k, n_per_class, d))
    x = (centers[:, None, :] + spread * noise).reshape(k * n_per_class, d)
    y = np.repeat(np.arange(k), n_per_class)
    prov = {
        "kind": "synthetic",
        "k": k,
        "d": d,
        "n_per_class": n_per_class,
        "spread": float(spread),
        "separation": float(separation),
        "seed": int(seed),
    }
    return Dataset(x, y, k, prov)


def load_cifar_binary(path) -> Dataset:
    """Parse 3073-byte records: one label byte, then 3072 channel-major pixels."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise FormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    pixels = rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return Dataset(pixels, labels, 10, {"kind": "cifar", "path": str(path)})


def save_cifar_binary(dataset: Dataset, path) -> None:
    if dataset.samples.shape[1:] != CIFAR_SHAPE:
        raise FormatError("CIFAR records are 3 x 32 x 32")
    pix = np.clip(np.rint(dataset.samples * 255.0), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    labels = np.zeros(len(dataset), np.uint8) if dataset.labels is None else dataset.labels.astype(np.uint8)
    Path(path).write_bytes(np.concatenate([labels[:, None], pix], axis=1).tobytes())


def load_dataset(ref: dict) -> Dataset:
    """Resolve a dataset reference as stored in a training config."""
    ref = dict(ref)
    kind = ref.pop("kind", "synthetic")
    if kind == "synthetic":
        try:
            return gen_synthetic_clusters(**ref)
        except TypeError as exc:
            raise ConfigError(f"dataset: {exc}") from None
    if kind == "cifar":
        ds = load_cifar_binary(ref["path"])
        limit = ref.get("limit")
        if limit:
            ds = Dataset(ds.samples[:limit], ds.labels[:limit], 10, ds.provenance | {"limit": limit})
        return ds
    raise ConfigError(f"unknown dataset kind {kind!r}")


def parse_dataset_spec(text: str) -> dict:
    """``synthetic:k=5,d=32`` or ``cifar:path/to/data_batch_1.bin`` into a reference dict."""
    kind, _, rest = text.partition(":")
    if kind == "cifar":
        if not rest:
            raise ConfigError("cifar dataset spec needs a path")
        return {"kind": "cifar", "path": rest}
    if kind != "synthetic":
        raise ConfigError(f"unknown dataset kind {kind!r}")
    ref: dict = {"kind": "synthetic"}
    for item in filter(None, rest.split(",")):
        key, eq, val = item.partition("=")
        if not eq:
            raise ConfigError(f"malformed dataset option {item!r}")
        ref[key] = float(val) if key in ("spread", "separation") else int(val)
    return ref


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    epoch: int
    batch_size: int
    drop_last: bool = True

    def permutation(self, n: int) -> np.ndarray:
        ss = np.random.SeedSequence([int(self.seed), int(self.epoch)])
        return np.random.Generator(np.random.Philox(ss)).permutation(n)


def batches(n_samples: int, plan: BatchPlan, mining: bool = True) -> list:
    """Index batches for one epoch, in a reshuffled order fixed by ``(seed, epoch)``."""
    if plan.batch_size < 2 and mining:
        raise ConfigError("hard negative mining needs batch_size >= 2")
    if plan.batch_size < 1 or plan.batch_size > n_samples:
        raise ConfigError(f"batch_size {plan.batch_size} incompatible with {n_samples} samples")
    perm = plan.permutation(n_samples)
    stop = n_samples - n_samples % plan.batch_size if plan.drop_last else n_samples
    return [perm[i : i + plan.batch_size] for i in range(0, stop, plan.batch_size)]
