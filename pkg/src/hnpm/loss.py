"""Contrastive losses on infinity-norm normalised representations.

``dissim(u, v)`` is the squared Euclidean distance after dividing each
vector by its largest absolute entry. The positive loss pulls teacher and
student views of one sample together; the negative loss pushes each
student anchor away from the teacher outputs of its *hard* negatives,
the other samples within ``threshold`` of it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import ConfigError, DegenerateBatchError, DegenerateInputError, DegenerateRepresentationError, DomainError

DEFAULT_THRESHOLD = 1.0


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, Tensor) else x, dtype=np.float64)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise infinity-norm normalisation on plain arrays (no tape)."""
    x = np.atleast_2d(_values(x))
    peak = np.abs(x).max(axis=1)
    if np.any(peak == 0.0):
        raise DegenerateRepresentationError(f"zero representation rows: {np.flatnonzero(peak == 0).tolist()}")
    return x / peak[:, None]


def _normalize(t: Tensor) -> Tensor:
    try:
        return ad.inf_norm_normalize(t)
    except DegenerateInputError as exc:
        raise DegenerateRepresentationError(str(exc)) from None


def dissim(u, v) -> float:
    """Squared distance between the infinity-normalised vectors ``u`` and ``v``."""
    return float(kernels.pairwise_sqdist(normalize_rows(u), normalize_rows(v))[0, 0])


def dissim_matrix_values(a, b) -> np.ndarray:
    """``out[i, j] = dissim(a[i], b[j])`` without recording a tape."""
    return kernels.pairwise_sqdist(normalize_rows(a), normalize_rows(b))


def dissim_matrix(a: Tensor, b: Tensor) -> Tensor:
    return ad.pairwise_sqdist(_normalize(a), _normalize(b))


def positive_loss(u: Tensor, u_prime: Tensor) -> Tensor:
    """Batch mean of ``dissim(U_i, U'_i)``."""
    if u.shape != u_prime.shape:
        raise ConfigError(f"view shapes differ: {u.shape} vs {u_prime.shape}")
    diff = ad.sub(_normalize(u), _normalize(u_prime))
    return ad.mean(ad.sum(ad.square(diff), axis=1))


@dataclass
class HardNegativeSets:
    """Per-anchor hard negatives; ``indices[i]`` is sorted and never holds ``i``."""

    indices: list
    dissims: list
    threshold: float
    mask: np.ndarray = field(repr=False)

    @property
    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def empty_set_count(self) -> int:
        return int((self.sizes == 0).sum())

    @property
    def mean_size(self) -> float:
        return float(self.sizes.mean())


def mine_hard_negatives(u_prime, u, threshold: float = DEFAULT_THRESHOLD, most_similar: bool = False) -> HardNegativeSets:
    """Select ``{j != i : dissim(U'_i, U_j) <= threshold}`` for every anchor ``i``.

    Runs on values only; the chosen indices are constants for backward.
    ``most_similar`` keeps just the closest qualifying negative per anchor.
    """
    up, uu = _values(u_prime), _values(u)
    if up.shape != uu.shape:
        raise ConfigError(f"view shapes differ: {up.shape} vs {uu.shape}")
    dist = dissim_matrix_values(up, uu)
    mask = kernels.threshold_mask(dist, threshold, True)
    if most_similar:
        masked = np.where(mask, dist, np.inf)
        best = np.argmin(masked, axis=1)
        keep = np.zeros_like(mask)
        rows = np.flatnonzero(mask.any(axis=1))
        keep[rows, best[rows]] = True
        mask = keep
    indices = [np.flatnonzero(row) for row in mask]
    return HardNegativeSets(indices, [dist[i, idx] for i, idx in enumerate(indices)], float(threshold), mask)


def negative_loss_terms(u_prime, u, sets: HardNegativeSets) -> np.ndarray:
    """Per-anchor ``-log(sum of mined dissims)``; NaN where the set is empty."""
    dist = dissim_matrix_values(u_prime, u)
    out = np.full(len(sets.indices), np.nan)
    for i, idx in enumerate(sets.indices):
        if len(idx):
            out[i] = -math.log(dist[i, idx].sum())
    return out


def negative_loss(u_prime: Tensor, u: Tensor, sets: HardNegativeSets) -> Tensor:
    """``-mean_i log(sum_{j in B_i} dissim(U'_i, U_j))`` over anchors with a non-empty set.

    Anchors with no hard negative contribute nothing and are left out of the mean.
    """
    nonempty = sets.mask.any(axis=1)
    n_used = int(nonempty.sum())
    if n_used == 0:
        return Tensor(0.0)
    dist = dissim_matrix(u_prime, u)
    summed = ad.sum(ad.mul(dist, Tensor(sets.mask.astype(np.float64))), axis=1)
    if np.any(summed.values[nonempty] == 0.0):
        bad = np.flatnonzero(nonempty & (summed.values == 0.0)).tolist()
        raise DegenerateBatchError(f"anchors {bad}: every mined negative coincides with the anchor")
    # empty rows get log(0 + 1) = 0
    padded = ad.add(summed, Tensor((~nonempty).astype(np.float64)))
    return ad.mul(ad.sum(ad.log(padded)), -1.0 / n_used)


@dataclass
class LossBreakdown:
    l1: float
    l2: float
    total: float
    mean_hard_set_size: float
    empty_set_count: int
    loss: Tensor = field(repr=False)
    sets: Optional[HardNegativeSets] = field(default=None, repr=False)


def check_alphas(alpha1: float, alpha2: float):
    for name, a in (("alpha1", alpha1), ("alpha2", alpha2)):
        if not 0.0 < a < 1.0:
            raise ConfigError(f"{name} must lie in (0, 1), got {a}")


def total_loss(
    u: Tensor,
    u_prime: Tensor,
    alpha1: float = 0.8,
    alpha2: float = 0.1,
    threshold: float = DEFAULT_THRESHOLD,
    most_similar: bool = False,
) -> LossBreakdown:
    """``alpha1 * positive_loss + alpha2 * negative_loss`` with mining at ``threshold``."""
    check_alphas(alpha1, alpha2)
    l1 = positive_loss(u, u_prime)
    sets = mine_hard_negatives(u_prime, u, threshold, most_similar)
    l2 = negative_loss(u_prime, u, sets)
    total = ad.add(ad.mul(l1, alpha1), ad.mul(l2, alpha2))
    return LossBreakdown(
        l1=l1.item(),
        l2=l2.item(),
        total=total.item(),
        mean_hard_set_size=sets.mean_size,
        empty_set_count=sets.empty_set_count,
        loss=total,
        sets=sets,
    )


def infonce_terms(u, u_prime, include_positive: bool = False):
    """Return the two batch-mean terms of the dissimilarity InfoNCE surrogate.

    ``(mean_i log dissim(U_i, U'_i), mean_i log sum_j dissim(U_j, U'_i))``;
    the second sum runs over ``j != i`` unless ``include_positive``.
    """
    uu, up = _values(u), _values(u_prime)
    dist = dissim_matrix_values(uu, up)  # dist[j, i] = dissim(U_j, U'_i)
    pos = np.diag(dist)
    if np.any(pos == 0.0):
        raise DomainError("a positive pair has collapsed to dissim 0; log undefined")
    cols = dist.copy()
    if not include_positive:
        np.fill_diagonal(cols, 0.0)
    denom = cols.sum(axis=0)
    if np.any(denom == 0.0):
        raise DomainError("negative sum is zero for some anchor")
    return float(np.mean(np.log(pos))), float(np.mean(np.log(denom)))


def infonce_surrogate(u, u_prime, include_positive: bool = False) -> float:
    """Test oracle only: ``mean_i [log dissim(U_i, U'_i) - log sum_j dissim(U_j, U'_i)]``."""
    pos, neg = infonce_terms(u, u_prime, include_positive)
    return pos - neg
