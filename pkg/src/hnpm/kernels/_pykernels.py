"""Pure numpy implementations of the pairwise distance kernels."""
import numpy as np


def pairwise_sqdist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def pairwise_sqdist_backward(g, a, b):
    # d/dA_i = 2 sum_j g_ij (A_i - B_j);  d/dB_j = -2 sum_i g_ij (A_i - B_j)
    row = g.sum(axis=1)
    col = g.sum(axis=0)
    ga = 2.0 * (row[:, None] * a - g @ b)
    gb = 2.0 * (col[:, None] * b - g.T @ a)
    return ga, gb


def threshold_mask(dist, threshold, exclude_diagonal=True):
    mask = dist <= threshold
    if exclude_diagonal:
        n = min(mask.shape)
        mask[np.arange(n), np.arange(n)] = False
    return mask
