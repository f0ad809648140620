from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError


def pca_project(points, k: int = 2):
    """Project onto the top-``k`` principal axes.

    Returns ``(projected N x k, explained variance ratios (k,), components k x d)``.
    Identical points give zero projections and zero ratios.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise InvalidInputError("need an N x d array with N >= 2")
    if not 1 <= k <= x.shape[1]:
        raise InvalidInputError(f"k must lie in [1, {x.shape[1]}]")
    centered = x - x.mean(0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = s ** 2
    total = var.sum()
    if total == 0:
        return np.zeros((len(x), k)), np.zeros(k), np.eye(x.shape[1])[:k]
    comps = vt[:k]
    ratios = var[:k] / total
    if len(ratios) < k:
        ratios = np.concatenate([ratios, np.zeros(k - len(ratios))])
    return centered @ comps.T, ratios, comps
