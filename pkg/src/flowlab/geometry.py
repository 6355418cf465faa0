"""Flat-torus geometry helpers shared across modules."""

from __future__ import annotations

import numpy as np


def wrap_torus(x) -> np.ndarray:
    """Map points of R^N to the fundamental domain [0,1)^N."""
    x = np.asarray(x, dtype=np.float64)
    return x - np.floor(x)


def min_image(delta) -> np.ndarray:
    """Minimum-image representative of a displacement, per coordinate in
    [-1/2, 1/2)."""
    delta = np.asarray(delta, dtype=np.float64)
    return delta - np.round(delta)


def torus_distance(x, y) -> np.ndarray:
    """d(x, y): Euclidean length of the minimum-image displacement.

    Broadcasts over leading axes; the last axis is the coordinate axis.
    """
    diff = min_image(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))
    return np.sqrt(np.sum(diff * diff, axis=-1))


def torus_distance_matrix(points) -> np.ndarray:
    """All pairwise torus distances of a configuration (n, N) -> (n, n)."""
    pts = np.asarray(points, dtype=np.float64)
    return torus_distance(pts[:, None, :], pts[None, :, :])


def min_pairwise_distance(points) -> float:
    """Smallest pairwise torus distance of a configuration (n >= 2)."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    iu = np.triu_indices(n, 1)
    return float(torus_distance_matrix(pts)[iu].min())
