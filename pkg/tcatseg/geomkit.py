"""
geomkit — non-differentiable geometry on (n, 3) float arrays.

Brute-force kernels only: distances come from scipy's cdist in query chunks,
no spatial index is built. All functions are pure.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from tcatseg.errors import SizeError, ValidationError

log = logging.getLogger(__name__)

IDW_EPS = 1e-8
CHUNK = 2048


@dataclass(frozen=True)
class NeighborTable:
    indices: np.ndarray  # (q, K) int64, rectangular after padding
    counts: np.ndarray  # (q,) real neighbors before padding
    fallback: np.ndarray  # (q,) True where the ball was empty
    distances: np.ndarray  # (q, K)

    @property
    def n_queries(self) -> int:
        return int(self.indices.shape[0])

    @property
    def width(self) -> int:
        return int(self.indices.shape[1])


def as_coords(xyz: np.ndarray) -> np.ndarray:
    arr = np.asarray(xyz, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"coordinates must be (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("coordinates contain non-finite values")
    return arr


def normalize(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Center on the centroid and scale so the farthest point sits at radius 1."""
    arr = as_coords(xyz)
    center = arr.mean(axis=0)
    shifted = arr - center
    radius = float(np.sqrt((shifted**2).sum(axis=1)).max()) if len(arr) else 0.0
    scale = radius if radius > 0 else 1.0
    return shifted / scale, center, scale


def denormalize(xyz: np.ndarray, center: np.ndarray, scale: float) -> np.ndarray:
    return np.asarray(xyz) * scale + center


def canonical_order(xyz: np.ndarray) -> np.ndarray:
    """Permutation sorting points lexicographically by (x, y, z)."""
    arr = np.asarray(xyz)
    return np.lexsort((arr[:, 2], arr[:, 1], arr[:, 0]))


def _dist_chunks(queries: np.ndarray, source: np.ndarray) -> Iterator[tuple[int, np.ndarray]]:
    for start in range(0, len(queries), CHUNK):
        yield start, np.sqrt(cdist(queries[start : start + CHUNK], source, "sqeuclidean"))


def pairwise_distances(queries: np.ndarray, source: np.ndarray) -> np.ndarray:
    q, s = as_coords(queries), as_coords(source)
    out = np.empty((len(q), len(s)))
    for start, d in _dist_chunks(q, s):
        out[start : start + len(d)] = d
    return out


# ----------------------------- sampling --------------------------------------


def farthest_point_sample(xyz: np.ndarray, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min selection starting at ``seed_index``; ties go to the lowest index."""
    arr = as_coords(xyz)
    n = len(arr)
    if not 1 <= m <= n:
        raise SizeError(f"farthest_point_sample: need 1 <= m <= n, got m={m}, n={n}")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed_index
    min_d = ((arr - arr[seed_index]) ** 2).sum(axis=1)
    min_d[seed_index] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(min_d))
        selected[i] = nxt
        min_d = np.minimum(min_d, ((arr - arr[nxt]) ** 2).sum(axis=1))
        min_d[selected[: i + 1]] = -1.0
    return selected


def covering_radius(xyz: np.ndarray, sample: np.ndarray) -> float:
    """Largest distance from any point to its nearest sampled point."""
    arr = as_coords(xyz)
    return float(pairwise_distances(arr, arr[np.asarray(sample)]).min(axis=1).max())


# ----------------------------- neighborhoods ---------------------------------


def ball_query(queries: np.ndarray, source: np.ndarray, radius: float, k: int) -> NeighborTable:
    """
    Up to ``k`` source points within ``radius`` of each query, nearest first.
    An empty ball falls back to the single nearest point (flagged); short
    lists are padded by repeating their first entry.
    """
    if radius <= 0 or k < 1:
        raise ValidationError(f"ball_query: need radius > 0 and k >= 1, got {radius}, {k}")
    q, s = as_coords(queries), as_coords(source)
    if len(s) == 0:
        raise SizeError("ball_query: empty source")
    indices = np.empty((len(q), k), dtype=np.int64)
    dists = np.empty((len(q), k))
    counts = np.empty(len(q), dtype=np.int64)
    fallback = np.zeros(len(q), dtype=bool)
    for start, d in _dist_chunks(q, s):
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        near = np.take_along_axis(d, order, axis=1)
        inside = near <= radius
        for row in range(len(d)):
            qi = start + row
            c = int(inside[row].sum())
            if c == 0:
                fallback[qi] = True
                c = 1
            counts[qi] = c
            idx = order[row, :c]
            indices[qi, :c] = idx
            indices[qi, c:] = idx[0]
            dists[qi, :c] = near[row, :c]
            dists[qi, c:] = near[row, 0]
    if fallback.any():
        log.debug("ball_query: %d of %d queries fell back to nearest", fallback.sum(), len(q))
    return NeighborTable(indices, counts, fallback, dists)


def knn(queries: np.ndarray, source: np.ndarray, k: int) -> NeighborTable:
    """Exact k nearest neighbors, ties broken by lowest source index."""
    q, s = as_coords(queries), as_coords(source)
    if not 1 <= k <= len(s):
        raise SizeError(f"knn: k={k} exceeds source size {len(s)}")
    indices = np.empty((len(q), k), dtype=np.int64)
    dists = np.empty((len(q), k))
    for start, d in _dist_chunks(q, s):
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        indices[start : start + len(d)] = order
        dists[start : start + len(d)] = np.take_along_axis(d, order, axis=1)
    return NeighborTable(indices, np.full(len(q), k), np.zeros(len(q), dtype=bool), dists)


# ----------------------------- interpolation ---------------------------------


def idw_from_distances(dists: np.ndarray) -> np.ndarray:
    """
    Row-wise inverse-distance weights 1/(d + 1e-8), normalized to sum 1.
    A row with a coincident neighbor (d < 1e-8) puts all weight on the first one.
    """
    d = np.atleast_2d(np.asarray(dists, dtype=np.float64))
    w = 1.0 / (d + IDW_EPS)
    w /= w.sum(axis=1, keepdims=True)
    hit = d < IDW_EPS
    rows = hit.any(axis=1)
    if rows.any():
        first = np.argmax(hit[rows], axis=1)
        w[rows] = 0.0
        w[np.flatnonzero(rows), first] = 1.0
    return w


def idw_weights(query: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(1, 3)
    nb = as_coords(neighbors)
    return idw_from_distances(np.sqrt(((nb - q) ** 2).sum(axis=1))[None, :])[0]


def propagate_labels(
    labeled_xyz: np.ndarray, labels: np.ndarray, targets: np.ndarray, k: int = 5
) -> np.ndarray:
    """Majority label among the k nearest labeled points; ties go to the smaller label."""
    src = as_coords(labeled_xyz)
    if len(src) == 0:
        raise SizeError("propagate_labels: no labeled points")
    lab = np.asarray(labels, dtype=np.int64)
    table = knn(targets, src, min(k, len(src)))
    votes = lab[table.indices]
    n_labels = int(lab.max()) + 1
    out = np.empty(len(votes), dtype=np.int64)
    for i, row in enumerate(votes):
        out[i] = int(np.argmax(np.bincount(row, minlength=n_labels)))
    return out
