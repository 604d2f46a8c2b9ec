"""Lloyd's k-means with k-means++ seeding, shared by mosaic and dictionary fitting."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

MAX_ITER = 100
SHIFT_TOL = 1e-6
_CHUNK = 4096


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: List[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray, x_sq: np.ndarray) -> np.ndarray:
    d = x_sq[:, None] - 2.0 * (x @ c.T) + np.einsum("ij,ij->i", c, c)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def assign(x: np.ndarray, centroids: np.ndarray):
    """Nearest centroid (lowest index on ties) and its squared distance, chunked over rows."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    labels = np.empty(len(x), dtype=np.int64)
    best = np.empty(len(x), dtype=np.float64)
    x_sq = np.einsum("ij,ij->i", x, x)
    for s in range(0, len(x), _CHUNK):
        d = _sq_dists(x[s : s + _CHUNK], c, x_sq[s : s + _CHUNK])
        labels[s : s + _CHUNK] = np.argmin(d, axis=1)
        best[s : s + _CHUNK] = d[np.arange(len(d)), labels[s : s + _CHUNK]]
    return labels, best


def distinct_count(x: np.ndarray) -> int:
    return len(np.unique(np.asarray(x), axis=0))


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    closest = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            break
        nxt = int(rng.choice(n, p=closest / total))
        idx.append(nxt)
        np.minimum(closest, np.sum((x - x[nxt]) ** 2, axis=1), out=closest)
    return x[idx].copy()


def kmeans(x, k: int, seed=0, max_iter: int = MAX_ITER, tol: float = SHIFT_TOL) -> KMeansResult:
    """Cluster rows of `x` into at most `k` groups.

    k is reduced to the number of distinct rows.  An emptied cluster is reseeded
    at the point farthest from its current centroid.  Iteration stops after
    `max_iter` rounds or once no centroid moves more than `tol`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0:
        raise ValueError("k-means needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, distinct_count(x))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, k, rng)
    k = len(centroids)
    labels, best = assign(x, centroids)
    history = [float(best.sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=k)
        order = np.argsort(labels, kind="stable")
        present = np.flatnonzero(counts)
        starts = np.concatenate([[0], np.cumsum(counts[present])[:-1]])
        sums = np.zeros_like(centroids)
        sums[present] = np.add.reduceat(x[order], starts, axis=0)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for j in np.flatnonzero(~filled):
            far = int(np.argmax(best))
            new[j] = x[far]
            best[far] = 0.0
        shift = float(np.max(np.sqrt(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        labels, best = assign(x, centroids)
        history.append(float(best.sum()))
        if shift < tol:
            break
    return KMeansResult(centroids, labels, history, n_iter)
