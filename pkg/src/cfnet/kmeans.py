"""Spherical (cosine) k-means on unit-norm samples.

Used to estimate how close samples of one class get to reference vectors
fitted to another class, and the membrane potential that closeness implies
for a neuron with unit-norm weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CentroidSet:
    centroids: np.ndarray  # (k, d), unit rows
    labels: np.ndarray | None = None  # majority class per centroid, -1 when empty
    objective: list[float] = field(default_factory=list)  # mean (1 - dot) per iteration
    iterations: int = 0


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return x / norms


def _plus_plus_seed(data: np.ndarray, k: int, rng: np.random.Generator,
                    candidates: int | None) -> np.ndarray:
    """k-means++ seeding with cosine distance ``1 - dot``.

    When ``candidates`` is set, seeds are drawn from a random subset of that
    many rows, which keeps seeding cheap for large ``k``.
    """
    n = len(data)
    pool = np.arange(n)
    if candidates is not None and candidates < n:
        pool = rng.choice(n, size=max(candidates, k), replace=False)
    sub = data[pool]
    chosen = [int(rng.integers(len(sub)))]
    closest = 1.0 - sub @ sub[chosen[0]]
    for _ in range(1, k):
        weights = np.clip(closest, 0.0, None)
        total = weights.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(len(sub)), chosen)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(np.searchsorted(np.cumsum(weights), rng.random() * total, side="right"))
            nxt = min(nxt, len(sub) - 1)
        chosen.append(nxt)
        np.minimum(closest, 1.0 - sub @ sub[nxt], out=closest)
    return sub[chosen].copy()


def _assign(data: np.ndarray, centroids: np.ndarray, batch: int = 8192):
    n = len(data)
    idx = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=data.dtype)
    for s in range(0, n, batch):
        dots = data[s:s + batch] @ centroids.T
        idx[s:s + batch] = dots.argmax(axis=1)
        best[s:s + batch] = dots[np.arange(len(dots)), idx[s:s + batch]]
    return idx, best


def fit_cosine_kmeans(data, k: int, max_iters: int = 50, seed: int = 0,
                      labels=None, seed_candidates: int | None = None) -> CentroidSet:
    """Spherical k-means: assign by largest dot product, centroid = normalized mean.

    Empty clusters are reseeded with the samples farthest from their current
    centroid. Stops at ``max_iters`` or when assignments stop changing.
    """
    data = np.asarray(data)
    n = len(data)
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples ({n})")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _normalize_rows(_plus_plus_seed(data, k, rng, seed_candidates))
    assign = None
    objective = []
    it = 0
    for it in range(1, max_iters + 1):
        new_assign, best = _assign(data, centroids)
        objective.append(float(np.mean(1.0 - best)))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, data)
        sizes = np.bincount(assign, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if len(empty):
            far = np.argsort(best)[: len(empty)]
            sums[empty] = data[far]
        centroids = _normalize_rows(sums).astype(data.dtype, copy=False)
    result = CentroidSet(centroids, objective=objective, iterations=it)
    if labels is not None:
        result.labels = label_centroids(result, data, labels)
    return result


def label_centroids(centroids: CentroidSet, data, labels, n_classes: int = 10) -> np.ndarray:
    """Majority class of each centroid's members; -1 for empty centroids."""
    assign, _ = _assign(np.asarray(data), centroids.centroids)
    votes = np.zeros((len(centroids.centroids), n_classes), dtype=np.int64)
    np.add.at(votes, (assign, np.asarray(labels)), 1)
    out = votes.argmax(axis=1)
    out[votes.sum(axis=1) == 0] = -1
    return out


def nearest_cross_class_dot(centroids: CentroidSet, data, labels,
                            batch: int = 8192) -> tuple[float, tuple[int, int]]:
    """Largest ``sample . centroid`` over pairs whose classes differ.

    Returns the dot product and the (sample index, centroid index) pair.
    """
    if centroids.labels is None:
        raise ValueError("centroids must be labeled")
    data = np.asarray(data)
    labels = np.asarray(labels)
    clabels = centroids.labels
    valid = clabels >= 0
    if len(np.unique(np.concatenate([labels, clabels[valid]]))) < 2:
        raise ValueError("need at least two classes")
    best, pair = -np.inf, (-1, -1)
    for s in range(0, len(data), batch):
        dots = data[s:s + batch] @ centroids.centroids.T
        same = labels[s:s + batch, None] == clabels[None, :]
        dots[same | ~valid[None, :]] = -np.inf
        flat = int(np.argmax(dots))
        r, c = divmod(flat, dots.shape[1])
        if dots[r, c] > best:
            best, pair = float(dots[r, c]), (s + r, c)
    return best, pair


def nearest_cross_class_dot_bruteforce(centroids: CentroidSet, data, labels):
    best, pair = -np.inf, (-1, -1)
    for i, (x, y) in enumerate(zip(np.asarray(data), np.asarray(labels))):
        for c, (mu, cl) in enumerate(zip(centroids.centroids, centroids.labels)):
            if cl < 0 or cl == y:
                continue
            d = float(np.dot(x, mu))
            if d > best:
                best, pair = d, (i, c)
    return best, pair


def potential_at_dot(dot: float, tau_mem: float = 15.0) -> float:
    """Steady-state mean potential of a unit-norm neuron at this cosine similarity."""
    if not 0.0 <= dot <= 1.0 + 1e-12:
        raise ValueError("dot must lie in [0, 1]")
    return tau_mem * dot


def threshold_scan(data, labels, ks, seeds, max_iters: int = 20, tau_mem: float = 15.0,
                   seed_candidates: int | None = 10_000):
    """Rows of (k, seed, cross-class dot, implied potential)."""
    rows = []
    for k in ks:
        for seed in seeds:
            cs = fit_cosine_kmeans(data, k, max_iters, seed, labels=labels,
                                   seed_candidates=seed_candidates)
            dot, _ = nearest_cross_class_dot(cs, data, labels)
            rows.append((k, seed, dot, potential_at_dot(min(dot, 1.0), tau_mem)))
    return rows
