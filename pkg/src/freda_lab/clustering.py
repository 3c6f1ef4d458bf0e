"""Warm-started Lloyd's K-means over a bounded repository of feature vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Rng


class FeatureRepository:
    """Ring buffer holding the last ``capacity`` pushed vectors in push order."""

    def __init__(self, capacity: int, dim: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.dim = dim
        self._buf: np.ndarray | None = None
        self._start = 0
        self._size = 0
        self.last_pushed = 0

    def __len__(self) -> int:
        return self._size

    def push(self, features) -> None:
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[None, :]
        if feats.ndim != 2:
            raise ValueError(f"expected a list of vectors, got shape {feats.shape}")
        if self.dim is None:
            self.dim = feats.shape[1]
        if feats.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: repository holds {self.dim}-vectors, got {feats.shape[1]}")
        if self._buf is None:
            self._buf = np.zeros((self.capacity, self.dim))
        self.last_pushed = len(feats)
        if len(feats) >= self.capacity:
            self._buf[:] = feats[-self.capacity :]
            self._start, self._size = 0, self.capacity
            return
        for row in feats:
            end = (self._start + self._size) % self.capacity
            self._buf[end] = row
            if self._size < self.capacity:
                self._size += 1
            else:
                self._start = (self._start + 1) % self.capacity

    def array(self) -> np.ndarray:
        """Contents as a ``(len, dim)`` array, oldest first."""
        if self._buf is None:
            return np.zeros((0, self.dim or 0))
        idx = (self._start + np.arange(self._size)) % self.capacity
        return self._buf[idx]


@dataclass
class ClusterState:
    centroids: np.ndarray | None = None
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    initialized: bool = False
    iterations: int = 0
    movement: float = float("inf")
    objective_trace: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return 0 if self.centroids is None else len(self.centroids)


def _sq_distances(x: np.ndarray, centroids: np.ndarray, x_sq: np.ndarray | None = None) -> np.ndarray:
    if x_sq is None:
        x_sq = np.einsum("ij,ij->i", x, x)
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    d = x_sq[:, None] - 2.0 * (x @ centroids.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def assign(features, centroids) -> np.ndarray:
    """Index of the nearest centroid (L2) per row; ties go to the lowest index.

    Labels are 0-based.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    c = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    return np.argmin(_sq_distances(x, c), axis=1)


def objective(features, centroids, labels) -> float:
    x = np.asarray(features, dtype=np.float64)
    diff = x - np.asarray(centroids)[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans_plusplus(x: np.ndarray, k: int, rng: Rng, n_local_trials: int | None = None) -> np.ndarray:
    """Greedy k-means++ seeding.

    Each new center is the best of ``n_local_trials`` D^2-weighted candidates
    (default ``2 + floor(ln k)``), judged by the resulting potential.
    """
    n = len(x)
    if n_local_trials is None:
        n_local_trials = 2 + int(np.log(k))
    x_sq = np.einsum("ij,ij->i", x, x)
    centers = [x[int(rng.integers(n))]]
    closest = _sq_distances(x, centers[0][None, :], x_sq)[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
            best = np.minimum(closest, _sq_distances(x, x[idx][None, :], x_sq)[:, 0])
        else:
            cand = rng.choice(n, size=n_local_trials, p=closest / total)
            dist = np.minimum(closest[:, None], _sq_distances(x, x[cand], x_sq))
            pick = int(np.argmin(dist.sum(axis=0)))
            idx, best = int(cand[pick]), dist[:, pick]
        centers.append(x[idx])
        closest = best
    return np.array(centers)


def _repair_empty(x, labels, centroids, d_own):
    counts = np.bincount(labels, minlength=len(centroids))
    for k in np.flatnonzero(counts == 0):
        # claim the point farthest from its centroid, from a cluster that can spare one
        order = np.argsort(-d_own, kind="stable")
        counts_now = np.bincount(labels, minlength=len(centroids))
        for i in order:
            if counts_now[labels[i]] > 1:
                labels[i] = k
                d_own[i] = 0.0
                break
    return labels


def _lloyd(x, x_sq, centroids, max_iter, tol):
    k = len(centroids)
    trace: list[float] = []
    movement = float("inf")
    it = 0
    rows = np.arange(len(x))
    d = _sq_distances(x, centroids, x_sq)
    for it in range(1, max_iter + 1):
        labels = np.argmin(d, axis=1)
        d_own = d[rows, labels]
        trace.append(float(d_own.sum()))
        labels = _repair_empty(x, labels, centroids, d_own)
        counts = np.bincount(labels, minlength=k)
        onehot = np.zeros((k, len(x)))
        onehot[labels, rows] = 1.0
        new = centroids.copy()
        filled = counts > 0
        new[filled] = (onehot[filled] @ x) / counts[filled, None]
        scale = max(float(np.linalg.norm(centroids)), 1e-12)
        movement = float(np.linalg.norm(new - centroids)) / scale
        centroids = new
        d = _sq_distances(x, centroids, x_sq)
        if movement < tol:
            break
    labels = np.argmin(d, axis=1)
    trace.append(float(d[rows, labels].sum()))
    return centroids, labels, it, movement, trace


def kmeans_step(
    repo: FeatureRepository | np.ndarray,
    k: int,
    state: ClusterState | None,
    rng: Rng,
    *,
    n_current: int | None = None,
    max_iter: int = 20,
    tol: float = 1e-6,
    n_init: int = 25,
) -> ClusterState:
    """Run Lloyd's iterations on the repository, warm-started from ``state``.

    Cold start tries ``n_init`` k-means++ seedings drawn from ``rng`` and keeps
    the lowest objective. Iteration stops when the relative centroid movement
    drops below ``tol`` or after ``max_iter`` rounds. The returned labels cover
    the last ``n_current`` vectors (default: the size of the most recent push).
    """
    if isinstance(repo, FeatureRepository):
        x = repo.array()
        if n_current is None:
            n_current = repo.last_pushed
    else:
        x = np.asarray(repo, dtype=np.float64)
        if n_current is None:
            n_current = len(x)
    if len(x) < k:
        raise ValueError(f"repository holds {len(x)} vectors, need at least K={k}")
    x_sq = np.einsum("ij,ij->i", x, x)
    if state is not None and state.initialized:
        if state.centroids.shape != (k, x.shape[1]):
            raise ValueError(f"centroid shape {state.centroids.shape} does not match K={k}, d={x.shape[1]}")
        result = _lloyd(x, x_sq, state.centroids.copy(), max_iter, tol)
    else:
        result = None
        for _ in range(max(1, n_init)):
            cand = _lloyd(x, x_sq, kmeans_plusplus(x, k, rng), max_iter, tol)
            if result is None or cand[4][-1] < result[4][-1]:
                result = cand
    centroids, labels, it, movement, trace = result
    current = labels[len(x) - n_current :] if n_current else labels[:0]
    return ClusterState(
        centroids=centroids,
        labels=current,
        initialized=True,
        iterations=it,
        movement=movement,
        objective_trace=trace,
    )


def purity(labels, domains) -> float:
    """Fraction of samples whose cluster's majority domain equals their own."""
    labels = np.asarray(labels)
    domains = np.asarray(domains)
    if labels.size == 0:
        raise ValueError("purity of an empty assignment is undefined")
    if labels.shape != domains.shape:
        raise ValueError("labels and domains must have equal length")
    total = 0
    for k in np.unique(labels):
        _, counts = np.unique(domains[labels == k], return_counts=True)
        total += counts.max()
    return total / labels.size
