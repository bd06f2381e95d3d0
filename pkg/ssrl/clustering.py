"""Pseudo-label generation: k-means for the initial labels, then online
clustering of teacher posteriors by argmax or by balanced Sinkhorn-Knopp
transport over a buffer of batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .logging import ConfigError, get_logger

logger = get_logger(__name__)

SINKHORN_LAMBDA = 25.0
SINKHORN_ITERS = 300
SINKHORN_TOL = 1e-6


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignment: np.ndarray
    # Inertia after each assignment step, in iteration order.
    inertia_history: list[float] = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    nearest = cdist(x, x[chosen], "sqeuclidean")[:, 0]
    for _ in range(1, k):
        total = nearest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=nearest / total))
        else:
            # Every point coincides with a centre; any unused point will do.
            unused = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(unused))
        chosen.append(idx)
        nearest = np.minimum(nearest, cdist(x, x[idx : idx + 1], "sqeuclidean")[:, 0])
    return x[chosen].copy()


def _assign(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dists = cdist(x, centroids, "sqeuclidean")
    labels = np.argmin(dists, axis=1)
    return labels, dists[np.arange(x.shape[0]), labels]


def kmeans(embeddings, k: int, max_iters: int = 100, seed: int = 0) -> ClusterModel:
    """Lloyd's algorithm from k-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its centroid.
    Stops when the assignment no longer changes or after ``max_iters``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ConfigError(f"k-means needs an N x D matrix, got shape {x.shape}")
    n = x.shape[0]
    if k < 1:
        raise ConfigError(f"k-means needs K >= 1, got {k}")
    if n < k:
        raise ConfigError(f"k-means needs N >= K, got N={n}, K={k}")
    if not np.isfinite(x).all():
        raise ConfigError("k-means input contains non-finite values")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(x, k, rng)
    assignment = np.full(n, -1)
    history: list[float] = []

    for _ in range(max_iters):
        new_assignment, point_dists = _assign(x, centroids)
        history.append(float(point_dists.sum()))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment

        counts = np.bincount(assignment, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignment, x)
        occupied = counts > 0
        centroids[occupied] = sums[occupied] / counts[occupied, None]
        for empty in np.flatnonzero(~occupied):
            far = int(np.argmax(point_dists))
            logger.debug("Re-seeding empty cluster", cluster=int(empty), point=far)
            centroids[empty] = x[far]
            point_dists[far] = 0.0
    else:
        # Out of iterations: align the assignment with the last centroids.
        assignment, point_dists = _assign(x, centroids)
        history.append(float(point_dists.sum()))

    logger.debug("k-means finished", k=k, iterations=len(history), inertia=history[-1])
    return ClusterModel(centroids=centroids, assignment=assignment, inertia_history=history)


def argmax_assign(posteriors) -> np.ndarray | int:
    """Index of the largest posterior; ties go to the lowest index."""
    p = np.asarray(posteriors)
    labels = np.argmax(p, axis=-1)
    return int(labels) if p.ndim == 1 else labels


@dataclass
class SinkhornResult:
    q: np.ndarray
    iterations: int
    converged: bool
    violation: float


def _marginal_violation(q: np.ndarray) -> float:
    k, n = q.shape
    return float(
        max(np.abs(q.sum(axis=1) - 1.0 / k).max(), np.abs(q.sum(axis=0) - 1.0 / n).max())
    )


def sinkhorn(
    posteriors,
    lambda_ot: float = SINKHORN_LAMBDA,
    max_iters: int = SINKHORN_ITERS,
    tol: float = SINKHORN_TOL,
) -> SinkhornResult:
    """Balanced transport plan Q = diag(u) exp(lambda * P) diag(v).

    ``posteriors`` is K x N with one posterior per column. Q ends with row
    sums 1/K and column sums 1/N. Row and column rescalings are done in the
    log domain, so large ``lambda_ot`` cannot overflow.
    """
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2:
        raise ConfigError(f"Sinkhorn needs a K x N matrix, got shape {p.shape}")
    k, n = p.shape
    if n < k:
        raise ConfigError(f"Sinkhorn needs at least K={k} columns, got {n}")
    if not lambda_ot > 0:
        raise ConfigError(f"lambda_ot must be > 0, got {lambda_ot}")

    log_kernel = lambda_ot * p
    log_r = -math.log(k)
    log_c = -math.log(n)
    log_u = np.zeros(k)
    log_v = np.zeros(n)
    q = np.exp(log_kernel - logsumexp(log_kernel))
    violation = _marginal_violation(q)
    iterations = 0
    while iterations < max_iters:
        iterations += 1
        log_u = log_r - logsumexp(log_kernel + log_v[None, :], axis=1)
        log_v = log_c - logsumexp(log_kernel + log_u[:, None], axis=0)
        q = np.exp(log_kernel + log_u[:, None] + log_v[None, :])
        violation = _marginal_violation(q)
        if violation < tol:
            break

    converged = violation < tol
    if not converged:
        logger.warning(
            "sinkhorn did not converge",
            iterations=iterations,
            violation=violation,
            tol=tol,
        )
    return SinkhornResult(q=q, iterations=iterations, converged=converged, violation=violation)


class PosteriorBuffer:
    """Teacher posteriors of the last M batches, waiting for a Sinkhorn flush.

    Columns are stored unscaled; `matrix` applies the 1/N scaling.
    """

    def __init__(self, num_clusters: int, batches_per_flush: int, batch_size: int):
        if batches_per_flush < 1:
            raise ConfigError(f"batches_per_flush must be >= 1, got {batches_per_flush}")
        if batches_per_flush * batch_size <= num_clusters:
            raise ConfigError(
                "Sinkhorn buffer must hold more samples than clusters "
                f"({batches_per_flush} * {batch_size} <= {num_clusters})"
            )
        self.num_clusters = num_clusters
        self.batches_per_flush = batches_per_flush
        self._columns: list[np.ndarray] = []
        self._indices: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._columns)

    @property
    def width(self) -> int:
        return sum(len(idx) for idx in self._indices)

    @property
    def sample_indices(self) -> np.ndarray:
        if not self._indices:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self._indices)

    @property
    def matrix(self) -> np.ndarray:
        """K x N matrix with entries p_t(k | x_i) / N."""
        if not self._columns:
            return np.zeros((self.num_clusters, 0))
        return np.concatenate(self._columns, axis=0).T / self.width

    def accumulate(self, posteriors, indices) -> bool:
        """Append a batch; returns True once M batches are buffered."""
        p = np.asarray(posteriors, dtype=np.float64)
        idx = np.asarray(indices, dtype=np.int64)
        if p.ndim != 2 or p.shape[1] != self.num_clusters:
            raise ConfigError(
                f"Expected B x {self.num_clusters} posteriors, got shape {p.shape}"
            )
        if idx.shape != (p.shape[0],):
            raise ConfigError(f"Expected {p.shape[0]} sample indices, got {idx.shape}")
        self._columns.append(p)
        self._indices.append(idx)
        return len(self._columns) >= self.batches_per_flush

    def clear(self) -> None:
        self._columns.clear()
        self._indices.clear()


def sinkhorn_assign(
    buffer: PosteriorBuffer,
    lambda_ot: float = SINKHORN_LAMBDA,
    max_iters: int = SINKHORN_ITERS,
    tol: float = SINKHORN_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """Flush the buffer and label its samples by the column maxima of Q.

    ``lambda_ot`` multiplies the per-sample posteriors (N times the buffer
    matrix), so its effect does not depend on the buffer width.

    Returns:
        (sample indices, labels) in accumulation order.
    """
    indices = buffer.sample_indices
    scores = buffer.matrix * buffer.width
    result = sinkhorn(scores, lambda_ot=lambda_ot, max_iters=max_iters, tol=tol)
    buffer.clear()
    return indices, np.argmax(result.q, axis=0)


def active_cluster_count(labels) -> int:
    return int(np.unique(np.asarray(labels)).size)


def cluster_sizes(labels, num_clusters: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_clusters)


def write_assignments(path: Path, indices, labels) -> None:
    """One ``global_index,cluster_id`` line per sample."""
    idx = np.asarray(indices, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if idx.shape != lab.shape:
        raise ConfigError("indices and labels must have the same length")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.column_stack([idx, lab]), fmt="%d", delimiter=",")
