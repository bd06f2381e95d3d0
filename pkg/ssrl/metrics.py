"""Clustering quality against ground-truth speakers, and verification
metrics on cosine-scored trials.

Ground truth enters only here; nothing in this module feeds training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import normalized_mutual_info_score, roc_curve

from .logging import ConfigError, NumericalError

C_MISS = 1.0
C_FA = 1.0
P_TARGET = 0.05


def _label_pair(predicted, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(predicted).ravel()
    true = np.asarray(truth).ravel()
    if pred.size == 0:
        raise ConfigError("Cannot score an empty labeling")
    if pred.shape != true.shape:
        raise ConfigError(
            f"Predicted and true labels differ in length ({pred.size} vs {true.size})"
        )
    return pred, true


def contingency(predicted, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts of (pseudo class, true class) pairs.

    Returns:
        (matrix, pseudo ids, true ids); rows follow pseudo ids, columns true ids.
    """
    pred, true = _label_pair(predicted, truth)
    pred_ids, pred_idx = np.unique(pred, return_inverse=True)
    true_ids, true_idx = np.unique(true, return_inverse=True)
    table = np.zeros((pred_ids.size, true_ids.size), dtype=np.int64)
    np.add.at(table, (pred_idx, true_idx), 1)
    return table, pred_ids, true_ids


def nmi(predicted, truth) -> float:
    """Normalized mutual information, arithmetic-mean normalization."""
    pred, true = _label_pair(predicted, truth)
    return float(normalized_mutual_info_score(true, pred, average_method="arithmetic"))


def hungarian_mapping(predicted, truth) -> dict[int, int]:
    """Maximum-overlap one-to-one matching of pseudo classes to true classes.

    Pseudo classes left unmatched (more clusters than speakers) are absent.
    """
    table, pred_ids, true_ids = contingency(predicted, truth)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return {int(pred_ids[r]): int(true_ids[c]) for r, c in zip(rows, cols)}


def hungarian_accuracy(predicted, truth) -> float:
    """Percentage of samples whose pseudo class maps to their true class."""
    table, _, _ = contingency(predicted, truth)
    rows, cols = linear_sum_assignment(table, maximize=True)
    matched = int(table[rows, cols].sum())
    return 100.0 * matched / int(table.sum())


def mean_max_purity(predicted, truth) -> float:
    """Mean over non-empty pseudo clusters of the dominant true-class share."""
    table, _, _ = contingency(predicted, truth)
    return 100.0 * float(np.mean(table.max(axis=1) / table.sum(axis=1)))


def _unit(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise NumericalError("Cannot cosine-score a zero vector")
    return z / norms


def cosine_score(z1, z2) -> float:
    a = np.asarray(z1, dtype=np.float64)
    b = np.asarray(z2, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"Embedding shapes differ: {a.shape} vs {b.shape}")
    return float(np.clip(_unit(a) @ _unit(b), -1.0, 1.0))


def cosine_scores(embeddings, pairs) -> np.ndarray:
    """Cosine score for each (a, b) index pair."""
    unit = _unit(np.asarray(embeddings, dtype=np.float64))
    pairs = np.asarray(pairs, dtype=np.int64)
    scores = np.einsum("ij,ij->i", unit[pairs[:, 0]], unit[pairs[:, 1]])
    return np.clip(scores, -1.0, 1.0)


@dataclass
class OperatingPoints:
    """False-accept and false-reject rates at every distinct score threshold.

    Trials scoring at or above a threshold are accepted. The first point
    (threshold +inf) rejects everything.
    """

    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray


def det_points(scores, targets) -> OperatingPoints:
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets, dtype=bool)
    if s.shape != t.shape or s.ndim != 1:
        raise ConfigError("scores and targets must be 1-D arrays of equal length")
    if t.all() or not t.any():
        raise ConfigError("Need at least one target and one non-target trial")
    if not np.isfinite(s).all():
        raise NumericalError("Non-finite trial score")
    far, tpr, thresholds = roc_curve(t, s, drop_intermediate=False)
    return OperatingPoints(thresholds=thresholds, far=far, frr=1.0 - tpr)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _lower_hull(points: np.ndarray) -> list[tuple[float, float]]:
    hull: list[tuple[float, float]] = []
    for p in sorted(map(tuple, points)):
        while len(hull) >= 2 and _cross(hull[-2], hull[-1], p) <= 0:
            hull.pop()
        hull.append(p)
    return hull


def eer(scores, targets) -> float:
    """Equal error rate in percent.

    FAR and FRR are interpolated linearly between operating points on the
    lower convex hull of the (FAR, FRR) curve; the EER is where the hull
    meets FAR = FRR.
    """
    points = det_points(scores, targets)
    hull = _lower_hull(np.column_stack([points.far, points.frr]))
    for (x0, y0), (x1, y1) in zip(hull, hull[1:]):
        d0, d1 = x0 - y0, x1 - y1
        if d0 <= 0 <= d1:
            if d1 == d0:
                return 100.0 * x0
            frac = d0 / (d0 - d1)
            return 100.0 * (x0 + frac * (x1 - x0))
    # Unreachable for a valid curve: it runs from (0, 1) to (1, 0).
    raise NumericalError("Operating points never cross FAR = FRR")


def detection_costs(
    points: OperatingPoints,
    c_miss: float = C_MISS,
    c_fa: float = C_FA,
    p_target: float = P_TARGET,
) -> np.ndarray:
    """Normalized detection cost at each operating point."""
    raw = c_miss * points.frr * p_target + c_fa * points.far * (1.0 - p_target)
    return raw / min(c_miss * p_target, c_fa * (1.0 - p_target))


def min_dcf(
    scores,
    targets,
    c_miss: float = C_MISS,
    c_fa: float = C_FA,
    p_target: float = P_TARGET,
) -> float:
    if not 0 < p_target < 1:
        raise ConfigError(f"p_target must be in (0, 1), got {p_target}")
    return float(detection_costs(det_points(scores, targets), c_miss, c_fa, p_target).min())
