"""Pseudo-label refinement: per-sample label queues with mode correction,
teacher losses, and a two-component GMM over log losses that turns each
loss into a clean-label probability.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .encoder import LOG_EPS, weighted_cross_entropy
from .logging import ConfigError, NumericalError, get_logger

logger = get_logger(__name__)

QUEUE_LENGTH = 5
GMM_MAX_ITERS = 200
GMM_TOL = 1e-6
VARIANCE_FLOOR = 1e-6


class LabelQueue:
    """Ring buffer of the last L pseudo labels for each of N samples."""

    def __init__(self, num_samples: int, length: int = QUEUE_LENGTH):
        if length < 1:
            raise ConfigError(f"Queue length must be >= 1, got {length}")
        self.length = length
        self._queues: list[deque[int]] = [deque(maxlen=length) for _ in range(num_samples)]

    def __len__(self) -> int:
        return len(self._queues)

    def contents(self, index: int) -> list[int]:
        return list(self._queues[index])

    def enqueue_and_correct(self, index: int, label: int) -> int:
        """Push ``label`` for sample ``index`` and return the queue's mode.

        Among labels tied for the highest count, the one enqueued most
        recently wins.
        """
        queue = self._queues[index]
        queue.append(int(label))
        counts = Counter(queue)
        # max() keeps the first maximal element, so scan newest first.
        return max(reversed(queue), key=counts.__getitem__)

    def enqueue_batch(self, indices, labels) -> np.ndarray:
        return np.array(
            [self.enqueue_and_correct(int(i), int(y)) for i, y in zip(indices, labels)],
            dtype=np.int64,
        )


def teacher_loss(p_t, label) -> np.ndarray | float:
    """-log p_t(label), with the probability floored at LOG_EPS.

    Works on one posterior vector and label, or a batch of each.
    """
    p = np.asarray(p_t, dtype=np.float64)
    y = np.asarray(label, dtype=np.int64)
    if p.ndim == 1:
        return float(-np.log(max(p[int(y)], LOG_EPS)))
    return weighted_cross_entropy(p, y, np.ones(len(y))).per_sample_loss


@dataclass
class NoiseModel:
    """Two-component 1-D GMM over log losses; component 1 is the clean one."""

    pi: float
    mu1: float
    var1: float
    mu2: float
    var2: float
    # All losses (nearly) equal: no mixture was fitted and every sample is clean.
    degenerate: bool = False
    iterations: int = 0
    log_likelihood_history: list[float] = field(default_factory=list)

    @property
    def sigma1(self) -> float:
        return float(np.sqrt(self.var1))

    @property
    def sigma2(self) -> float:
        return float(np.sqrt(self.var2))


def _log_joint(y: np.ndarray, weights, means, variances) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_weights = np.log(np.asarray(weights, dtype=np.float64))
    return log_weights + norm.logpdf(
        y[:, None], loc=np.asarray(means), scale=np.sqrt(np.asarray(variances))
    )


def _log_losses(losses) -> np.ndarray:
    values = np.asarray(losses, dtype=np.float64)
    if not np.isfinite(values).all():
        raise NumericalError("Non-finite teacher loss")
    if (values < 0).any():
        raise ConfigError("Teacher losses must be >= 0")
    return np.log(np.maximum(values, LOG_EPS))


def fit_noise_gmm(
    losses,
    max_iters: int = GMM_MAX_ITERS,
    tol: float = GMM_TOL,
    variance_floor: float = VARIANCE_FLOOR,
) -> NoiseModel:
    """Fit a two-component GMM to log(losses) by EM.

    Starts from the 25th/75th percentiles with the global variance and equal
    weights. Stops when the mean log-likelihood per sample improves by less
    than ``tol``. The returned components satisfy mu1 < mu2.
    """
    y = _log_losses(losses)
    if y.size < 2:
        raise ConfigError(f"GMM needs at least 2 losses, got {y.size}")

    total_var = float(y.var())
    if total_var < variance_floor:
        centre = float(y.mean())
        logger.info("noise model degenerate", variance=total_var, samples=int(y.size))
        return NoiseModel(
            pi=1.0, mu1=centre, var1=variance_floor, mu2=centre, var2=variance_floor,
            degenerate=True,
        )

    weights = np.array([0.5, 0.5])
    means = np.percentile(y, [25, 75]).astype(np.float64)
    variances = np.full(2, max(total_var, variance_floor))
    history: list[float] = []
    tiny = np.finfo(np.float64).tiny

    for _ in range(max_iters):
        log_joint = _log_joint(y, weights, means, variances)
        log_lik = logsumexp(log_joint, axis=1)
        history.append(float(log_lik.mean()))
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        resp = np.exp(log_joint - log_lik[:, None])
        counts = np.maximum(resp.sum(axis=0), tiny)
        weights = counts / y.size
        means = (resp * y[:, None]).sum(axis=0) / counts
        variances = np.maximum(
            (resp * (y[:, None] - means) ** 2).sum(axis=0) / counts, variance_floor
        )

    order = np.argsort(means, kind="stable")
    weights, means, variances = weights[order], means[order], variances[order]
    model = NoiseModel(
        pi=float(weights[0]),
        mu1=float(means[0]),
        var1=float(variances[0]),
        mu2=float(means[1]),
        var2=float(variances[1]),
        iterations=len(history),
        log_likelihood_history=history,
    )
    logger.debug(
        "Fitted noise model",
        pi=model.pi, mu1=model.mu1, mu2=model.mu2, iterations=model.iterations,
    )
    return model


def component_posteriors(model: NoiseModel, losses) -> np.ndarray:
    """N x 2 posteriors of (clean, noisy) for each loss; rows sum to 1."""
    y = np.atleast_1d(_log_losses(losses))
    if model.degenerate:
        return np.column_stack([np.ones_like(y), np.zeros_like(y)])
    log_joint = _log_joint(
        y, [model.pi, 1.0 - model.pi], [model.mu1, model.mu2], [model.var1, model.var2]
    )
    return np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))


def clean_probability(model: NoiseModel, loss) -> np.ndarray | float:
    """Posterior weight of the low-mean component at log(loss)."""
    p_clean = component_posteriors(model, loss)[:, 0]
    return float(p_clean[0]) if np.ndim(loss) == 0 else p_clean


class TeacherLossTable:
    """Latest teacher loss and current clean probability for every sample."""

    def __init__(self, num_samples: int):
        self.losses = np.zeros(num_samples)
        self.p_clean = np.ones(num_samples)

    def record(self, indices, losses) -> None:
        self.losses[np.asarray(indices, dtype=np.int64)] = losses

    def weights(self, indices) -> np.ndarray:
        return self.p_clean[np.asarray(indices, dtype=np.int64)]

    def refresh(self, model: NoiseModel) -> None:
        """Recompute p_clean from a model fitted on a snapshot of the losses."""
        self.p_clean = np.asarray(clean_probability(model, self.losses), dtype=np.float64)


def noise_log_row(epoch: int, model: NoiseModel, p_clean) -> dict[str, Any]:
    return {
        "epoch": epoch,
        "pi": model.pi,
        "mu1": model.mu1,
        "sigma1": model.sigma1,
        "mu2": model.mu2,
        "sigma2": model.sigma2,
        "mean_p_clean": float(np.mean(p_clean)),
    }


@dataclass
class LossHistogram:
    edges: np.ndarray
    correct: np.ndarray
    incorrect: np.ndarray

    def rows(self) -> list[dict[str, Any]]:
        return [
            {
                "log_loss_lo": float(lo),
                "log_loss_hi": float(hi),
                "correct": int(c),
                "incorrect": int(w),
            }
            for lo, hi, c, w in zip(self.edges[:-1], self.edges[1:], self.correct, self.incorrect)
        ]


def loss_histogram(losses, is_correct, bins: int = 30) -> LossHistogram:
    """Histogram of log teacher losses, split by pseudo-label correctness.

    Correctness comes from ground truth, so this is a diagnostic only.
    """
    y = _log_losses(losses)
    mask = np.asarray(is_correct, dtype=bool)
    if mask.shape != y.shape:
        raise ConfigError("losses and is_correct must have the same length")
    edges = np.histogram_bin_edges(y, bins=bins)
    correct, _ = np.histogram(y[mask], bins=edges)
    incorrect, _ = np.histogram(y[~mask], bins=edges)
    return LossHistogram(edges=edges, correct=correct, incorrect=incorrect)
