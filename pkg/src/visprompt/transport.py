"""Entropic optimal-transport reliability estimation.

A class-to-sample cost matrix is built from frozen features, the entropic OT
problem is solved with log-domain Sinkhorn iterations, and the resulting
coupling yields per-sample pseudo-labels and confidences used to split the
training set into reliable and unreliable subsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import ConfigError, DimensionError

DEFAULT_EPSILON = 0.05
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 1000


@dataclass
class TransportProblem:
    """Cost matrix (classes x samples) with marginals and solver settings."""

    cost: np.ndarray                 # (L, N), finite and nonnegative
    a: np.ndarray                    # (L,) class marginal, sums to 1
    b: np.ndarray                    # (N,) sample marginal, sums to 1
    epsilon: float = DEFAULT_EPSILON
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.cost.ndim != 2:
            raise DimensionError("cost must be a matrix")
        if self.a.shape != (self.cost.shape[0],) or \
                self.b.shape != (self.cost.shape[1],):
            raise DimensionError("marginal lengths must match the cost matrix")
        if not np.all(np.isfinite(self.cost)) or np.any(self.cost < 0):
            raise ConfigError("cost entries must be finite and nonnegative")
        for name, m in (("a", self.a), ("b", self.b)):
            if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-12:
                raise ConfigError(f"marginal {name} must be nonnegative and sum to 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass
class TransportPlan:
    pi: np.ndarray                   # (L, N) coupling
    iters_used: int
    marginal_violation: float        # L1 distance of row+column sums to (a, b)
    converged: bool


@dataclass
class PartitionResult:
    pseudo_labels: np.ndarray        # (N,) argmax class per sample
    confidences: np.ndarray          # (N,) transported mass at the argmax
    reliable: np.ndarray             # index set
    unreliable: np.ndarray           # complementary index set
    delta: float                     # confidence threshold that was applied


def uniform_marginals(n_classes: int, n_samples: int
                      ) -> tuple[np.ndarray, np.ndarray]:
    return (np.full(n_classes, 1.0 / n_classes),
            np.full(n_samples, 1.0 / n_samples))


def similarity_matrix(text_feats: np.ndarray, image_feats: np.ndarray,
                      tau: float) -> np.ndarray:
    """Per-sample softmax over classes of cosine similarity / tau.

    Rows are classes, columns are samples; every column sums to 1.
    """
    if tau <= 0:
        raise ConfigError("temperature tau must be positive")
    sims = (text_feats @ image_feats.T) / tau      # (L, N)
    return K.softmax_rows(sims.T).T


def cost_matrix(similarities: np.ndarray) -> np.ndarray:
    """Elementwise negative log of the similarity matrix, clamped at 1e-12."""
    return -np.log(np.maximum(similarities, 1e-12))


def _logsumexp(m: np.ndarray, axis: int) -> np.ndarray:
    hi = m.max(axis=axis, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    out = np.log(np.exp(m - hi).sum(axis=axis)) + hi.squeeze(axis)
    return out


def sinkhorn(prob: TransportProblem) -> TransportPlan:
    """Log-domain Sinkhorn scaling for the entropic OT problem.

    Alternates dual-potential updates until the L1 marginal violation of
    the implied coupling drops below `tol` or `max_iters` is reached; the
    plan is returned either way, with `converged` flagging which case hit.
    """
    log_kernel = -prob.cost / prob.epsilon
    with np.errstate(divide="ignore"):
        log_a = np.log(prob.a)
        log_b = np.log(prob.b)
    f = np.zeros_like(log_a)
    g = np.zeros_like(log_b)

    iters = 0
    violation = np.inf
    for iters in range(1, prob.max_iters + 1):
        f = log_a - _logsumexp(log_kernel + g[None, :], axis=1)
        g = log_b - _logsumexp(log_kernel + f[:, None], axis=0)
        pi = np.exp(log_kernel + f[:, None] + g[None, :])
        violation = (np.abs(pi.sum(axis=1) - prob.a).sum()
                     + np.abs(pi.sum(axis=0) - prob.b).sum())
        if violation < prob.tol:
            break
    pi = np.exp(log_kernel + f[:, None] + g[None, :])
    return TransportPlan(pi=pi, iters_used=iters,
                         marginal_violation=float(violation),
                         converged=bool(violation < prob.tol))


def pseudo_labels_and_confidences(plan: TransportPlan
                                  ) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample argmax class of the coupling (lowest index wins ties) and
    the transported mass at that entry."""
    labels = plan.pi.argmax(axis=0)
    conf = plan.pi[labels, np.arange(plan.pi.shape[1])]
    return labels, conf


def partition(pseudo_labels: np.ndarray, confidences: np.ndarray,
              observed_labels: np.ndarray, delta: float) -> PartitionResult:
    """Reliable = pseudo-label agrees with the observed label and confidence
    reaches delta; everything else is unreliable."""
    pseudo_labels = np.asarray(pseudo_labels)
    observed_labels = np.asarray(observed_labels)
    if pseudo_labels.shape != observed_labels.shape or \
            pseudo_labels.shape != np.shape(confidences):
        raise DimensionError("label/confidence arrays must share a shape")
    ok = (pseudo_labels == observed_labels) & (confidences >= delta)
    idx = np.arange(pseudo_labels.size)
    return PartitionResult(
        pseudo_labels=pseudo_labels,
        confidences=np.asarray(confidences, dtype=np.float64),
        reliable=idx[ok],
        unreliable=idx[~ok],
        delta=float(delta),
    )


def partition_from_features(text_feats: np.ndarray, image_feats: np.ndarray,
                            observed_labels: np.ndarray, tau: float,
                            epsilon: float = DEFAULT_EPSILON,
                            delta_rel: float = 0.5,
                            delta_abs: float | None = None,
                            max_iters: int = DEFAULT_MAX_ITERS,
                            tol: float = DEFAULT_TOL
                            ) -> tuple[PartitionResult, TransportPlan]:
    """End-to-end reliability split from frozen feature matrices.

    The confidence threshold defaults to `delta_rel * max(b)` (confidences
    live on the scale of a sample's column mass 1/N); pass `delta_abs` to
    override with an absolute value.
    """
    n_classes, n_samples = text_feats.shape[0], image_feats.shape[0]
    sim = similarity_matrix(text_feats, image_feats, tau)
    cost = cost_matrix(sim)
    a, b = uniform_marginals(n_classes, n_samples)
    plan = sinkhorn(TransportProblem(cost=cost, a=a, b=b, epsilon=epsilon,
                                     max_iters=max_iters, tol=tol))
    pseudo, conf = pseudo_labels_and_confidences(plan)
    delta = delta_abs if delta_abs is not None else delta_rel * float(b.max())
    return partition(pseudo, conf, observed_labels, delta), plan
