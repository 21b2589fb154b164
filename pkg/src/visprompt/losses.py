"""Subset-routed robust loss: cross-entropy on reliable samples, generalized
cross-entropy on unreliable ones, mixed by a coefficient alpha.

Generalized cross-entropy (1 - p^q)/q interpolates between plain CE (q -> 0)
and mean absolute error (q = 1); its gradient magnitude p^(q-1) stays bounded
as p -> 0 relative to CE's 1/p, which is what blunts the pull of mislabeled
samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PartitionError

PROB_CLAMP = 1e-12

ALPHA_FIXED = "fixed"
ALPHA_ADAPTIVE = "adaptive"


@dataclass
class LossConfig:
    q: float = 0.7
    alpha_mode: str = ALPHA_ADAPTIVE
    alpha_value: float = 0.5   # used only when alpha_mode == "fixed"

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"q must lie in (0, 1], got {self.q}")
        if self.alpha_mode not in (ALPHA_FIXED, ALPHA_ADAPTIVE):
            raise ConfigError(f"unknown alpha mode: {self.alpha_mode}")
        if self.alpha_mode == ALPHA_FIXED and not 0.0 <= self.alpha_value <= 1.0:
            raise ConfigError("fixed alpha must lie in [0, 1]")


@dataclass
class ClampDiagnostics:
    """Counts how often a zero probability had to be clamped before log/pow."""

    count: int = 0

    def reset(self):
        self.count = 0


clamp_diagnostics = ClampDiagnostics()


def _label_probs(probs: np.ndarray, labels: np.ndarray,
                 subset: np.ndarray) -> np.ndarray:
    p = probs[subset, labels[subset]]
    low = p < PROB_CLAMP
    if np.any(low):
        clamp_diagnostics.count += int(low.sum())
        p = np.maximum(p, PROB_CLAMP)
    return p


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray,
                       subset: np.ndarray) -> float:
    """Mean negative log-probability of the observed label over `subset`.

    An empty subset contributes 0 by convention.
    """
    subset = np.asarray(subset, dtype=np.intp)
    if subset.size == 0:
        return 0.0
    return float(-np.mean(np.log(_label_probs(probs, labels, subset))))


def gce_loss(probs: np.ndarray, labels: np.ndarray, subset: np.ndarray,
             q: float) -> float:
    """Mean generalized cross-entropy (1 - p^q)/q over `subset`."""
    if not 0.0 < q <= 1.0:
        raise ConfigError(f"q must lie in (0, 1], got {q}")
    subset = np.asarray(subset, dtype=np.intp)
    if subset.size == 0:
        return 0.0
    p = _label_probs(probs, labels, subset)
    return float(np.mean((1.0 - p ** q) / q))


def _check_partition(n: int, reliable: np.ndarray, unreliable: np.ndarray):
    combined = np.concatenate([reliable, unreliable])
    if combined.size != n or np.unique(combined).size != n or (
            combined.size and (combined.min() < 0 or combined.max() >= n)):
        raise PartitionError(
            "reliable/unreliable subsets must disjointly cover all samples")


def resolve_alpha(cfg: LossConfig, n_reliable: int, n_unreliable: int) -> float:
    if cfg.alpha_mode == ALPHA_FIXED:
        return cfg.alpha_value
    total = n_reliable + n_unreliable
    return n_reliable / total if total else 1.0


def robust_loss(probs: np.ndarray, labels: np.ndarray, partition,
                cfg: LossConfig) -> float:
    """alpha * CE(reliable) + (1 - alpha) * GCE(unreliable)."""
    reliable = np.asarray(partition.reliable, dtype=np.intp)
    unreliable = np.asarray(partition.unreliable, dtype=np.intp)
    _check_partition(len(labels), reliable, unreliable)
    alpha = resolve_alpha(cfg, reliable.size, unreliable.size)
    return (alpha * cross_entropy_loss(probs, labels, reliable)
            + (1.0 - alpha) * gce_loss(probs, labels, unreliable, cfg.q))


def loss_gradient(probs: np.ndarray, labels: np.ndarray, partition,
                  cfg: LossConfig) -> np.ndarray:
    """Gradient of robust_loss w.r.t. every per-sample probability.

    Only the observed-label column of each sample is nonzero:
    CE contributes -alpha / (|reliable| * p), GCE contributes
    -(1 - alpha) * p^(q-1) / |unreliable|.
    """
    reliable = np.asarray(partition.reliable, dtype=np.intp)
    unreliable = np.asarray(partition.unreliable, dtype=np.intp)
    _check_partition(len(labels), reliable, unreliable)
    alpha = resolve_alpha(cfg, reliable.size, unreliable.size)

    grad = np.zeros_like(probs)
    if reliable.size and alpha > 0.0:
        p = _label_probs(probs, labels, reliable)
        grad[reliable, labels[reliable]] = -alpha / (reliable.size * p)
    if unreliable.size and alpha < 1.0:
        p = _label_probs(probs, labels, unreliable)
        grad[unreliable, labels[unreliable]] = (
            -(1.0 - alpha) * p ** (cfg.q - 1.0) / unreliable.size)
    return grad
