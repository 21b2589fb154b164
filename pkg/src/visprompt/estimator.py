"""Scikit-learn style estimator wrapping the full training loop.

`X` is a (n_samples, n_tokens, token_dim) array of per-sample visual token
matrices; `y` holds integer class labels (possibly noisy).  The estimator
trains the prompt context and modulation weights with transport-based loss
routing and predicts through the frozen stand-in encoders.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import pipeline as P
from . import train as T
from .data import FeatureDataset, Provenance, estimate_class_directions
from .errors import ConfigError, DimensionError
from .losses import LossConfig


def validate_tokens(X) -> np.ndarray:
    """Coerce X to a finite float64 (n_samples, n_tokens, token_dim) array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise DimensionError(
            f"X must be (n_samples, n_tokens, token_dim), got shape {X.shape}")
    if X.shape[0] == 0:
        raise DimensionError("X must contain at least one sample")
    if not np.all(np.isfinite(X)):
        raise ConfigError("X contains non-finite values")
    return X


def validate_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise DimensionError(
            f"y must be ({n_samples},), got shape {y.shape}")
    return y


class VisPromptClassifier(BaseEstimator, ClassifierMixin):
    """Noise-robust prompt-learning classifier over visual token features.

    Parameters mirror the training configuration; see `fit` for the data
    contract.  All randomness flows from `random_state`.
    """

    def __init__(self, variant: str = P.VARIANT_FULL, routing: str = T.ROUTE_OT,
                 epochs: int = 60, batch_size: int = 16, lr0: float = 0.002,
                 warmup_epochs: int = 1, partition_refresh: int = 1,
                 n_ctx: int = 16, embed_dim: int = 32, shared_dim: int = 24,
                 heads: int = 8, tau: float = 0.07, q: float = 0.7,
                 alpha_mode: str = "adaptive", alpha_value: float = 0.5,
                 epsilon: float = 0.05, delta_rel: float = 0.5,
                 ctx_mode: str = P.MODE_SHARED,
                 align_noise: float = P.ALIGN_NOISE, random_state: int = 0):
        self.variant = variant
        self.routing = routing
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.warmup_epochs = warmup_epochs
        self.partition_refresh = partition_refresh
        self.n_ctx = n_ctx
        self.embed_dim = embed_dim
        self.shared_dim = shared_dim
        self.heads = heads
        self.tau = tau
        self.q = q
        self.alpha_mode = alpha_mode
        self.alpha_value = alpha_value
        self.epsilon = epsilon
        self.delta_rel = delta_rel
        self.ctx_mode = ctx_mode
        self.align_noise = align_noise
        self.random_state = random_state

    def _config(self, token_dim: int) -> T.TrainConfig:
        dims = P.ModelDims(embed_dim=self.embed_dim, visual_dim=token_dim,
                           shared_dim=self.shared_dim, n_ctx=self.n_ctx,
                           heads=self.heads)
        return T.TrainConfig(
            lr0=self.lr0, epochs=self.epochs, batch=self.batch_size,
            warmup_epochs=self.warmup_epochs,
            partition_refresh=self.partition_refresh,
            variant=self.variant, routing=self.routing,
            loss=LossConfig(q=self.q, alpha_mode=self.alpha_mode,
                            alpha_value=self.alpha_value),
            epsilon=self.epsilon, delta_rel=self.delta_rel,
            ctx_mode=self.ctx_mode, tau=self.tau,
            align_noise=self.align_noise, dims=dims, seed=self.random_state)

    def fit(self, X, y):
        X = validate_tokens(X)
        y = validate_labels(y, X.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ConfigError("need at least 2 classes")

        ds = FeatureDataset(tokens=X, clean_labels=encoded,
                            observed_labels=encoded.copy(),
                            n_classes=self.classes_.size,
                            provenance=Provenance("ingested", "array"))
        cfg = self._config(X.shape[2])
        directions = estimate_class_directions(ds)
        state = T.init_state(cfg, ds.n_classes, directions)
        state.total_steps = max(
            1, cfg.epochs * int(np.ceil(ds.n_samples / cfg.batch)))
        image_feats = T.frozen_image_features(ds, state.enc)
        part = T._trivial_partition(ds.n_samples, False, ds.observed_labels)
        for epoch in range(cfg.epochs):
            if cfg.routing != T.ROUTE_OT:
                part = T.refresh_partition(state, ds, cfg, image_feats)
            elif epoch >= cfg.warmup_epochs and \
                    (epoch - cfg.warmup_epochs) % cfg.partition_refresh == 0:
                part = T.refresh_partition(state, ds, cfg, image_feats)
            T.train_epoch(state, ds, part, cfg)

        self.state_ = state
        self.n_features_in_ = X.shape[1] * X.shape[2]
        self.token_shape_ = X.shape[1:]
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError(
                "this VisPromptClassifier instance is not fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        X = validate_tokens(X)
        if X.shape[2] != self.token_shape_[1]:
            raise DimensionError(
                f"token_dim {X.shape[2]} != fitted {self.token_shape_[1]}")
        probs = np.empty((X.shape[0], self.classes_.size))
        for i in range(X.shape[0]):
            out = P.forward(X[i], self.state_.ctx, self.state_.params,
                            self.state_.enc, self.variant)
            probs[i] = out.probs
        return probs

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
