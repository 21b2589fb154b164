"""Finite-difference validation of the pipeline's hand-written gradients."""

from __future__ import annotations

import numpy as np

from . import kernels as K
from . import pipeline as P

# Small layer sizes keep the coordinate-wise oracle fast while exercising
# every code path (multiple heads, rectangular projections).
CHECK_DIMS = P.ModelDims(embed_dim=8, visual_dim=6, shared_dim=5,
                         n_ctx=3, heads=2)
CHECK_CLASSES = 3
CHECK_TOKENS = 3


def pipeline_gradient_errors(variant: str, seed: int,
                             dims: P.ModelDims | None = None,
                             n_classes: int = CHECK_CLASSES,
                             n_tokens: int = CHECK_TOKENS,
                             mode: str = P.MODE_SHARED,
                             tau: float = 1.0,
                             h: float = 1e-5) -> dict[str, float]:
    """Relative error per trainable tensor between analytic and central
    finite-difference gradients of a random linear functional of the
    output probabilities.

    The default temperature of 1.0 keeps the class softmax away from
    saturation, where true gradients shrink below the oracle's own
    roundoff floor and relative comparison stops being informative.
    """
    dims = dims if dims is not None else CHECK_DIMS
    ctx, params, enc = P.init_model(dims, n_classes, mode=mode, tau=tau,
                                    seed=seed)
    rng = np.random.default_rng(seed + 7919)
    # Jitter every weight so paths that initialize at zero (FFN output,
    # near-closed gates) are active and actually get validated.
    for arr in P.trainable_arrays(ctx, params).values():
        arr += rng.normal(0.0, 0.2, arr.shape)
    tokens = rng.normal(0.0, 1.0, (n_tokens, dims.visual_dim))
    upstream = rng.normal(0.0, 1.0, n_classes)

    out = P.forward(tokens, ctx, params, enc, variant)
    analytic = P.backward(out, upstream, ctx, params)

    errors: dict[str, float] = {}
    for name, arr in P.trainable_arrays(ctx, params).items():
        def objective(x, _arr=arr):
            saved = _arr.copy()
            _arr[...] = x
            try:
                probe = P.forward(tokens, ctx, params, enc, variant)
                return float(upstream @ probe.probs)
            finally:
                _arr[...] = saved

        numeric = K.central_diff_gradient(objective, arr, h=h)
        errors[name] = K.relative_error(analytic[name], numeric)
    return errors


def max_gradient_error(variant: str, seeds: list[int] | tuple[int, ...],
                       **kwargs) -> float:
    """Worst relative gradient error across seeds for one variant."""
    worst = 0.0
    for seed in seeds:
        errs = pipeline_gradient_errors(variant, seed, **kwargs)
        worst = max(worst, max(errs.values()))
    return worst
