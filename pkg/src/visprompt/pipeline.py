"""Vision-guided prompt pipeline: forward pass and hand-written gradients.

Data flow for one sample (class-shared context, "full" variant):

    visual tokens V --(visual projection)--> Z
    context C, Z --(layer norm + multi-head cross attention)--> A
    C, A --(feature-wise modulation + token gate + residual + FFN)--> C_hat
    C_hat + class embedding --(frozen text stand-in)--> per-class features
    V --(frozen image stand-in)--> image feature
    cosine similarities / tau --(softmax)--> class probabilities

The frozen stand-in encoders replace pretrained towers at desk scale: the
text side mean-pools prompt+class tokens through a fixed linear map, the
image side mean-pools visual tokens through another fixed linear map; both
L2-normalize into a shared space so classification stays cosine-based.
Everything trainable has an analytic backward pass validated against
central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import kernels as K
from .errors import (ConfigError, DegenerateInputError, DimensionError,
                     StateError)

VARIANT_NO_VISION = "no-vision"
VARIANT_NO_FILM = "vision-no-film"
VARIANT_FULL = "full"
VARIANTS = (VARIANT_NO_VISION, VARIANT_NO_FILM, VARIANT_FULL)

MODE_SHARED = "class-shared"
MODE_SPECIFIC = "class-specific"

CTX_INIT_STD = 0.02


@dataclass
class ModelDims:
    """Static layer sizes. `heads` must divide `embed_dim`."""

    embed_dim: int = 32      # prompt/text token width
    visual_dim: int = 48     # raw visual token width
    shared_dim: int = 24     # shared similarity space width
    n_ctx: int = 16          # learnable context tokens
    heads: int = 8
    ffn_dim: int = 0         # 0 -> 2 * embed_dim

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 2 * self.embed_dim
        if self.n_ctx < 1:
            raise ConfigError("n_ctx must be >= 1")
        if self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})")


@dataclass
class ContextBank:
    """Learnable prompt context; the model's trainable heart.

    `tokens` is (n_ctx, d) when class-shared or (K, n_ctx, d) when
    class-specific.
    """

    mode: str
    tokens: np.ndarray

    def __post_init__(self):
        if self.mode not in (MODE_SHARED, MODE_SPECIFIC):
            raise ConfigError(f"unknown context mode: {self.mode}")
        expected = 2 if self.mode == MODE_SHARED else 3
        if self.tokens.ndim != expected:
            raise DimensionError(
                f"{self.mode} context must be {expected}-D, "
                f"got shape {self.tokens.shape}")

    @property
    def n_ctx(self) -> int:
        return self.tokens.shape[-2]


@dataclass
class PipelineParams:
    """All trainable weights apart from the context tokens."""

    w_visual: np.ndarray          # (d_v, d) visual projection
    w_query: np.ndarray           # (d, d)
    w_key: np.ndarray             # (d, d)
    w_value: np.ndarray           # (d, d)
    w_out: np.ndarray             # (d, d)
    heads: int
    w_gamma: np.ndarray           # (d, d) modulation scale map
    b_gamma: np.ndarray           # (d,)
    w_beta: np.ndarray            # (d, d) modulation shift map
    b_beta: np.ndarray            # (d,)
    w_gate: np.ndarray            # (d, d) token gate map
    b_gate: np.ndarray            # (d,)
    w_ffn1: np.ndarray            # (d, d_ff)
    b_ffn1: np.ndarray            # (d_ff,)
    w_ffn2: np.ndarray            # (d_ff, d)
    b_ffn2: np.ndarray            # (d,)


@dataclass
class FrozenEncoders:
    """Frozen stand-in encoder weights; never receive gradient updates."""

    class_embed: np.ndarray       # (K, d) class-name token embeddings
    text_proj: np.ndarray         # (d, d_s)
    image_proj: np.ndarray        # (d_v, d_s)
    tau: float
    seed: int

    @property
    def n_classes(self) -> int:
        return self.class_embed.shape[0]


@dataclass
class PipelineOutput:
    """Forward results plus cached intermediates for the backward pass."""

    attended: np.ndarray | None   # cross-modal feature(s)
    modulated: np.ndarray         # image-conditioned context
    gate: np.ndarray | None
    text_feats: np.ndarray        # (K, d_s), unit rows
    image_feat: np.ndarray        # (d_s,), unit norm
    probs: np.ndarray             # (K,)
    variant: str
    cache: dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def logits(self) -> np.ndarray:
        return self.cache["logits"]


# ---------------------------------------------------------------------------
# Initialization.  Draw order (context, params, encoders) is part of the
# determinism contract: identical seeds give bit-identical models.
# ---------------------------------------------------------------------------

def init_context(dims: ModelDims, n_classes: int, mode: str = MODE_SHARED,
                 rng: np.random.Generator | None = None,
                 seed: int = 0) -> ContextBank:
    rng = rng if rng is not None else np.random.default_rng(seed)
    if mode == MODE_SHARED:
        shape = (dims.n_ctx, dims.embed_dim)
    else:
        shape = (n_classes, dims.n_ctx, dims.embed_dim)
    return ContextBank(mode=mode, tokens=rng.normal(0.0, CTX_INIT_STD, shape))


GATE_BIAS_INIT = -1.0      # gates open from ~0.27 as training warrants
ATTN_OUT_SCALE = 0.02      # keeps the injected branch small at init


def init_params(dims: ModelDims, rng: np.random.Generator | None = None,
                seed: int = 0) -> PipelineParams:
    """Seeded trainable weights.

    The injection branches start nearly closed (small attention output
    projection, zero FFN output layer, negative gate bias): normalized
    context rows are ~sqrt(d) times larger than the raw context, so an
    unscaled injection would drown the class signal in the pooled text
    feature before training has said anything.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    d, d_v, d_ff = dims.embed_dim, dims.visual_dim, dims.ffn_dim

    def w(rows, cols, fan_in, scale=1.0):
        return rng.normal(0.0, scale / np.sqrt(fan_in), (rows, cols))

    return PipelineParams(
        w_visual=w(d_v, d, d_v),
        w_query=w(d, d, d), w_key=w(d, d, d),
        w_value=w(d, d, d), w_out=w(d, d, d, ATTN_OUT_SCALE),
        heads=dims.heads,
        w_gamma=w(d, d, d), b_gamma=np.zeros(d),
        w_beta=w(d, d, d), b_beta=np.zeros(d),
        w_gate=w(d, d, d), b_gate=np.full(d, GATE_BIAS_INIT),
        w_ffn1=w(d, d_ff, d), b_ffn1=np.zeros(d_ff),
        w_ffn2=np.zeros((d_ff, d)), b_ffn2=np.zeros(d),
    )


ALIGN_NOISE = 2.0


def init_encoders(dims: ModelDims, n_classes: int, tau: float = 0.07,
                  rng: np.random.Generator | None = None, seed: int = 0,
                  class_directions: np.ndarray | None = None,
                  align_noise: float = ALIGN_NOISE) -> FrozenEncoders:
    """Seeded frozen stand-in encoders.

    A pretrained backbone brings zero-shot alignment: the text feature of a
    class name sits near that class's image features in the shared space.
    When `class_directions` (one unit vector per class in visual space) is
    given, the class embeddings are built to reproduce that property up to
    seeded noise; without it they are purely random and the shared space
    carries no prior class structure.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    d, d_v, d_s = dims.embed_dim, dims.visual_dim, dims.shared_dim
    text_proj = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d_s))
    image_proj = rng.normal(0.0, 1.0 / np.sqrt(d_v), (d_v, d_s))
    if class_directions is None:
        class_embed = rng.normal(0.0, 1.0 / np.sqrt(d), (n_classes, d))
    else:
        if class_directions.shape != (n_classes, d_v):
            raise DimensionError("class_directions must be (n_classes, d_v)")
        targets = class_directions @ image_proj
        targets /= np.linalg.norm(targets, axis=1, keepdims=True)
        targets += align_noise * rng.normal(0.0, 1.0 / np.sqrt(d_s),
                                            targets.shape)
        # Min-norm lift so that class_embed @ text_proj points at the target.
        class_embed = targets @ np.linalg.pinv(text_proj)
        class_embed /= np.linalg.norm(class_embed, axis=1, keepdims=True)
    return FrozenEncoders(
        class_embed=class_embed,
        text_proj=text_proj,
        image_proj=image_proj,
        tau=tau,
        seed=seed,
    )


def init_model(dims: ModelDims, n_classes: int, mode: str = MODE_SHARED,
               tau: float = 0.07, seed: int = 0,
               class_directions: np.ndarray | None = None,
               align_noise: float = ALIGN_NOISE
               ) -> tuple[ContextBank, PipelineParams, FrozenEncoders]:
    """Seeded construction of context, trainable weights and frozen encoders."""
    rng = np.random.default_rng(seed)
    ctx = init_context(dims, n_classes, mode, rng=rng)
    params = init_params(dims, rng=rng)
    enc = init_encoders(dims, n_classes, tau, rng=rng, seed=seed,
                        class_directions=class_directions,
                        align_noise=align_noise)
    return ctx, params, enc


TRAINABLE_PARAM_FIELDS = (
    "w_visual", "w_query", "w_key", "w_value", "w_out",
    "w_gamma", "b_gamma", "w_beta", "b_beta", "w_gate", "b_gate",
    "w_ffn1", "b_ffn1", "w_ffn2", "b_ffn2",
)


def trainable_arrays(ctx: ContextBank,
                     params: PipelineParams) -> dict[str, np.ndarray]:
    """Live views of every trainable array, keyed by name."""
    out = {"ctx_tokens": ctx.tokens}
    for name in TRAINABLE_PARAM_FIELDS:
        out[name] = getattr(params, name)
    return out


def parameter_counts(ctx: ContextBank, params: PipelineParams,
                     enc: FrozenEncoders) -> dict[str, int]:
    trainable = sum(a.size for a in trainable_arrays(ctx, params).values())
    frozen = enc.class_embed.size + enc.text_proj.size + enc.image_proj.size
    return {"trainable": int(trainable), "frozen": int(frozen)}


def zero_grads(ctx: ContextBank,
               params: PipelineParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(a)
            for name, a in trainable_arrays(ctx, params).items()}


# ---------------------------------------------------------------------------
# Elementary pipeline operations
# ---------------------------------------------------------------------------

def project_visual_tokens(tokens: np.ndarray,
                          w_visual: np.ndarray) -> np.ndarray:
    """Map raw visual tokens into the prompt embedding space."""
    return K.matmul(tokens, w_visual)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    rows, d = x.shape
    return x.reshape(rows, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, rows, dh = x.shape
    return x.transpose(1, 0, 2).reshape(rows, heads * dh)


def cross_modal_attend(ctx_tokens: np.ndarray, projected: np.ndarray,
                       params: PipelineParams,
                       cache: dict | None = None) -> np.ndarray:
    """Multi-head attention with normalized context as queries and
    normalized projected visual tokens as keys and values."""
    if projected.shape[0] == 0:
        raise DegenerateInputError("no visual tokens to attend over")
    d = ctx_tokens.shape[1]
    if d % params.heads != 0:
        raise DimensionError("heads must divide the embedding dim")
    cn = K.layer_norm_rows(ctx_tokens)
    zn = K.layer_norm_rows(projected)
    q = cn @ params.w_query
    k = zn @ params.w_key
    v = zn @ params.w_value
    q3, k3, v3 = (_split_heads(x, params.heads) for x in (q, k, v))
    scale = 1.0 / np.sqrt(d // params.heads)
    scores = (q3 @ k3.transpose(0, 2, 1)) * scale        # (H, n_ctx, M)
    shifted = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=2, keepdims=True)
    o3 = attn @ v3
    merged = _merge_heads(o3)
    out = merged @ params.w_out
    if cache is not None:
        cache.update(cn=cn, zn=zn, q3=q3, k3=k3, v3=v3, attn=attn,
                     merged=merged, scores=scores, scale=scale)
    return out


def _attention_backward(d_attended: np.ndarray, cache: dict,
                        params: PipelineParams
                        ) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Backward through cross_modal_attend.

    Returns gradients w.r.t. the *normalized* context and projected tokens
    (the layer-norm VJPs are applied by the caller) plus parameter grads.
    """
    cn, zn = cache["cn"], cache["zn"]
    q3, k3, v3, attn = cache["q3"], cache["k3"], cache["v3"], cache["attn"]
    scale = cache["scale"]

    d_merged = d_attended @ params.w_out.T
    dw_out = cache["merged"].T @ d_attended
    do3 = _split_heads(d_merged, params.heads)
    d_attn = do3 @ v3.transpose(0, 2, 1)
    dv3 = attn.transpose(0, 2, 1) @ do3
    inner = (d_attn * attn).sum(axis=2, keepdims=True)
    d_scores = attn * (d_attn - inner)
    dq3 = (d_scores @ k3) * scale
    dk3 = (d_scores.transpose(0, 2, 1) @ q3) * scale
    dq, dk, dv = _merge_heads(dq3), _merge_heads(dk3), _merge_heads(dv3)

    d_cn = dq @ params.w_query.T
    d_zn = dk @ params.w_key.T + dv @ params.w_value.T
    grads = {
        "w_out": dw_out,
        "w_query": cn.T @ dq,
        "w_key": zn.T @ dk,
        "w_value": zn.T @ dv,
    }
    return d_cn, d_zn, grads


def film_modulate(ctx_tokens: np.ndarray, attended: np.ndarray,
                  params: PipelineParams) -> np.ndarray:
    """Feature-wise adjustment of the normalized context: scale by
    (1 + gamma(A)) and shift by beta(A), both linear in the attended feature."""
    cn = K.layer_norm_rows(ctx_tokens)
    gamma = attended @ params.w_gamma + params.b_gamma
    beta = attended @ params.w_beta + params.b_beta
    return cn * (1.0 + gamma) + beta


def compute_gate(attended: np.ndarray, params: PipelineParams) -> np.ndarray:
    """Token-wise sigmoid gate controlling how much modulation is injected."""
    return K.sigmoid(attended @ params.w_gate + params.b_gate)


def gated_residual_update(ctx_tokens: np.ndarray, modulated: np.ndarray,
                          gate: np.ndarray) -> np.ndarray:
    """Elementwise convex blend: gate 0 keeps the context, 1 takes the
    modulated version."""
    if not (ctx_tokens.shape == modulated.shape == gate.shape):
        raise DimensionError("gated update requires equal shapes")
    return ctx_tokens + gate * (modulated - ctx_tokens)


def ffn_refine(ctx_prime: np.ndarray, params: PipelineParams) -> np.ndarray:
    """Residual two-layer feed-forward refinement applied per token."""
    h = K.gelu(K.layer_norm_rows(ctx_prime) @ params.w_ffn1 + params.b_ffn1)
    return ctx_prime + h @ params.w_ffn2 + params.b_ffn2


def encode_text_standin(ctx_final: np.ndarray, class_idx: int,
                        enc: FrozenEncoders) -> np.ndarray:
    """Frozen text stand-in: mean-pool [context; class embedding], project
    into the shared space, L2-normalize.  Differentiable w.r.t. the context."""
    if not 0 <= class_idx < enc.n_classes:
        raise DimensionError(f"class index {class_idx} out of range")
    stacked = np.vstack([ctx_final, enc.class_embed[class_idx]])
    pooled = stacked.mean(axis=0)
    return K.l2_normalize_vec(pooled @ enc.text_proj)


def encode_image_standin(tokens: np.ndarray,
                         enc: FrozenEncoders) -> np.ndarray:
    """Frozen image stand-in: mean-pool visual tokens, project, L2-normalize.
    Never receives gradients."""
    if tokens.shape[0] == 0:
        raise DegenerateInputError("cannot encode an empty token set")
    raw = tokens.mean(axis=0) @ enc.image_proj
    if np.linalg.norm(raw) == 0.0:
        raise DegenerateInputError("pooled image feature is zero")
    return K.l2_normalize_vec(raw)


def class_probabilities(image_feat: np.ndarray, text_feats: np.ndarray,
                        tau: float) -> np.ndarray:
    """Softmax over cosine similarities divided by the temperature."""
    if tau <= 0:
        raise ConfigError("temperature tau must be positive")
    logits = (text_feats @ image_feat) / tau
    return K.softmax_rows(logits.reshape(1, -1))[0]


# ---------------------------------------------------------------------------
# Full forward / backward
# ---------------------------------------------------------------------------

def _modulate(ctx_tokens: np.ndarray, tokens: np.ndarray,
              params: PipelineParams, variant: str) -> tuple[np.ndarray, dict]:
    """Run the vision-conditioning stack for one context matrix."""
    cache: dict[str, Any] = {"ctx": ctx_tokens}
    if variant == VARIANT_NO_VISION:
        return ctx_tokens, cache

    projected = project_visual_tokens(tokens, params.w_visual)
    cache["projected"] = projected
    attended = cross_modal_attend(ctx_tokens, projected, params, cache)
    cache["attended"] = attended

    if variant == VARIANT_NO_FILM:
        return ctx_tokens + attended, cache

    cn = cache["cn"]
    gamma = attended @ params.w_gamma + params.b_gamma
    modulated = cn * (1.0 + gamma) + (attended @ params.w_beta + params.b_beta)
    gate_pre = attended @ params.w_gate + params.b_gate
    gate = K.sigmoid(gate_pre)
    blended = ctx_tokens + gate * (modulated - ctx_tokens)

    normed = K.layer_norm_rows(blended)
    pre_act = normed @ params.w_ffn1 + params.b_ffn1
    hidden = K.gelu(pre_act)
    final = blended + hidden @ params.w_ffn2 + params.b_ffn2

    cache.update(gamma=gamma, modulated=modulated, gate=gate,
                 blended=blended, normed=normed, pre_act=pre_act,
                 hidden=hidden)
    return final, cache


def _modulate_backward(d_final: np.ndarray, cache: dict,
                       params: PipelineParams, variant: str,
                       grads: dict[str, np.ndarray]) -> np.ndarray:
    """Backward through _modulate; accumulates into `grads`, returns dC."""
    if variant == VARIANT_NO_VISION:
        return d_final

    ctx_tokens = cache["ctx"]
    if variant == VARIANT_NO_FILM:
        d_ctx_direct = d_final
        d_attended = d_final
    else:
        # FFN refinement
        hidden, pre_act = cache["hidden"], cache["pre_act"]
        d_hidden = d_final @ params.w_ffn2.T
        grads["w_ffn2"] += hidden.T @ d_final
        grads["b_ffn2"] += d_final.sum(axis=0)
        d_pre = K.gelu_vjp(pre_act, d_hidden)
        grads["w_ffn1"] += cache["normed"].T @ d_pre
        grads["b_ffn1"] += d_pre.sum(axis=0)
        d_blended = d_final + K.layer_norm_rows_vjp(
            cache["blended"], d_pre @ params.w_ffn1.T)

        # gated residual blend
        gate, modulated = cache["gate"], cache["modulated"]
        d_ctx_direct = d_blended * (1.0 - gate)
        d_modulated = d_blended * gate
        d_gate = d_blended * (modulated - ctx_tokens)
        d_gate_pre = d_gate * gate * (1.0 - gate)
        attended = cache["attended"]
        grads["w_gate"] += attended.T @ d_gate_pre
        grads["b_gate"] += d_gate_pre.sum(axis=0)

        # feature-wise modulation
        cn, gamma = cache["cn"], cache["gamma"]
        d_cn_film = d_modulated * (1.0 + gamma)
        d_gamma = d_modulated * cn
        grads["w_gamma"] += attended.T @ d_gamma
        grads["b_gamma"] += d_gamma.sum(axis=0)
        grads["w_beta"] += attended.T @ d_modulated
        grads["b_beta"] += d_modulated.sum(axis=0)

        d_attended = (d_gate_pre @ params.w_gate.T
                      + d_gamma @ params.w_gamma.T
                      + d_modulated @ params.w_beta.T)

    d_cn, d_zn, attn_grads = _attention_backward(d_attended, cache, params)
    for name, g in attn_grads.items():
        grads[name] += g
    if variant == VARIANT_FULL:
        d_cn = d_cn + d_cn_film

    d_projected = K.layer_norm_rows_vjp(cache["projected"], d_zn)
    grads["w_visual"] += cache["tokens"].T @ d_projected
    return d_ctx_direct + K.layer_norm_rows_vjp(ctx_tokens, d_cn)


def forward(tokens: np.ndarray, ctx: ContextBank, params: PipelineParams,
            enc: FrozenEncoders, variant: str = VARIANT_FULL) -> PipelineOutput:
    """Run the full per-sample pipeline and cache intermediates for backward."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant: {variant!r}")
    tokens = K.as_matrix(tokens, "visual tokens")
    n_classes = enc.n_classes

    if ctx.mode == MODE_SHARED:
        ctx_final, mod_cache = _modulate(ctx.tokens, tokens, params, variant)
        mod_cache["tokens"] = tokens
        mod_caches = [mod_cache]
        per_class_ctx = [ctx_final] * n_classes
    else:
        mod_caches, per_class_ctx = [], []
        for k in range(n_classes):
            ctx_final_k, cache_k = _modulate(
                ctx.tokens[k], tokens, params, variant)
            cache_k["tokens"] = tokens
            mod_caches.append(cache_k)
            per_class_ctx.append(ctx_final_k)

    text_raw = np.empty((n_classes, enc.text_proj.shape[1]))
    for k in range(n_classes):
        stacked = np.vstack([per_class_ctx[k], enc.class_embed[k]])
        text_raw[k] = stacked.mean(axis=0) @ enc.text_proj
    text_feats = K.l2_normalize_rows(text_raw)

    image_feat = encode_image_standin(tokens, enc)
    logits = (text_feats @ image_feat) / enc.tau
    probs = K.softmax_rows(logits.reshape(1, -1))[0]

    first = mod_caches[0]
    out = PipelineOutput(
        attended=first.get("attended"),
        modulated=(per_class_ctx[0] if ctx.mode == MODE_SHARED
                   else np.stack(per_class_ctx)),
        gate=first.get("gate"),
        text_feats=text_feats,
        image_feat=image_feat,
        probs=probs,
        variant=variant,
        cache={
            "mode": ctx.mode,
            "mod_caches": mod_caches,
            "per_class_ctx": per_class_ctx,
            "text_raw": text_raw,
            "logits": logits,
            "n_ctx": ctx.n_ctx,
            "tau": enc.tau,
            "text_proj": enc.text_proj,
        },
    )
    return out


def backward(out: PipelineOutput, upstream_grad: np.ndarray,
             ctx: ContextBank, params: PipelineParams
             ) -> dict[str, np.ndarray]:
    """Analytic gradients of (upstream_grad . probs) for all trainables.

    `upstream_grad` is dLoss/dprobs.  Frozen encoder weights receive no
    gradient by construction.
    """
    if not out.cache or "mod_caches" not in out.cache:
        raise StateError("backward requires the forward cache")
    cache = out.cache
    probs = out.probs
    grads = zero_grads(ctx, params)

    d_logits = probs * (upstream_grad - float(upstream_grad @ probs))
    d_sims = d_logits / cache["tau"]
    d_text = d_sims[:, None] * out.image_feat[None, :]
    d_text_raw = K.l2_normalize_rows_vjp(cache["text_raw"], d_text)

    # Mean-pooling over [context; class embedding] spreads each class's
    # pooled gradient evenly over the n_ctx context rows; the class
    # embedding rows are frozen and their share is dropped.
    n_ctx = cache["n_ctx"]
    text_proj = cache["text_proj"]
    mod_caches = cache["mod_caches"]
    if cache["mode"] == MODE_SHARED:
        d_pooled = d_text_raw.sum(axis=0) @ text_proj.T
        d_ctx_final = np.tile(d_pooled / (n_ctx + 1), (n_ctx, 1))
        grads["ctx_tokens"] += _modulate_backward(
            d_ctx_final, mod_caches[0], params, out.variant, grads)
    else:
        for k, mod_cache in enumerate(mod_caches):
            d_pooled = d_text_raw[k] @ text_proj.T
            d_ctx_final = np.tile(d_pooled / (n_ctx + 1), (n_ctx, 1))
            grads["ctx_tokens"][k] += _modulate_backward(
                d_ctx_final, mod_cache, params, out.variant, grads)
    return grads
