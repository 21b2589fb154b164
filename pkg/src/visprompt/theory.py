"""Numerical verification of the robustness analysis.

The claims under test, in finite-dimensional form:

  * the softmax mass on irrelevant tokens is at most |irrelevant| * exp(-margin);
  * the modulated context built from real tokens stays close to the one
    built from the clean signal alone, with the deviation shrinking in the
    attention margin and growing in the informative-token dispersion;
  * when the logit deviation stays below half the clean logit margin, the
    predicted class cannot change.

Instances are constructed so the attention margin is a controlled quantity:
a single context token serves as the query, identity query/key maps keep
scores interpretable, and distractor tokens are synthesized with exact
score targets sitting `margin` below the weakest informative token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels as K
from . import pipeline as P
from .errors import ConfigError, DegenerateInputError, GenerationError


@dataclass
class TheoryInstance:
    """Measured quantities for one synthetic verification instance."""

    signal: np.ndarray               # clean conditioning signal in prompt space
    informative_idx: np.ndarray
    margin: float                    # realized attention-score margin
    eps_v: float
    distraction: float               # |irrelevant| * max value-vector norm
    lipschitz_mod: float | None = None
    lipschitz_head: float | None = None
    clean_margin: float | None = None   # top-1 minus top-2 clean logit


def attention_margin(scores: np.ndarray, informative_idx) -> float:
    """Min informative score minus max irrelevant score; may be negative."""
    scores = np.asarray(scores, dtype=np.float64)
    informative_idx = np.asarray(informative_idx, dtype=np.intp)
    if informative_idx.size == 0:
        raise DegenerateInputError("informative index set is empty")
    mask = np.zeros(scores.size, dtype=bool)
    mask[informative_idx] = True
    if mask.all():
        raise DegenerateInputError(
            "margin undefined when every token is informative")
    return float(scores[mask].min() - scores[~mask].max())


def irrelevant_mass_bound_check(scores: np.ndarray, informative_idx
                                ) -> tuple[float, float, bool]:
    """Softmax mass on irrelevant tokens vs the |irrelevant|*exp(-margin)
    tail bound; the inequality holds for every finite score vector."""
    scores = np.asarray(scores, dtype=np.float64)
    margin = attention_margin(scores, informative_idx)
    weights = K.softmax_rows(scores.reshape(1, -1))[0]
    mask = np.zeros(scores.size, dtype=bool)
    mask[np.asarray(informative_idx, dtype=np.intp)] = True
    measured = float(weights[~mask].sum())
    bound = float((~mask).sum() * np.exp(-margin))
    return measured, bound, measured <= bound


def empirical_lipschitz(fn: Callable[[np.ndarray], np.ndarray],
                        base: np.ndarray, n_probes: int = 8,
                        radius: float = 0.1, seed: int = 0) -> float:
    """Max pairwise ratio ||fn(x) - fn(y)||_F / ||x - y||_F over seeded
    probes in a ball around `base`; a lower bound on the true constant."""
    if n_probes < 2:
        raise ConfigError("need at least two probes")
    rng = np.random.default_rng(seed)
    probes = [base + radius * rng.normal(0.0, 1.0, base.shape)
              for _ in range(n_probes)]
    values = [np.asarray(fn(p), dtype=np.float64) for p in probes]
    worst = 0.0
    for i in range(n_probes):
        for j in range(i + 1, n_probes):
            dist = float(np.linalg.norm(probes[i] - probes[j]))
            if dist == 0.0:
                continue
            worst = max(worst, float(
                np.linalg.norm(values[i] - values[j])) / dist)
    return worst


# ---------------------------------------------------------------------------
# Controlled instance construction
# ---------------------------------------------------------------------------

@dataclass
class TheoryProblem:
    """A fully specified verification instance."""

    ctx_tokens: np.ndarray           # (1, d) single-query context
    tokens: np.ndarray               # (M, d) visual tokens (visual dim == d)
    informative_idx: np.ndarray
    signal: np.ndarray               # (d,) clean conditioning signal
    eps_v: float
    target_margin: float
    params: P.PipelineParams
    enc: P.FrozenEncoders


def _centered_unit_var(v: np.ndarray) -> np.ndarray:
    v = v - v.mean()
    return v / v.std()


SIGNAL_QUERY_ALIGNMENT = 0.4


def build_theory_problem(margin: float, eps_v: float, seed: int,
                         d: int = 32, shared_dim: int = 24,
                         n_tokens: int = 8, n_informative: int = 5,
                         n_classes: int = 10) -> TheoryProblem:
    """Construct an instance whose realized attention margin equals `margin`.

    One context token gives a single query; query/key maps are the identity
    and the visual projection is square identity, so attention scores are
    plain scaled dot products.  Informative tokens scatter around a clean
    signal aligned with the query; each distractor token is synthesized as
    a zero-mean unit-variance vector whose score lands exactly `margin`
    below the weakest informative score.
    """
    if not 0 < n_informative < n_tokens:
        raise ConfigError("need 0 < n_informative < n_tokens")
    rng = np.random.default_rng(seed)
    dims = P.ModelDims(embed_dim=d, visual_dim=d, shared_dim=shared_dim,
                       n_ctx=1, heads=1)
    ctx = P.init_context(dims, n_classes, P.MODE_SHARED, rng=rng)
    params = P.init_params(dims, rng=rng)
    # Jitter the branches that initialize closed so the modulation map is
    # generic, then pin the attention geometry.
    params.w_ffn2 = rng.normal(0.0, 0.1 / np.sqrt(dims.ffn_dim),
                               params.w_ffn2.shape)
    params.b_gate[...] = 0.0
    params.w_out = np.eye(d)
    params.w_query = np.eye(d)
    params.w_key = np.eye(d)
    params.w_value = np.eye(d)
    params.w_visual = np.eye(d)
    enc = P.init_encoders(dims, n_classes, tau=1.0, rng=rng, seed=seed)

    query = K.layer_norm_rows(ctx.tokens)[0]
    q_unit = _centered_unit_var(query)
    scale = 1.0 / np.sqrt(d)

    def orth_unit_var(v: np.ndarray) -> np.ndarray:
        w = v - v.mean()
        w = w - (w @ q_unit) / (q_unit @ q_unit) * q_unit
        return w / w.std()

    signal = (SIGNAL_QUERY_ALIGNMENT * q_unit
              + np.sqrt(1 - SIGNAL_QUERY_ALIGNMENT ** 2)
              * orth_unit_var(rng.normal(0.0, 1.0, d)))

    tokens = np.empty((n_tokens, d))
    for t in range(n_informative):
        direction = rng.normal(0.0, 1.0, d)
        direction /= np.linalg.norm(direction)
        tokens[t] = signal + eps_v * np.sqrt(d) * direction

    informative_scores = [
        float(query @ K.layer_norm_rows(tokens[t].reshape(1, -1))[0]) * scale
        for t in range(n_informative)]
    target = min(informative_scores) - margin
    # score(mix) = mix_coeff * (query . q_unit) * scale, with the orthogonal
    # component contributing nothing; solve for the mixing coefficient.
    base = float(query @ q_unit) * scale
    coeff = target / base
    if not -0.99 <= coeff <= 0.99:
        raise GenerationError(
            f"margin {margin} unreachable: mixing coefficient {coeff:.3f}")
    for t in range(n_informative, n_tokens):
        w = orth_unit_var(rng.normal(0.0, 1.0, d))
        tokens[t] = coeff * q_unit + np.sqrt(1.0 - coeff ** 2) * w

    return TheoryProblem(
        ctx_tokens=ctx.tokens, tokens=tokens,
        informative_idx=np.arange(n_informative),
        signal=signal, eps_v=eps_v, target_margin=margin,
        params=params, enc=enc)


def _modulated(prob: TheoryProblem, tokens: np.ndarray
               ) -> tuple[np.ndarray, dict]:
    return P._modulate(prob.ctx_tokens, tokens, prob.params, P.VARIANT_FULL)


def modulation_deviation(prob: TheoryProblem
                         ) -> tuple[float, TheoryInstance]:
    """Frobenius distance between the context modulated on all tokens and
    the same modulation conditioned on the clean signal alone."""
    full_ctx, cache = _modulated(prob, prob.tokens)
    ideal_ctx, _ = _modulated(prob, prob.signal.reshape(1, -1))
    dev = float(np.linalg.norm(full_ctx - ideal_ctx))

    scores = cache["scores"][0, 0]           # single head, single query
    margin = attention_margin(scores, prob.informative_idx)
    irrelevant = np.setdiff1d(np.arange(prob.tokens.shape[0]),
                              prob.informative_idx)
    value_norms = np.linalg.norm(
        cache["zn"][irrelevant] @ prob.params.w_value, axis=1)
    instance = TheoryInstance(
        signal=prob.signal,
        informative_idx=prob.informative_idx,
        margin=margin,
        eps_v=prob.eps_v,
        distraction=float(irrelevant.size * value_norms.max()),
    )
    return dev, instance


def _logits_for_ctx(ctx_final: np.ndarray, enc: P.FrozenEncoders,
                    image_feat: np.ndarray) -> np.ndarray:
    """Class logits as a function of the (modulated) context, holding the
    image feature fixed; this is the frozen classifier head."""
    n_classes = enc.n_classes
    raw = np.empty((n_classes, enc.text_proj.shape[1]))
    for k in range(n_classes):
        stacked = np.vstack([ctx_final, enc.class_embed[k]])
        raw[k] = stacked.mean(axis=0) @ enc.text_proj
    feats = K.l2_normalize_rows(raw)
    return (feats @ image_feat) / enc.tau


def margin_preservation_check(prob: TheoryProblem
                              ) -> tuple[bool, bool, TheoryInstance]:
    """Checks the implication: logit deviation below half the clean margin
    forces the argmax to be preserved.

    Returns (premise_held, argmax_preserved, instance); the implication is
    a theorem, so whenever the premise holds preservation must be True.
    """
    dev, instance = modulation_deviation(prob)
    full_ctx, _ = _modulated(prob, prob.tokens)
    ideal_ctx, _ = _modulated(prob, prob.signal.reshape(1, -1))
    image_feat = P.encode_image_standin(prob.tokens, prob.enc)
    logits = _logits_for_ctx(full_ctx, prob.enc, image_feat)
    clean_logits = _logits_for_ctx(ideal_ctx, prob.enc, image_feat)

    top2 = np.sort(clean_logits)[-2:]
    clean_margin = float(top2[1] - top2[0])
    instance.clean_margin = clean_margin
    deviation = float(np.abs(logits - clean_logits).max())
    premise = deviation < clean_margin / 2.0
    preserved = int(np.argmax(logits)) == int(np.argmax(clean_logits))
    return premise, preserved, instance


def estimate_lipschitz_constants(prob: TheoryProblem, n_probes: int = 8,
                                 radius: float = 0.1,
                                 seed: int = 0) -> tuple[float, float]:
    """Empirical (lower-bound) Lipschitz constants of the modulation map
    w.r.t. its conditioning feature and of the classifier head w.r.t. the
    modulated context."""
    _, cache = _modulated(prob, prob.tokens)
    attended = cache["attended"]

    def mod_map(a: np.ndarray) -> np.ndarray:
        cn = cache["cn"]
        gamma = a @ prob.params.w_gamma + prob.params.b_gamma
        beta = a @ prob.params.w_beta + prob.params.b_beta
        modulated = cn * (1.0 + gamma) + beta
        gate = K.sigmoid(a @ prob.params.w_gate + prob.params.b_gate)
        blended = prob.ctx_tokens + gate * (modulated - prob.ctx_tokens)
        return P.ffn_refine(blended, prob.params)

    l_mod = empirical_lipschitz(mod_map, attended, n_probes, radius, seed)

    image_feat = P.encode_image_standin(prob.tokens, prob.enc)
    full_ctx, _ = _modulated(prob, prob.tokens)

    def head_map(c: np.ndarray) -> np.ndarray:
        return _logits_for_ctx(c, prob.enc, image_feat)

    l_head = empirical_lipschitz(head_map, full_ctx, n_probes, radius,
                                 seed + 1)
    return l_mod, l_head


# ---------------------------------------------------------------------------
# Grid runners used by the CLI and the acceptance suite
# ---------------------------------------------------------------------------

def deviation_over_margins(margins, eps_v: float, seeds) -> list[float]:
    """Seed-averaged modulation deviation for each target margin."""
    means = []
    for margin in margins:
        devs = [modulation_deviation(
            build_theory_problem(margin, eps_v, seed))[0] for seed in seeds]
        means.append(float(np.mean(devs)))
    return means


def deviation_over_dispersion(margin: float, eps_values, seeds) -> list[float]:
    """Seed-averaged modulation deviation for each dispersion level."""
    means = []
    for eps_v in eps_values:
        devs = [modulation_deviation(
            build_theory_problem(margin, eps_v, seed))[0] for seed in seeds]
        means.append(float(np.mean(devs)))
    return means


def margin_preservation_survey(n_instances: int, seed0: int = 0,
                               margin: float = 5.0,
                               eps_values=(0.0, 0.02, 0.05),
                               max_attempts: int = 10_000
                               ) -> tuple[int, int]:
    """Generate instances until `n_instances` satisfy the premise; returns
    (premise_held_count, argmax_preserved_count among those)."""
    held = preserved = 0
    attempt = 0
    while held < n_instances and attempt < max_attempts:
        eps_v = eps_values[attempt % len(eps_values)]
        prob = build_theory_problem(margin, eps_v, seed0 + attempt)
        ok_premise, ok_preserved, _ = margin_preservation_check(prob)
        if ok_premise:
            held += 1
            preserved += int(ok_preserved)
        attempt += 1
    return held, preserved


def score_gap_at_init(ds, n_informative: int, ctx: P.ContextBank,
                      params: P.PipelineParams) -> float:
    """Mean attention-score gap (informative minus distractor) over a
    dataset, measured through the pipeline's own attention scores."""
    gaps = []
    for i in range(ds.n_samples):
        _, cache = P._modulate(
            ctx.tokens if ctx.mode == P.MODE_SHARED else ctx.tokens[0],
            ds.tokens[i], params, P.VARIANT_FULL)
        scores = cache["scores"]          # (heads, n_ctx, M)
        gaps.append(scores[:, :, :n_informative].mean()
                    - scores[:, :, n_informative:].mean())
    return float(np.mean(gaps))
