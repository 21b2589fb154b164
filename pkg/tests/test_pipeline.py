import math

import numpy as np
import numpy.testing as npt
import pytest

from visprompt import gradcheck
from visprompt import kernels as K
from visprompt import pipeline as P
from visprompt.errors import (ConfigError, DegenerateInputError, StateError)

DIMS = P.ModelDims(embed_dim=8, visual_dim=6, shared_dim=5, n_ctx=3, heads=2)


def small_model(seed=0, mode=P.MODE_SHARED, n_classes=3, tau=1.0):
    return P.init_model(DIMS, n_classes, mode=mode, tau=tau, seed=seed)


def rand(rows, cols, seed):
    return np.random.default_rng(seed).normal(0.0, 1.0, (rows, cols))


class TestProjection:
    def test_identity(self):
        v = rand(4, 6, 0)
        npt.assert_array_equal(P.project_visual_tokens(v, np.eye(6)), v)

    def test_zeros(self):
        w = rand(6, 8, 1)
        npt.assert_array_equal(
            P.project_visual_tokens(np.zeros((4, 6)), w), np.zeros((4, 8)))

    def test_against_triple_loop(self):
        v, w = rand(8, 48, 2), rand(48, 32, 3)
        expected = np.zeros((8, 32))
        for i in range(8):
            for j in range(32):
                expected[i, j] = sum(v[i, k] * w[k, j] for k in range(48))
        npt.assert_allclose(P.project_visual_tokens(v, w), expected,
                            atol=1e-12)


class TestCrossModalAttend:
    def test_single_token_ignores_scores(self):
        _, params, _ = small_model()
        ctx_tokens = rand(3, 8, 0)
        z = rand(1, 8, 1)
        out = P.cross_modal_attend(ctx_tokens, z, params)
        # softmax over a singleton: output is LN(z) through value/output maps
        expected = np.tile(
            K.layer_norm_rows(z) @ params.w_value @ params.w_out, (3, 1))
        npt.assert_allclose(out, expected, atol=1e-12)

    def test_identical_rows_collapse(self):
        _, params, _ = small_model(1)
        ctx_tokens = rand(3, 8, 2)
        z1 = rand(1, 8, 3)
        z5 = np.tile(z1, (5, 1))
        npt.assert_allclose(P.cross_modal_attend(ctx_tokens, z5, params),
                            P.cross_modal_attend(ctx_tokens, z1, params),
                            atol=1e-12)

    def test_hand_computed_two_token_case(self):
        dims = P.ModelDims(embed_dim=2, visual_dim=2, shared_dim=2,
                           n_ctx=1, heads=1)
        params = P.init_params(dims)
        for name in ("w_query", "w_key", "w_value", "w_out"):
            setattr(params, name, np.eye(2))
        out = P.cross_modal_attend(np.array([[1.0, -1.0]]),
                                   np.array([[1.0, -1.0], [-1.0, 1.0]]),
                                   params)
        # scores are +/- 2/sqrt(2); the mixture weight gap is tanh(sqrt(2))
        expected = math.tanh(math.sqrt(2.0)) * np.array([1.0, -1.0])
        npt.assert_allclose(out[0], expected, atol=1e-3)

    def test_empty_evidence(self):
        _, params, _ = small_model()
        with pytest.raises(DegenerateInputError):
            P.cross_modal_attend(rand(3, 8, 0), np.zeros((0, 8)), params)

    def test_attention_weights_are_a_distribution(self):
        _, params, _ = small_model(2)
        cache = {}
        P.cross_modal_attend(rand(3, 8, 4), rand(5, 8, 5), params, cache)
        attn = cache["attn"]
        assert (attn >= 0).all()
        npt.assert_allclose(attn.sum(axis=2), 1.0, atol=1e-12)


class TestFilmGateResidual:
    def test_zero_modulation_is_layer_norm(self):
        _, params, _ = small_model()
        params.w_gamma[...] = 0.0
        params.b_gamma[...] = 0.0
        params.w_beta[...] = 0.0
        params.b_beta[...] = 0.0
        ctx_tokens = rand(3, 8, 0)
        npt.assert_allclose(
            P.film_modulate(ctx_tokens, rand(3, 8, 1), params),
            K.layer_norm_rows(ctx_tokens), atol=1e-15)

    def test_direct_substitution(self):
        dims = P.ModelDims(embed_dim=2, visual_dim=2, shared_dim=2,
                           n_ctx=1, heads=1)
        params = P.init_params(dims)
        params.w_gamma[...] = 0.0
        params.b_gamma[...] = 0.5
        params.w_beta[...] = 0.0
        params.b_beta[...] = 0.1
        out = P.film_modulate(np.array([[1.0, -1.0]]), np.zeros((1, 2)),
                              params)
        npt.assert_allclose(out, [[1.6, -1.4]], atol=1e-4)

    def test_film_matches_independent_evaluation(self):
        _, params, _ = small_model(3)
        ctx_tokens, attended = rand(3, 8, 6), rand(3, 8, 7)
        # oracle: a second straightforward evaluation
        normed = K.layer_norm_rows(ctx_tokens)
        gamma = attended @ params.w_gamma + params.b_gamma
        beta = attended @ params.w_beta + params.b_beta
        npt.assert_allclose(P.film_modulate(ctx_tokens, attended, params),
                            normed * (1 + gamma) + beta, atol=1e-12)

    def test_gate_at_zero_weights(self):
        _, params, _ = small_model()
        params.w_gate[...] = 0.0
        params.b_gate[...] = 0.0
        npt.assert_allclose(P.compute_gate(rand(3, 8, 8), params),
                            np.full((3, 8), 0.5))

    def test_gate_saturation(self):
        _, params, _ = small_model()
        params.b_gate[...] = 20.0
        assert (P.compute_gate(np.zeros((3, 8)), params) > 1 - 1e-8).all()

    def test_gate_matches_oracle_and_bounds(self):
        _, params, _ = small_model(4)
        attended = rand(3, 8, 9)
        gate = P.compute_gate(attended, params)
        assert ((gate > 0) & (gate < 1)).all()
        npt.assert_allclose(
            gate, K.sigmoid(attended @ params.w_gate + params.b_gate),
            atol=1e-12)

    def test_gated_residual_extremes_and_midpoint(self):
        c, m = rand(3, 8, 10), rand(3, 8, 11)
        npt.assert_array_equal(
            P.gated_residual_update(c, m, np.zeros_like(c)), c)
        npt.assert_allclose(
            P.gated_residual_update(c, m, np.ones_like(c)), m, atol=1e-15)
        npt.assert_allclose(
            P.gated_residual_update(np.array([[1.0, -1.0]]),
                                    np.array([[1.6, -1.4]]),
                                    np.array([[0.5, 0.5]])),
            [[1.3, -1.2]])

    def test_ffn_zero_output_layer_is_identity(self):
        _, params, _ = small_model()
        params.w_ffn2[...] = 0.0
        params.b_ffn2[...] = 0.0
        c = rand(3, 8, 12)
        npt.assert_array_equal(P.ffn_refine(c, params), c)

    def test_ffn_matches_direct_evaluation(self):
        _, params, _ = small_model(5)
        params.w_ffn2 = rand(16, 8, 13) / 4.0
        c = rand(3, 8, 14)
        hidden = K.gelu(K.layer_norm_rows(c) @ params.w_ffn1 + params.b_ffn1)
        npt.assert_allclose(P.ffn_refine(c, params),
                            c + hidden @ params.w_ffn2 + params.b_ffn2,
                            atol=1e-12)


class TestStandInEncoders:
    def test_text_broadcast_of_class_embedding(self):
        _, _, enc = small_model(6)
        k = 1
        ctx_final = np.tile(enc.class_embed[k], (DIMS.n_ctx, 1))
        expected = K.l2_normalize_vec(enc.class_embed[k] @ enc.text_proj)
        npt.assert_allclose(P.encode_text_standin(ctx_final, k, enc),
                            expected, atol=1e-12)

    def test_text_identity_projection(self):
        _, _, enc = small_model(7)
        enc.text_proj = np.eye(8)
        enc.class_embed[0] = np.array([3.0, 4.0, 0, 0, 0, 0, 0, 0])
        ctx_final = np.tile(enc.class_embed[0], (DIMS.n_ctx, 1))
        out = P.encode_text_standin(ctx_final, 0, enc)
        npt.assert_allclose(out, [0.6, 0.8, 0, 0, 0, 0, 0, 0], atol=1e-12)

    def test_text_unit_norm(self):
        _, _, enc = small_model(8)
        out = P.encode_text_standin(rand(3, 8, 15), 2, enc)
        npt.assert_allclose(np.linalg.norm(out), 1.0, atol=1e-12)

    def test_image_equal_tokens_and_scale_invariance(self):
        _, _, enc = small_model(9)
        v = rand(1, 6, 16)
        tokens = np.tile(v, (4, 1))
        expected = K.l2_normalize_vec(v[0] @ enc.image_proj)
        npt.assert_allclose(P.encode_image_standin(tokens, enc), expected,
                            atol=1e-12)
        npt.assert_allclose(P.encode_image_standin(2.0 * tokens, enc),
                            expected, atol=1e-12)
        npt.assert_allclose(
            np.linalg.norm(P.encode_image_standin(tokens, enc)), 1.0,
            atol=1e-12)

    def test_image_zero_pool(self):
        _, _, enc = small_model(10)
        with pytest.raises(DegenerateInputError):
            P.encode_image_standin(np.zeros((3, 6)), enc)


class TestClassProbabilities:
    def test_equal_similarities(self):
        feats = np.tile(K.l2_normalize_vec(np.ones(4)), (2, 1))
        npt.assert_allclose(
            P.class_probabilities(feats[0], feats, 1.0), [0.5, 0.5])

    def test_large_tau_limit(self):
        h = K.l2_normalize_vec(rand(1, 6, 17)[0])
        feats = K.l2_normalize_rows(rand(4, 6, 18))
        npt.assert_allclose(P.class_probabilities(h, feats, 1e9),
                            np.full(4, 0.25), atol=1e-8)

    def test_orthogonal_pair(self):
        g1 = np.array([1.0, 0.0])
        g2 = np.array([0.0, 1.0])
        probs = P.class_probabilities(g1, np.stack([g1, g2]), 1.0)
        e = math.e
        npt.assert_allclose(probs, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
        npt.assert_allclose(probs, [0.7311, 0.2689], atol=1e-4)

    def test_tau_must_be_positive(self):
        with pytest.raises(ConfigError):
            P.class_probabilities(np.ones(2), np.eye(2), 0.0)

    def test_similarity_shift_invariance(self):
        # adding a constant to every class similarity leaves probs unchanged
        h = K.l2_normalize_vec(rand(1, 5, 19)[0])
        feats = K.l2_normalize_rows(rand(3, 5, 20))
        logits = (feats @ h) / 0.07
        base = K.softmax_rows(logits.reshape(1, -1))[0]
        shifted = K.softmax_rows((logits + 11.0).reshape(1, -1))[0]
        npt.assert_allclose(base, shifted, atol=1e-12)
        npt.assert_allclose(P.class_probabilities(h, feats, 0.07), base,
                            atol=1e-12)


class TestForward:
    def test_no_vision_ignores_tokens(self):
        ctx, params, enc = small_model(11)
        out1 = P.forward(rand(4, 6, 21), ctx, params, enc, P.VARIANT_NO_VISION)
        out2 = P.forward(rand(4, 6, 21), ctx, params, enc, P.VARIANT_NO_VISION)
        out3 = P.forward(rand(4, 6, 22) * 3.0, ctx, params, enc,
                         P.VARIANT_NO_VISION)
        npt.assert_array_equal(out1.text_feats, out2.text_feats)
        npt.assert_array_equal(out1.text_feats, out3.text_feats)

    def test_variant_nesting(self):
        # zero modulation maps, hard-closed gate, zero FFN output branch:
        # the full variant must reproduce the text-only probabilities exactly
        ctx, params, enc = small_model(12)
        params.w_gamma[...] = 0.0
        params.b_gamma[...] = 0.0
        params.w_beta[...] = 0.0
        params.b_beta[...] = 0.0
        params.w_gate[...] = 0.0
        params.b_gate[...] = -1e4
        params.w_ffn2[...] = 0.0
        params.b_ffn2[...] = 0.0
        tokens = rand(4, 6, 23)
        full = P.forward(tokens, ctx, params, enc, P.VARIANT_FULL)
        text_only = P.forward(tokens, ctx, params, enc, P.VARIANT_NO_VISION)
        npt.assert_allclose(full.probs, text_only.probs, atol=1e-12)

    def test_probs_sum_and_gate_bounds(self):
        for variant in P.VARIANTS:
            ctx, params, enc = small_model(13)
            out = P.forward(rand(4, 6, 24), ctx, params, enc, variant)
            npt.assert_allclose(out.probs.sum(), 1.0, atol=1e-10)
            if out.gate is not None:
                assert ((out.gate > 0) & (out.gate < 1)).all()

    def test_forward_determinism(self):
        tokens = rand(4, 6, 25)
        for variant in P.VARIANTS:
            a = P.forward(tokens, *small_model(14), variant)
            b = P.forward(tokens, *small_model(14), variant)
            npt.assert_array_equal(a.probs, b.probs)
            npt.assert_array_equal(a.modulated, b.modulated)

    def test_unknown_variant(self):
        ctx, params, enc = small_model()
        with pytest.raises(ConfigError):
            P.forward(rand(4, 6, 26), ctx, params, enc, "fancy")

    def test_class_specific_mode(self):
        ctx, params, enc = small_model(15, mode=P.MODE_SPECIFIC)
        out = P.forward(rand(4, 6, 27), ctx, params, enc, P.VARIANT_FULL)
        assert out.modulated.shape == (3, DIMS.n_ctx, DIMS.embed_dim)
        npt.assert_allclose(out.probs.sum(), 1.0, atol=1e-10)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        ctx, params, enc = small_model(16)
        out = P.forward(rand(4, 6, 28), ctx, params, enc, P.VARIANT_FULL)
        grads = P.backward(out, np.zeros(3), ctx, params)
        for g in grads.values():
            npt.assert_array_equal(g, np.zeros_like(g))

    def test_missing_cache(self):
        ctx, params, enc = small_model(17)
        out = P.forward(rand(4, 6, 29), ctx, params, enc, P.VARIANT_FULL)
        out.cache = {}
        with pytest.raises(StateError):
            P.backward(out, np.ones(3), ctx, params)

    def test_frozen_encoders_receive_no_gradient(self):
        ctx, params, enc = small_model(18)
        out = P.forward(rand(4, 6, 30), ctx, params, enc, P.VARIANT_FULL)
        grads = P.backward(out, np.ones(3), ctx, params)
        assert set(grads) == {"ctx_tokens", *P.TRAINABLE_PARAM_FIELDS}

    @pytest.mark.parametrize("variant", P.VARIANTS)
    @pytest.mark.parametrize("mode", (P.MODE_SHARED, P.MODE_SPECIFIC))
    def test_matches_central_differences(self, variant, mode):
        for seed in (0, 1):
            errs = gradcheck.pipeline_gradient_errors(variant, seed, mode=mode)
            assert max(errs.values()) < 1e-5


def test_parameter_counts():
    ctx, params, enc = small_model(19)
    counts = P.parameter_counts(ctx, params, enc)
    d, d_v, d_s, d_ff = 8, 6, 5, 16
    expected_trainable = (3 * d                      # context tokens
                          + d_v * d                  # visual projection
                          + 4 * d * d                # attention maps
                          + 3 * (d * d + d)          # film + gate maps
                          + d * d_ff + d_ff + d_ff * d + d)
    expected_frozen = 3 * d + d * d_s + d_v * d_s
    assert counts["trainable"] == expected_trainable
    assert counts["frozen"] == expected_frozen
