"""Attention: projections, rotary embedding, full vs segment equivalence."""

import numpy as np
import pytest

import convkv.attention as attention_mod
from convkv.attention import (
    AttentionParams,
    RopeConfig,
    SegmentStream,
    apply_rope,
    attend,
    full_causal_attention,
    project_qkv,
    segment_attention,
)
from convkv.cache import CacheError, KvCache, update_concat
from convkv.numerics import ShapeError, Tensor2, softmax_cols

import oracles


def t2(arr):
    return Tensor2(np.asarray(arr, dtype=np.float64))


def rand_params(rng, d_model, n_heads=1):
    inner = d_model
    mk = lambda: Tensor2(rng.standard_normal((inner, d_model)) / np.sqrt(d_model))
    return AttentionParams(mk(), mk(), mk(), Tensor2(rng.standard_normal((d_model, inner))),
                           n_heads=n_heads)


class TestProjectQkv:
    def test_identity_projection_passes_through(self):
        x = t2(np.arange(6.0).reshape(2, 3))
        eye = Tensor2(np.eye(2))
        params = AttentionParams(eye, eye.copy(), eye.copy(), Tensor2(np.eye(2)), n_heads=1)
        q, k, v = project_qkv(x, params)
        assert np.array_equal(k.data, x.data)

    def test_zero_input(self):
        rng = np.random.default_rng(0)
        params = rand_params(rng, 4)
        q, k, v = project_qkv(Tensor2.zeros(4, 5), params)
        assert not q.data.any() and not k.data.any() and not v.data.any()

    def test_matches_matmul_oracle(self):
        rng = np.random.default_rng(1)
        params = rand_params(rng, 4)
        x = t2(rng.standard_normal((4, 6)))
        q, _, _ = project_qkv(x, params)
        assert np.max(np.abs(q.data - oracles.matmul_loops(params.w_q.data, x.data))) < 1e-12

    def test_shape_mismatch(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError):
            project_qkv(Tensor2.zeros(3, 5), rand_params(rng, 4))


class TestRope:
    def test_position_zero_is_identity(self):
        rng = np.random.default_rng(3)
        x = t2(rng.standard_normal((6, 1)))
        out = apply_rope(x, np.array([0]), RopeConfig())
        assert np.array_equal(out.data, x.data)

    def test_interpolation_halves_angles(self):
        rng = np.random.default_rng(4)
        x = t2(rng.standard_normal((8, 3)))
        doubled = apply_rope(x, np.array([2, 4, 10]), RopeConfig(interpolation_scale=2.0))
        plain = apply_rope(x, np.array([1, 2, 5]), RopeConfig(interpolation_scale=1.0))
        assert np.max(np.abs(doubled.data - plain.data)) < 1e-12

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((6, 1))
        out = apply_rope(t2(x), np.array([5]), RopeConfig(base=10000.0))
        expect = oracles.rope_scalar(x, np.array([5]), base=10000.0, scale=1.0)
        assert np.max(np.abs(out.data - expect)) < 1e-12

    def test_odd_dim_rejected(self):
        with pytest.raises(ShapeError):
            apply_rope(Tensor2.zeros(3, 1), np.array([0]), RopeConfig())

    def test_rotation_preserves_norm(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((8, 4))
        out = apply_rope(t2(x), np.arange(4) + 7, RopeConfig())
        assert np.max(np.abs(np.linalg.norm(out.data, axis=0) - np.linalg.norm(x, axis=0))) < 1e-12


class TestFullCausalAttention:
    def test_single_token_returns_its_value(self):
        rng = np.random.default_rng(7)
        q, k, v = (t2(rng.standard_normal((4, 1))) for _ in range(3))
        out = full_causal_attention(q, k, v)
        assert np.max(np.abs(out.data - v.data)) < 1e-15

    def test_identical_keys_give_value_mean_of_identical_columns(self):
        rng = np.random.default_rng(8)
        k_col = rng.standard_normal((4, 1))
        v_col = rng.standard_normal((4, 1))
        q = t2(rng.standard_normal((4, 5)))
        k = t2(np.repeat(k_col, 5, axis=1))
        v = t2(np.repeat(v_col, 5, axis=1))
        out = full_causal_attention(q, k, v)
        assert np.max(np.abs(out.data - v_col)) < 1e-12

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(9)
        q, k, v = (rng.standard_normal((4, 16)) for _ in range(3))
        out = full_causal_attention(t2(q), t2(k), t2(v))
        assert np.max(np.abs(out.data - oracles.causal_attention_loops(q, k, v))) < 1e-12


def run_segment(x, params, block_size, rope=None):
    stream = SegmentStream(np.arange(x.cols), block_size)
    out, cache = segment_attention(
        Tensor2(x) if isinstance(x, np.ndarray) else x,
        stream, params, KvCache.empty(params.w_k.rows), rope,
    )
    return out, cache


class TestSegmentAttention:
    def test_single_block_equals_full_attention(self):
        rng = np.random.default_rng(10)
        params = rand_params(rng, 4)
        x = t2(rng.standard_normal((4, 12)))
        q, k, v = project_qkv(x, params)
        ref = full_causal_attention(q, k, v)
        out, _ = run_segment(x, params, block_size=12)
        assert np.max(np.abs(out.data - ref.data)) < 1e-12

    def test_block_size_one_is_autoregressive_decoding(self):
        rng = np.random.default_rng(11)
        params = rand_params(rng, 4)
        x = t2(rng.standard_normal((4, 9)))
        q, k, v = project_qkv(x, params)
        ref = full_causal_attention(q, k, v)
        out, _ = run_segment(x, params, block_size=1)
        assert np.max(np.abs(out.data - ref.data)) < 1e-12

    @pytest.mark.parametrize("block_size", [2, 3, 4, 6])
    def test_block_size_invariance(self, block_size):
        rng = np.random.default_rng(12)
        params = rand_params(rng, 6)
        x = t2(rng.standard_normal((6, 24)))
        ref, _ = run_segment(x, params, block_size=24)
        out, _ = run_segment(x, params, block_size=block_size)
        assert np.max(np.abs(out.data - ref.data)) < 1e-12

    @pytest.mark.parametrize("block_size", [2, 4, 8])
    def test_block_size_invariance_multihead_with_rope(self, block_size):
        rng = np.random.default_rng(13)
        params = rand_params(rng, 8, n_heads=2)
        rope = RopeConfig()
        x = t2(rng.standard_normal((8, 16)))
        ref, _ = run_segment(x, params, 16, rope)
        out, _ = run_segment(x, params, block_size, rope)
        assert np.max(np.abs(out.data - ref.data)) < 1e-12

    def test_cache_collects_rotated_keys(self):
        rng = np.random.default_rng(14)
        params = rand_params(rng, 4)
        rope = RopeConfig()
        x = t2(rng.standard_normal((4, 6)))
        _, cache = run_segment(x, params, 3, rope)
        _, k, _ = project_qkv(x, params)
        expect = apply_rope(k, np.arange(6), rope)
        assert cache.live_entries == 6
        assert np.max(np.abs(cache.keys.data - expect.data)) < 1e-12

    def test_causality_perturbing_a_token_leaves_earlier_outputs_alone(self):
        rng = np.random.default_rng(15)
        params = rand_params(rng, 4, n_heads=2)
        x = rng.standard_normal((4, 12))
        base, _ = run_segment(t2(x), params, 4, RopeConfig())
        for t in [3, 7, 11]:
            bumped = x.copy()
            bumped[:, t] += 1.0
            out, _ = run_segment(t2(bumped), params, 4, RopeConfig())
            assert np.array_equal(out.data[:, :t], base.data[:, :t])
            assert np.abs(out.data[:, t:] - base.data[:, t:]).max() > 0

    def test_non_empty_cache_rejected(self):
        rng = np.random.default_rng(16)
        params = rand_params(rng, 4)
        cache = update_concat(KvCache.empty(4), Tensor2.zeros(4, 1), Tensor2.zeros(4, 1))
        with pytest.raises(CacheError):
            segment_attention(Tensor2.zeros(4, 4), SegmentStream(np.arange(4), 2), params, cache)

    def test_score_matrix_never_reaches_l_squared(self, monkeypatch):
        seen = []
        orig = softmax_cols

        def spy(x):
            seen.append(x.shape[0] * x.shape[1])
            return orig(x)

        monkeypatch.setattr(attention_mod, "softmax_cols", spy)
        rng = np.random.default_rng(17)
        params = rand_params(rng, 4)
        x = t2(rng.standard_normal((4, 32)))
        block = 4
        run_segment(x, params, block)
        assert max(seen) == block * 32  # B x (cache + B) at the final block
        assert max(seen) < 32 * 32
