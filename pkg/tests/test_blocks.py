import numpy as np
import pytest

from papaformer import blocks
from papaformer.blocks import LayerBlockParams, causal_mha, layer_block, rmsnorm, rope, swiglu_ffn
from papaformer.tensor import RngState, Tensor

from fdcheck import check_grad


def make_params(d=8, heads=2, ff=12, seed=0):
    return LayerBlockParams.init(d, heads, ff, RngState(seed))


class TestRmsNorm:
    def test_unit_input(self):
        out = rmsnorm(Tensor([1.0, 1.0, 1.0, 1.0]), Tensor(np.ones(4))).data
        np.testing.assert_allclose(out, np.ones(4), atol=1e-4)

    def test_zero_input(self):
        out = rmsnorm(Tensor(np.zeros(4)), Tensor(np.ones(4))).data
        np.testing.assert_array_equal(out, np.zeros(4))
        assert np.all(np.isfinite(out))

    def test_plus_minus_three(self):
        # mean(x^2) = 9, so normalization divides by 3
        out = rmsnorm(Tensor([3.0, -3.0]), Tensor(np.ones(2))).data
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)

    def test_grad(self):
        rng = np.random.default_rng(0)
        scale = Tensor((rng.random(6) + 0.5).astype(np.float32))
        check_grad(lambda x: (rmsnorm(x, scale) * rmsnorm(x, scale)).sum(), rng.random((3, 6)) * 4 - 2)


class TestRope:
    def test_position_zero_is_identity(self):
        rng = np.random.default_rng(1)
        x0 = rng.random((1, 1, 2, 8)).astype(np.float32)
        out = rope(Tensor(x0), np.array([0])).data
        np.testing.assert_allclose(out, x0, atol=1e-6)

    def test_quarter_rotation(self):
        # head_dim=2 has a single pair with theta_0 = 1; position pi/2 rotates (1,0)->(0,1)
        x = Tensor(np.array([[[[1.0, 0.0]]]]))
        out = rope(x, np.array([np.pi / 2])).data
        np.testing.assert_allclose(out, [[[[0.0, 1.0]]]], atol=1e-6)

    def test_preserves_pair_norms(self):
        rng = np.random.default_rng(2)
        x0 = rng.random((1, 5, 2, 8)).astype(np.float32) * 2 - 1
        out = rope(Tensor(x0), np.arange(5)).data
        norms = lambda a: np.linalg.norm(a.reshape(1, 5, 2, 4, 2), axis=-1)
        np.testing.assert_allclose(norms(out), norms(x0), atol=1e-5)

    def test_relative_position_inner_products(self):
        # <rope(q,p1), rope(k,p2)> depends only on p1 - p2
        rng = np.random.default_rng(3)
        q0 = rng.random((1, 1, 1, 8)).astype(np.float32)
        k0 = rng.random((1, 1, 1, 8)).astype(np.float32)

        def ip(p1, p2):
            rq = rope(Tensor(q0), np.array([p1])).data.reshape(-1)
            rk = rope(Tensor(k0), np.array([p2])).data.reshape(-1)
            return float(rq @ rk)

        for offset in range(4):
            vals = [ip(p + offset, p) for p in range(4)]
            assert max(vals) - min(vals) < 1e-4

    def test_odd_head_dim_rejected(self):
        with pytest.raises(blocks.ConfigError):
            rope(Tensor(np.zeros((1, 1, 1, 3))), np.array([0]))

    def test_grad(self):
        rng = np.random.default_rng(4)
        x0 = rng.random((1, 3, 2, 4)) * 4 - 2
        check_grad(lambda x: (rope(x, np.arange(3)) * rope(x, np.arange(3))).sum(), x0)


class TestCausalMha:
    def test_single_token(self):
        p = make_params()
        x = Tensor(np.random.default_rng(5).random((1, 1, 8)).astype(np.float32))
        out = causal_mha(x, p)
        # with one token, attention weight is [1], so output is wo(wv x)
        expected = (x @ p.wv) @ p.wo
        np.testing.assert_allclose(out.data, expected.data, atol=1e-6)

    def test_causality(self):
        p = make_params()
        rng = np.random.default_rng(6)
        x0 = rng.random((1, 6, 8)).astype(np.float32)
        base = causal_mha(Tensor(x0), p).data
        perturbed = x0.copy()
        perturbed[0, 4:] += rng.random((2, 8)).astype(np.float32)
        out = causal_mha(Tensor(perturbed), p).data
        assert np.max(np.abs(out[0, :4] - base[0, :4])) < 1e-6

    def test_attention_rows_sum_to_one(self):
        p = make_params()
        x = Tensor(np.random.default_rng(7).random((2, 5, 8)).astype(np.float32))
        att = blocks.attention_weights(x, p)
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-5)
        # strict causal: no weight above the diagonal
        assert np.max(np.abs(np.triu(att, k=1))) < 1e-6

    def test_seq_len_limit(self):
        p = make_params()
        with pytest.raises(blocks.ConfigError):
            causal_mha(Tensor(np.zeros((1, 9, 8))), p, max_seq_len=8)


class TestSwiglu:
    def test_zero_input(self):
        p = make_params()
        out = swiglu_ffn(Tensor(np.zeros((1, 2, 8))), p).data
        np.testing.assert_allclose(out, 0.0, atol=1e-8)

    def test_scalar_case(self):
        # d=1, ff=1, unit weights: silu(1) * 1 = 1 / (1 + e^-1)
        p = make_params(d=2, heads=1, ff=1)
        for w in ("w_gate", "w_up", "w_down", "norm1_scale", "norm2_scale"):
            getattr(p, w).data[...] = 1.0
        p.w_gate.data[:] = [[1.0], [0.0]]
        p.w_up.data[:] = [[1.0], [0.0]]
        p.w_down.data[:] = [[1.0, 0.0]]
        out = swiglu_ffn(Tensor(np.array([[[1.0, 0.0]]])), p).data
        np.testing.assert_allclose(out[0, 0, 0], 0.731059, atol=1e-5)

    def test_grad(self):
        p = make_params()
        rng = np.random.default_rng(8)
        check_grad(lambda x: (swiglu_ffn(x, p) * swiglu_ffn(x, p)).sum(), rng.random((1, 3, 8)) * 2 - 1)


class TestLayerBlock:
    def test_zeroed_sublayers_passthrough(self):
        p = make_params()
        p.wo.data[...] = 0.0
        p.w_down.data[...] = 0.0
        rng = np.random.default_rng(9)
        x0 = rng.random((1, 4, 8)).astype(np.float32)
        out = layer_block(Tensor(x0), p).data
        np.testing.assert_allclose(out, x0, atol=1e-7)

    def test_shape_preserved(self):
        p = make_params()
        for t in (1, 3, 7):
            x = Tensor(np.zeros((2, t, 8), dtype=np.float32))
            assert layer_block(x, p).shape == (2, t, 8)

    def test_gradient_reaches_every_parameter(self):
        p = make_params()
        x = Tensor(np.random.default_rng(10).random((1, 4, 8)).astype(np.float32))
        loss = (layer_block(x, p) * layer_block(x, p)).sum()
        loss.backward()
        for name, param in p.named_params().items():
            assert param.grad is not None, name
            assert np.any(param.grad != 0), f"zero gradient for {name}"

    def test_causality_end_to_end(self):
        p = make_params()
        rng = np.random.default_rng(11)
        x0 = rng.random((1, 6, 8)).astype(np.float32)
        base = layer_block(Tensor(x0), p).data
        perturbed = x0.copy()
        perturbed[0, 3:] = rng.random((3, 8))
        out = layer_block(Tensor(perturbed), p).data
        assert np.max(np.abs(out[0, :3] - base[0, :3])) < 1e-6

    def test_input_grad_vs_finite_differences(self):
        p = make_params(d=4, heads=2, ff=6, seed=1)
        rng = np.random.default_rng(12)
        check_grad(lambda x: (layer_block(x, p).softmax(axis=-1)[..., 0]).sum(), rng.random((1, 3, 4)) * 2 - 1)

    def test_dropout_masks_ffn_only_when_enabled(self):
        p = make_params()
        x = Tensor(np.random.default_rng(13).random((1, 4, 8)).astype(np.float32))
        a = layer_block(x, p, dropout=0.0).data
        b = layer_block(x, p, dropout=0.5, rng=RngState(3)).data
        c = layer_block(x, p, dropout=0.5, rng=RngState(3)).data
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(b, c)
        with pytest.raises(blocks.ConfigError):
            layer_block(x, p, dropout=0.5)
