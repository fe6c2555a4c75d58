import numpy as np
import pytest
from hypothesis import given, strategies as st

from stllmdf import autodiff as ad
from stllmdf.autodiff import Tensor
from stllmdf.errors import ConfigurationError, ShapeError
from stllmdf.gradcheck import check_blocks
from stllmdf.transformer import (BlockParams, HeadParams, ffn, multi_head_attention, predict_head,
                                 rmsnorm, set_frozen, stllm_forward)

F64 = np.float64


def block(rng, d_h=4, heads=2, d_ff=8, std=0.3):
    return BlockParams(d_h, heads, d_ff, rng, F64, std=std)


def zero_block(d_h=4, heads=2, d_ff=8):
    b = block(np.random.default_rng(0), d_h, heads, d_ff)
    for p in b.parameters().values():
        p.data[:] = 1.0 if p.name.startswith("g_") else 0.0
    return b


class TestRMSNorm:
    def test_hand_value(self):
        out = rmsnorm(Tensor([3.0, 4.0]), Tensor(np.ones(2)), 0.0)
        np.testing.assert_allclose(out.data, [0.848528, 1.131371], atol=1e-6)

    def test_zeros(self):
        out = rmsnorm(Tensor(np.zeros(5)), Tensor(np.ones(5)), 1e-6)
        assert not out.data.any()

    @given(st.floats(1e-3, 1e3))
    def test_scale_invariance(self, c):
        x = np.random.default_rng(3).standard_normal((3, 6))
        g = Tensor(np.ones(6))
        np.testing.assert_allclose(rmsnorm(Tensor(c * x), g, 0.0).data, rmsnorm(Tensor(x), g, 0.0).data,
                                   rtol=1e-12, atol=1e-12)
        # with eps > 0 the drift is bounded by eps / mean(x^2) of the scaled slice
        ms = min(((c * x) ** 2).mean(-1).min(), (x ** 2).mean(-1).min())
        np.testing.assert_allclose(rmsnorm(Tensor(c * x), g, 1e-6).data,
                                   rmsnorm(Tensor(x), g, 1e-6).data, rtol=1e-6 / ms + 1e-12)


def naive_attention(x, p):
    h, dk = p.heads, p.d_k
    out = []
    for i in range(h):
        cols = slice(i * dk, (i + 1) * dk)
        q, k, v = x @ p.Wq.data[:, cols], x @ p.Wk.data[:, cols], x @ p.Wv.data[:, cols]
        head = np.zeros((len(x), dk))
        for a in range(len(x)):
            s = np.array([q[a] @ k[b] / np.sqrt(dk) for b in range(len(x))])
            w = np.exp(s - s.max())
            w /= w.sum()
            for b in range(len(x)):
                head[a] += w[b] * v[b]
        out.append(head)
    return np.concatenate(out, axis=1) @ p.Wo.data


class TestAttention:
    def test_single_token_identity(self):
        p = zero_block(3, 1, 3)
        for w in (p.Wq, p.Wk, p.Wv, p.Wo):
            w.data[:] = np.eye(3)
        x = np.array([[0.3, -1.2, 2.0]])
        np.testing.assert_allclose(multi_head_attention(Tensor(x), p).data, x)

    def test_identical_tokens(self, rng):
        x = np.repeat(rng.standard_normal((1, 4)), 2, axis=0)
        out = multi_head_attention(Tensor(x), block(rng)).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_matches_loop_oracle(self, rng):
        p = block(rng)
        x = rng.standard_normal((3, 4))
        np.testing.assert_allclose(multi_head_attention(Tensor(x), p).data, naive_attention(x, p),
                                   rtol=1e-10)

    def test_heads_must_divide(self, rng):
        with pytest.raises(ConfigurationError):
            BlockParams(6, 4, 8, rng, F64)

    def test_attention_rows_are_convex(self, rng):
        x = Tensor(rng.standard_normal((5, 4)))
        p = block(rng)
        s = ad.matmul(ad.matmul(x, p.Wq), ad.matmul(x, p.Wk).transpose(1, 0)) * 0.5
        w = ad.softmax_last(s).data
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


class TestFFN:
    def test_relu_gate(self):
        p = zero_block(2, 1, 2)
        p.W1.data[:] = np.eye(2)
        p.W2.data[:] = np.eye(2)
        np.testing.assert_array_equal(ffn(Tensor([[-1.0, 2.0]]), p).data, [[0.0, 2.0]])

    def test_zero_weights_constant(self):
        p = zero_block(2, 1, 2)
        p.b2.data[:] = 4.5
        np.testing.assert_array_equal(ffn(Tensor([[1.0, -3.0]]), p).data, [[4.5, 4.5]])

    def test_hand_value(self):
        p = zero_block(2, 1, 2)
        p.W1.data[:] = [[1.0, -2.0], [0.5, 1.0]]
        p.b1.data[:] = [0.0, 0.5]
        p.W2.data[:] = [[2.0, 0.0], [1.0, 3.0]]
        p.b2.data[:] = [0.1, -0.1]
        # hidden = relu([1.5, -0.5]) = [1.5, 0]; out = [3.0, 0] + b2
        np.testing.assert_allclose(ffn(Tensor([[1.0, 1.0]]), p).data, [[3.1, -0.1]])

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ffn(Tensor(np.ones(3)), block(rng))


class TestStack:
    @pytest.mark.parametrize("layout", ["joint", "factorized"])
    def test_zero_weights_identity(self, rng, layout):
        z = rng.standard_normal((3, 2, 4))
        out = stllm_forward(Tensor(z), [zero_block(), zero_block()], 1e-6, layout)
        np.testing.assert_array_equal(out.data, z)

    def test_node_permutation_equivariance(self, rng):
        blocks = [block(rng), block(rng)]
        z = rng.standard_normal((3, 4, 4))
        perm = [2, 0, 3, 1]
        a = stllm_forward(Tensor(z), blocks).data
        b = stllm_forward(Tensor(z[:, perm]), blocks).data
        np.testing.assert_allclose(b, a[:, perm], rtol=1e-10, atol=1e-12)

    def test_parity_config_finite(self, rng):
        blocks = [BlockParams(32, 32, 128, rng, F64) for _ in range(17)]
        out = stllm_forward(Tensor(rng.standard_normal((2, 3, 32))), blocks)
        assert out.shape == (2, 3, 32) and np.isfinite(out.data).all()

    def test_parity_config_gradients(self):
        assert check_blocks(layers=17, heads=32, d_h=32, max_coords=3) < 1e-4

    def test_small_stack_gradients(self):
        assert check_blocks() < 1e-4
        assert check_blocks(layout="factorized") < 1e-4

    def test_factorized_needs_even(self, rng):
        with pytest.raises(ConfigurationError):
            stllm_forward(Tensor(np.ones((2, 2, 4))), [block(rng)], layout="factorized")

    def test_empty_stack(self):
        with pytest.raises(ConfigurationError):
            stllm_forward(Tensor(np.ones((2, 2, 4))), [])


class TestHead:
    def test_zero_weights_constant(self, rng):
        head = HeadParams(3, 4, 2, 1, rng, F64)
        head.W.data[:] = 0
        head.b.data[:] = [1.5, -2.0]
        out = predict_head(Tensor(rng.standard_normal((3, 5, 4))), head).data
        assert out.shape == (2, 5, 1)
        np.testing.assert_array_equal(out[0], 1.5)
        np.testing.assert_array_equal(out[1], -2.0)

    def test_constructed_identity(self, rng):
        m, d_h = 4, 3
        head = HeadParams(m, d_h, m, 1, rng, F64)
        head.W.data[:] = 0
        head.b.data[:] = 0
        for s in range(m):
            head.W.data[s * d_h + 1, s] = 1.0   # copy channel 1 of step s to horizon s
        x = rng.standard_normal((m, 2, d_h))
        np.testing.assert_array_equal(predict_head(Tensor(x), head).data[..., 0], x[..., 1])

    def test_flatten_multiply_oracle(self, rng):
        head = HeadParams(3, 4, 2, 2, rng, F64)
        x = rng.standard_normal((5, 3, 6, 4))
        out = predict_head(Tensor(x), head).data
        for b in range(5):
            for n in range(6):
                y = x[b, :, n, :].reshape(-1) @ head.W.data + head.b.data
                np.testing.assert_allclose(out[b, :, n, :], y.reshape(2, 2), rtol=1e-12)

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            predict_head(Tensor(np.ones((3, 2, 5))), HeadParams(3, 4, 2, 1, rng, F64))


class TestFreeze:
    def test_frozen_absent_from_gradients(self, rng):
        blocks = [block(rng)]
        head = HeadParams(3, 4, 2, 1, rng, F64)
        set_frozen(blocks, True)
        z = Tensor(rng.standard_normal((3, 2, 4)))
        grads = ad.backward(predict_head(stllm_forward(z, blocks), head).sum())
        assert not any(p in grads for p in blocks[0].parameters().values())
        assert head.W in grads
        set_frozen(blocks, False)
        grads = ad.backward(predict_head(stllm_forward(z, blocks), head).sum())
        assert blocks[0].Wq in grads

    def test_forward_unchanged_by_freezing(self, rng):
        blocks = [block(rng)]
        z = Tensor(rng.standard_normal((3, 2, 4)))
        before = stllm_forward(z, blocks).data
        set_frozen(blocks, True)
        np.testing.assert_array_equal(stllm_forward(z, blocks).data, before)
