"""Tests for scaled dot-product and multi-head attention."""

import numpy as np
import numpy.testing as npt
import pytest

import casq.tensor as T
from casq.attention import (
    AttentionMask,
    MASK_FILL,
    init_multi_head,
    multi_head,
    scaled_dot_attention,
    self_attention,
)
from casq.errors import ConfigError, DimensionError
from casq.gradcheck import finite_difference_check


def naive_attention(q, k, v, allowed=None):
    """Two-loop reference: explicit per-query softmax over keys."""
    tq, dk = q.shape
    tk = k.shape[0]
    out = np.zeros((tq, v.shape[1]))
    for i in range(tq):
        logits = np.empty(tk)
        for j in range(tk):
            logits[j] = q[i] @ k[j] / np.sqrt(dk)
            if allowed is not None and not allowed[i, j]:
                logits[j] = MASK_FILL
        if allowed is not None and not allowed[i].any():
            continue
        e = np.exp(logits - logits.max())
        out[i] = (e / e.sum()) @ v
    return out


class TestScaledDot:
    def test_matches_naive_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            tq, tk, dk, dv = rng.integers(1, 7, size=4)
            q, k, v = rng.standard_normal((tq, dk)), rng.standard_normal((tk, dk)), rng.standard_normal((tk, dv))
            got = scaled_dot_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v)).data
            npt.assert_allclose(got, naive_attention(q, k, v), atol=1e-12)

    def test_masked_matches_naive_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            tq, tk = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            q, k, v = rng.standard_normal((tq, 4)), rng.standard_normal((tk, 4)), rng.standard_normal((tk, 3))
            allowed = rng.random((tq, tk)) < 0.6
            got = scaled_dot_attention(
                T.Tensor(q), T.Tensor(k), T.Tensor(v), AttentionMask(allowed)
            ).data
            npt.assert_allclose(got, naive_attention(q, k, v, allowed), atol=1e-12)

    def test_uniform_when_keys_identical(self):
        # all logits equal, so attention averages the values
        q = np.ones((2, 4))
        k = np.ones((3, 4))
        v = np.arange(9.0).reshape(3, 3)
        got = scaled_dot_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v)).data
        npt.assert_allclose(got, np.tile(v.mean(axis=0), (2, 1)), atol=1e-12)

    def test_fully_masked_row_outputs_zeros_and_zero_grads(self):
        rng = np.random.default_rng(2)
        q = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        k = T.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        v = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        allowed = np.ones((3, 4), dtype=bool)
        allowed[1] = False
        out = scaled_dot_attention(q, k, v, AttentionMask(allowed))
        npt.assert_array_equal(out.data[1], [0.0, 0.0])
        # only the dead row contributes to the loss, so every grad is zero
        sel = np.zeros((3, 2))
        sel[1] = 1.0
        T.backward(T.tsum(T.mul(out, T.Tensor(sel))))
        npt.assert_array_equal(q.grad, np.zeros_like(q.data))
        npt.assert_array_equal(k.grad, np.zeros_like(k.data))
        npt.assert_array_equal(v.grad, np.zeros_like(v.data))

    def test_causal_mask_blocks_future(self):
        """Perturbing a future key/value leaves earlier outputs unchanged."""
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 4))
        mask = AttentionMask.causal(5)
        base = scaled_dot_attention(T.Tensor(x), T.Tensor(x), T.Tensor(x), mask).data
        x2 = x.copy()
        x2[4] += 100.0
        pert = scaled_dot_attention(T.Tensor(x), T.Tensor(x2), T.Tensor(x2), mask).data
        npt.assert_array_equal(base[:4], pert[:4])
        assert not np.allclose(base[4], pert[4])

    def test_shape_errors(self):
        q = T.Tensor(np.zeros((2, 3)))
        k = T.Tensor(np.zeros((4, 5)))
        v = T.Tensor(np.zeros((4, 2)))
        with pytest.raises(DimensionError):
            scaled_dot_attention(q, k, v)
        k2 = T.Tensor(np.zeros((4, 3)))
        v2 = T.Tensor(np.zeros((3, 2)))
        with pytest.raises(DimensionError):
            scaled_dot_attention(q, k2, v2)
        with pytest.raises(DimensionError):
            scaled_dot_attention(q, k2, v, AttentionMask(np.ones((2, 2), dtype=bool)))

    def test_gradients(self):
        rng = np.random.default_rng(4)
        q = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        k = T.Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        v = T.Tensor(rng.standard_normal((5, 2)), requires_grad=True)
        sel = T.Tensor(rng.standard_normal((3, 2)))

        def loss():
            return T.tsum(T.mul(scaled_dot_attention(q, k, v), sel))

        assert finite_difference_check(loss, [q, k, v]) < 1e-6

    def test_gradients_with_mask(self):
        rng = np.random.default_rng(5)
        q = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        k = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        v = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        mask = AttentionMask.causal(4)
        sel = T.Tensor(rng.standard_normal((4, 3)))

        def loss():
            return T.tsum(T.mul(scaled_dot_attention(q, k, v, mask), sel))

        assert finite_difference_check(loss, [q, k, v]) < 1e-6


class TestMultiHead:
    def test_param_count_is_4_d_squared(self):
        rng = np.random.default_rng(6)
        for d, h in [(8, 1), (8, 2), (12, 4), (16, 8)]:
            p = init_multi_head(d, h, rng)
            assert p.n_params() == 4 * d * d

    def test_head_count_must_divide_dim(self):
        with pytest.raises(ConfigError):
            init_multi_head(10, 3, np.random.default_rng(0))

    def test_single_head_equals_projected_scaled_dot(self):
        rng = np.random.default_rng(7)
        d = 6
        p = init_multi_head(d, 1, rng)
        x = rng.standard_normal((4, d))
        xt = T.Tensor(x)
        got = multi_head(xt, xt, xt, p).data
        inner = naive_attention(x @ p.wq.data, x @ p.wk.data, x @ p.wv.data)
        npt.assert_allclose(got, inner @ p.wo.data, atol=1e-12)

    def test_multi_head_equals_blockwise_composition(self):
        """H heads must equal per-head attention on column blocks, concatenated."""
        rng = np.random.default_rng(8)
        d, h = 8, 4
        dh = d // h
        p = init_multi_head(d, h, rng)
        q = rng.standard_normal((5, d))
        k = rng.standard_normal((6, d))
        v = rng.standard_normal((6, d))
        got = multi_head(T.Tensor(q), T.Tensor(k), T.Tensor(v), p).data
        blocks = []
        for i in range(h):
            c = slice(i * dh, (i + 1) * dh)
            blocks.append(
                naive_attention(q @ p.wq.data[:, c], k @ p.wk.data[:, c], v @ p.wv.data[:, c])
            )
        npt.assert_allclose(got, np.concatenate(blocks, axis=1) @ p.wo.data, atol=1e-12)

    def test_self_attention_is_multi_head_on_one_input(self):
        rng = np.random.default_rng(9)
        p = init_multi_head(8, 2, rng)
        x = T.Tensor(rng.standard_normal((3, 8)))
        npt.assert_array_equal(self_attention(x, p).data, multi_head(x, x, x, p).data)

    def test_input_width_checked(self):
        p = init_multi_head(8, 2, np.random.default_rng(10))
        x = T.Tensor(np.zeros((3, 6)))
        with pytest.raises(DimensionError):
            self_attention(x, p)

    def test_gradients_through_heads(self):
        rng = np.random.default_rng(11)
        d, h = 6, 2
        p = init_multi_head(d, h, rng)
        x = T.Tensor(rng.standard_normal((4, d)), requires_grad=True)
        sel = T.Tensor(rng.standard_normal((4, d)))

        def loss():
            return T.tsum(T.mul(self_attention(x, p, AttentionMask.causal(4)), sel))

        assert finite_difference_check(loss, [x, *p.params()]) < 1e-5
