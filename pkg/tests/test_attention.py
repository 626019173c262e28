import math

import numpy as np
import pytest
import torch

from conftest import check_parameter_gradients, naive_attention, naive_ffn
from pillartrack.attention import (
    AttentionBlock,
    FeedForward,
    MultiHeadAttention,
    attention,
    sinusoidal_grid_encoding,
)


class TestAttention:
    def test_single_key_returns_value(self):
        q = torch.randn(5, 3, dtype=torch.float64)
        k = torch.randn(1, 3, dtype=torch.float64)
        v = torch.randn(1, 4, dtype=torch.float64)
        out = attention(q, k, v)
        torch.testing.assert_close(out, v.expand(5, 4))

    def test_identical_keys_give_mean_of_values(self):
        q = torch.randn(2, 3, dtype=torch.float64)
        k = torch.randn(1, 3, dtype=torch.float64).expand(6, 3)
        v = torch.randn(6, 4, dtype=torch.float64)
        out = attention(q, k, v)
        torch.testing.assert_close(out, v.mean(dim=0).expand(2, 4))

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = rng.normal(size=(3, 4))
            k = rng.normal(size=(5, 4))
            v = rng.normal(size=(5, 2))
            got = attention(*(torch.as_tensor(t) for t in (q, k, v))).numpy()
            np.testing.assert_allclose(got, naive_attention(q, k, v), atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        q = torch.randn(7, 5, dtype=torch.float64)
        k = torch.randn(9, 5, dtype=torch.float64)
        scores = torch.softmax(q @ k.T / math.sqrt(5), dim=-1)
        torch.testing.assert_close(scores.sum(dim=-1), torch.ones(7, dtype=torch.float64))

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ValueError):
            attention(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 4))
        with pytest.raises(ValueError):
            attention(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(5, 4))


class TestMultiHeadAttention:
    def test_single_head_equals_plain_attention(self):
        torch.manual_seed(0)
        mha = MultiHeadAttention(dim=6, heads=1)
        q = torch.randn(4, 6, dtype=torch.float64)
        k = torch.randn(5, 6, dtype=torch.float64)
        v = torch.randn(5, 6, dtype=torch.float64)
        expected = mha.w_o(attention(mha.w_q(q), mha.w_k(k), mha.w_v(v)))
        torch.testing.assert_close(mha(q, k, v), expected)

    def test_two_heads_block_diagonal(self):
        # identity projections split the width into two independent halves
        mha = MultiHeadAttention(dim=4, heads=2)
        with torch.no_grad():
            for lin in (mha.w_q, mha.w_k, mha.w_v, mha.w_o):
                lin.weight.copy_(torch.eye(4, dtype=torch.float64))
                lin.bias.zero_()
        q = torch.randn(3, 4, dtype=torch.float64)
        k = torch.randn(6, 4, dtype=torch.float64)
        v = torch.randn(6, 4, dtype=torch.float64)
        got = mha(q, k, v)
        left = attention(q[:, :2], k[:, :2], v[:, :2])
        right = attention(q[:, 2:], k[:, 2:], v[:, 2:])
        torch.testing.assert_close(got, torch.cat([left, right], dim=1))

    def test_matches_per_head_oracle(self):
        torch.manual_seed(1)
        rng = np.random.default_rng(1)
        for _ in range(20):
            mha = MultiHeadAttention(dim=8, heads=2)
            q = torch.as_tensor(rng.normal(size=(3, 8)))
            k = torch.as_tensor(rng.normal(size=(4, 8)))
            v = torch.as_tensor(rng.normal(size=(4, 8)))
            qp, kp, vp = mha.w_q(q), mha.w_k(k), mha.w_v(v)
            heads = []
            for h in range(2):
                s = slice(4 * h, 4 * (h + 1))
                heads.append(naive_attention(qp.detach().numpy()[:, s],
                                             kp.detach().numpy()[:, s],
                                             vp.detach().numpy()[:, s]))
            concat = torch.as_tensor(np.concatenate(heads, axis=1))
            expected = mha.w_o(concat)
            torch.testing.assert_close(mha(q, k, v), expected, atol=1e-12, rtol=1e-12)

    def test_indivisible_width_raises(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(dim=6, heads=4)

    def test_gradient_vs_finite_differences(self):
        torch.manual_seed(2)
        mha = MultiHeadAttention(dim=8, heads=2)
        q = torch.randn(3, 8, dtype=torch.float64)
        k = torch.randn(5, 8, dtype=torch.float64)
        v = torch.randn(5, 8, dtype=torch.float64)
        proj = torch.randn(3, 8, dtype=torch.float64)
        rel = check_parameter_gradients(mha, lambda m: (m(q, k, v) * proj).sum())
        assert rel < 1e-3


class TestFeedForward:
    def test_zero_weights_zero_output(self):
        ffn = FeedForward(dim=4, hidden=6)
        with torch.no_grad():
            for p in ffn.parameters():
                p.zero_()
        x = torch.randn(3, 4, dtype=torch.float64)
        assert torch.all(ffn(x) == 0)

    def test_negative_preactivation_gives_bias(self):
        ffn = FeedForward(dim=3, hidden=5)
        with torch.no_grad():
            ffn.fc1.weight.zero_()
            ffn.fc1.bias.fill_(-1.0)  # rectifier kills the hidden layer
        x = torch.randn(4, 3, dtype=torch.float64)
        torch.testing.assert_close(ffn(x), ffn.fc2.bias.expand(4, 3))

    def test_matches_loop_oracle(self):
        torch.manual_seed(3)
        rng = np.random.default_rng(2)
        for _ in range(20):
            ffn = FeedForward(dim=5, hidden=7)
            x = rng.normal(size=(4, 5))
            got = ffn(torch.as_tensor(x)).detach().numpy()
            oracle = naive_ffn(x,
                               ffn.fc1.weight.detach().numpy(),
                               ffn.fc1.bias.detach().numpy(),
                               ffn.fc2.weight.detach().numpy(),
                               ffn.fc2.bias.detach().numpy())
            np.testing.assert_allclose(got, oracle, atol=1e-12)


class TestAttentionBlock:
    def test_positional_terms_skip_values_and_residual(self):
        torch.manual_seed(4)
        block = AttentionBlock(dim=8, heads=2)
        q = torch.randn(3, 8, dtype=torch.float64)
        kv = torch.randn(5, 8, dtype=torch.float64)
        q_pos = torch.randn(3, 8, dtype=torch.float64)
        k_pos = torch.randn(5, 8, dtype=torch.float64)
        got = block(q, kv, kv, q_pos=q_pos, k_pos=k_pos)
        y = block.norm1(q + block.mha(q + q_pos, kv + k_pos, kv))
        expected = block.norm2(y + block.ffn(y))
        torch.testing.assert_close(got, expected)

    def test_gradient_vs_finite_differences(self):
        torch.manual_seed(5)
        block = AttentionBlock(dim=8, heads=2, ffn_hidden=16)
        q = torch.randn(4, 8, dtype=torch.float64)
        kv = torch.randn(6, 8, dtype=torch.float64)
        proj = torch.randn(4, 8, dtype=torch.float64)
        rel = check_parameter_gradients(block, lambda m: (m(q, kv, kv) * proj).sum())
        assert rel < 1e-3


class TestGridEncoding:
    def test_shape_and_range(self):
        enc = sinusoidal_grid_encoding(3, 5, 16)
        assert enc.shape == (15, 16)
        assert torch.all(enc <= 1.0) and torch.all(enc >= -1.0)

    def test_distinct_cells_distinct_codes(self):
        enc = sinusoidal_grid_encoding(8, 8, 32)
        dists = torch.cdist(enc, enc)
        dists.fill_diagonal_(float("inf"))
        assert dists.min() > 1e-6

    def test_rejects_odd_channels(self):
        with pytest.raises(ValueError):
            sinusoidal_grid_encoding(2, 2, 6)
