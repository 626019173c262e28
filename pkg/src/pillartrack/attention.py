"""Attention primitives shared by the backbone, the encoder and the decoder.

One kernel, audited once: scaled dot-product attention, the multi-head
wrapper, the rectified two-layer feed-forward, and a post-norm residual
block (attention -> add+norm -> FFN -> add+norm).
"""

from __future__ import annotations

import math

import torch
from torch import nn


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Softmax(Q K^T / sqrt(d)) V.

    q: (..., n, d), k: (..., m, d), v: (..., m, dv). The scale uses the key
    feature dimension d. Every softmax row sums to one.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key width mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value row mismatch: {k.shape[-2]} vs {v.shape[-2]}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(k.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


class MultiHeadAttention(nn.Module):
    """Per-head projected attention, concatenated and output-projected."""

    def __init__(self, dim: int, heads: int, dtype=torch.float64):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Linear(dim, dim, dtype=dtype)
        self.w_k = nn.Linear(dim, dim, dtype=dtype)
        self.w_v = nn.Linear(dim, dim, dtype=dtype)
        self.w_o = nn.Linear(dim, dim, dtype=dtype)

    def forward(self, q_in: torch.Tensor, k_in: torch.Tensor,
                v_in: torch.Tensor) -> torch.Tensor:
        """Inputs are (..., tokens, dim); keys and values share token count."""
        q = self._split(self.w_q(q_in))
        k = self._split(self.w_k(k_in))
        v = self._split(self.w_v(v_in))
        out = attention(q, k, v)
        return self.w_o(self._merge(out))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        x = x.reshape(*lead, n, self.heads, self.head_dim)
        return x.transpose(-3, -2)  # (..., heads, n, head_dim)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        x = x.transpose(-3, -2)
        *lead, n, _, _ = x.shape
        return x.reshape(*lead, n, self.dim)


class FeedForward(nn.Module):
    """Max(0, x W1 + b1) W2 + b2."""

    def __init__(self, dim: int, hidden: int, dtype=torch.float64):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, dtype=dtype)
        self.fc2 = nn.Linear(hidden, dim, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


class AttentionBlock(nn.Module):
    """Post-norm transformer block over token sequences.

    y = LN(q + MHA(q + q_pos, k + k_pos, v)); out = LN(y + FFN(y)).
    Positional terms touch only queries and keys; the residual path carries
    the raw query input.
    """

    def __init__(self, dim: int, heads: int, ffn_hidden: int | None = None,
                 eps: float = 1e-5, dtype=torch.float64):
        super().__init__()
        self.mha = MultiHeadAttention(dim, heads, dtype=dtype)
        self.ffn = FeedForward(dim, ffn_hidden or dim, dtype=dtype)
        self.norm1 = nn.LayerNorm(dim, eps=eps, dtype=dtype)
        self.norm2 = nn.LayerNorm(dim, eps=eps, dtype=dtype)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                q_pos: torch.Tensor | None = None,
                k_pos: torch.Tensor | None = None) -> torch.Tensor:
        q_att = q if q_pos is None else q + q_pos
        k_att = k if k_pos is None else k + k_pos
        y = self.norm1(q + self.mha(q_att, k_att, v))
        return self.norm2(y + self.ffn(y))


def sinusoidal_grid_encoding(h: int, w: int, channels: int,
                             temperature: float = 10000.0,
                             dtype=torch.float64) -> torch.Tensor:
    """Fixed 2D sine/cosine position features for an h x w grid.

    Returns (h*w, channels) in row-major order; the first half of the
    channels encodes the row coordinate, the second half the column.
    """
    if channels % 4 != 0:
        raise ValueError(f"channels must be divisible by 4, got {channels}")
    half = channels // 2
    freq = torch.arange(half // 2, dtype=dtype)
    inv = 1.0 / temperature ** (2 * freq / half)

    def encode(pos):
        ang = pos[:, None] * inv[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)

    rows = encode(torch.arange(h, dtype=dtype))       # (h, half)
    cols = encode(torch.arange(w, dtype=dtype))       # (w, half)
    out = torch.cat([
        rows[:, None, :].expand(h, w, half),
        cols[None, :, :].expand(h, w, half),
    ], dim=2)
    return out.reshape(h * w, channels)


def init_transformer_weights(module: nn.Module) -> None:
    """Truncated-normal linear weights, kaiming convs, zero biases.

    Zero biases make the zero-input/zero-bias contracts hold right after
    construction.
    """
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels
            fan_out //= m.groups
            nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
