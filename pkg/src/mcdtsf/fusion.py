"""Timestamp-assisted attention (TAA) and text/time-series fusion (TTF) layers.

Each layer runs TAA and TTF (order configurable) followed by a position-wise
feed-forward block shared by the series and timestamp streams. Both attention blocks are pre-norm
with residual connections. In TAA the timestamp tokens are scaled by
``lam`` after normalisation, so the weight survives the layer norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, d_kv: int | None = None):
        super().__init__()
        if d % heads:
            raise ValueError(f"hidden width {d} not divisible by {heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d_kv, d)
        self.v = nn.Linear(d_kv, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, ctx=None, key_padding_mask=None, need_weights=False):
        """Returns ``(out, weights)``; weights are ``(B, heads, Nq, Nk)`` when
        requested, else None (fused kernel)."""
        ctx = x if ctx is None else ctx
        B, Nq, d = x.shape
        Nk = ctx.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(x).view(B, Nq, h, dh).transpose(1, 2)
        k = self.k(ctx).view(B, Nk, h, dh).transpose(1, 2)
        v = self.v(ctx).view(B, Nk, h, dh).transpose(1, 2)
        if need_weights:
            logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
            if key_padding_mask is not None:
                logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
            w = torch.softmax(logits, dim=-1)
            out = w @ v
        else:
            mask = None if key_padding_mask is None else ~key_padding_mask[:, None, None, :]
            out, w = F.scaled_dot_product_attention(q, k, v, attn_mask=mask), None
        out = out.transpose(1, 2).reshape(B, Nq, d)
        return self.o(out), w


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, mult * d), nn.GELU(), nn.Linear(mult * d, d))

    def forward(self, x):
        return self.net(x)


class TAALayer(nn.Module):
    """Self-attention over ``[norm(s); lam * norm(u)]`` split back into two streams.

    With ``use_timestamps=False`` the same parameters attend over the series
    tokens only (the plain diffusion backbone).
    """

    def __init__(self, d: int, heads: int, use_timestamps: bool = True):
        super().__init__()
        self.use_timestamps = use_timestamps
        self.norm_s = nn.LayerNorm(d)
        if use_timestamps:
            self.norm_u = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)

    def forward(self, s, u, lam: float = 1.0, need_weights: bool = False):
        if s.shape[-1] != self.attn.q.in_features:
            raise ValueError(f"series width {s.shape[-1]} != {self.attn.q.in_features}")
        if not self.use_timestamps or u is None:
            out, w = self.attn(self.norm_s(s), need_weights=need_weights)
            return s + out, u, w
        if u.shape != s.shape:
            raise ValueError(f"series {tuple(s.shape)} vs timestamps {tuple(u.shape)}")
        n = s.shape[1]
        v = torch.cat([self.norm_s(s), lam * self.norm_u(u)], dim=1)
        out, w = self.attn(v, need_weights=need_weights)
        return s + out[:, :n], u + out[:, n:], w


class TTFLayer(nn.Module):
    """Cross-attention from series tokens to text tokens."""

    def __init__(self, d: int, heads: int, d_text: int):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, d_kv=d_text)

    def forward(self, s, ctx, pad_mask=None, need_weights: bool = False):
        if ctx.shape[1] < 1:
            raise ValueError("text context needs at least one token")
        out, w = self.attn(self.norm(s), ctx, pad_mask, need_weights)
        return s + out, w


class FusionLayer(nn.Module):
    def __init__(self, d: int, heads: int, d_text: int, use_taa: bool = True,
                 use_ttf: bool = True, order: str = "taa-ttf"):
        super().__init__()
        if order not in ("taa-ttf", "ttf-taa"):
            raise ValueError(f"unknown fusion order {order!r}")
        self.order = order
        self.taa = TAALayer(d, heads, use_timestamps=use_taa)
        self.ttf = TTFLayer(d, heads, d_text) if use_ttf else None
        self.ffn_norm = nn.LayerNorm(d)
        self.ffn = FeedForward(d)

    def forward(self, s, u, ctx, pad_mask, lam, need_weights: bool = False):
        attn = {}
        if self.order == "taa-ttf":
            s, u, attn["taa"] = self.taa(s, u, lam, need_weights)
            if self.ttf is not None:
                s, attn["ttf"] = self.ttf(s, ctx, pad_mask, need_weights)
        else:
            if self.ttf is not None:
                s, attn["ttf"] = self.ttf(s, ctx, pad_mask, need_weights)
            s, u, attn["taa"] = self.taa(s, u, lam, need_weights)
        # position-wise feed-forward shared by both streams, as in a Transformer over [s; u]
        s = s + self.ffn(self.ffn_norm(s))
        if u is not None:
            u = u + self.ffn(self.ffn_norm(u))
        return s, u, attn


@dataclass
class FusionState:
    series: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    attention: list = field(default_factory=list)


class FusionStack(nn.Module):
    def __init__(self, depth: int, d: int, heads: int, d_text: int, use_taa: bool = True,
                 use_ttf: bool = True, order: str = "taa-ttf"):
        super().__init__()
        if depth < 1:
            raise ValueError("fusion stack needs at least one layer")
        self.layers = nn.ModuleList(
            FusionLayer(d, heads, d_text, use_taa, use_ttf, order) for _ in range(depth))

    def forward(self, s, u, ctx, pad_mask=None, lam: float = 1.0,
                keep_attention: bool = False) -> FusionState:
        state = FusionState()
        for layer in self.layers:
            s, u, attn = layer(s, u, ctx, pad_mask, lam, keep_attention)
            state.series.append(s)
            state.timestamps.append(u)
            if keep_attention:
                state.attention.append({k: v.detach() for k, v in attn.items()})
        return state
