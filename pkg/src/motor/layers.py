"""Transformer building blocks: masked multi-head attention, pre-norm
encoder blocks, and cross-modal blocks (self-attention + cross-attention).

Attention masks are boolean "allowed" matrices (True/1 = may attend).
Masked positions receive -inf before the softmax, so their weight and
gradient are exactly zero.
"""

from __future__ import annotations

import math

import torch
from torch import nn


def trunc_normal_init(module: nn.Module, std: float = 0.02) -> None:
    """Truncated-normal weights, zero biases, identity layer norms."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=std)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                attn_mask: torch.Tensor | None = None,
                key_padding_mask: torch.Tensor | None = None,
                need_weights: bool = False):
        """query [B,Lq,d]; key/value [B,Lk,d].

        attn_mask: bool [Lq,Lk] or [B,Lq,Lk], True = allowed.
        key_padding_mask: bool [B,Lk], True = valid key.
        Returns (out [B,Lq,d], attn [B,H,Lq,Lk] or None).
        """
        B, Lq, _ = query.shape
        Lk = key.shape[1]
        H, dh = self.n_heads, self.d_head
        q = self.q_proj(query).view(B, Lq, H, dh).transpose(1, 2)   # [B,H,Lq,dh]
        k = self.k_proj(key).view(B, Lk, H, dh).transpose(1, 2)
        v = self.v_proj(value).view(B, Lk, H, dh).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)            # [B,H,Lq,Lk]
        allowed = None
        if attn_mask is not None:
            allowed = attn_mask.bool()
            if allowed.ndim == 2:
                allowed = allowed.unsqueeze(0)
            allowed = allowed.unsqueeze(1)                          # [B|1,1,Lq,Lk]
        if key_padding_mask is not None:
            kpm = key_padding_mask.bool()[:, None, None, :]         # [B,1,1,Lk]
            allowed = kpm if allowed is None else allowed & kpm
        if allowed is not None:
            if not allowed.any(dim=-1).all():
                raise ValueError("attention mask leaves a query row with no allowed key")
            scores = scores.masked_fill(~allowed, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = self.dropout(attn) @ v                                # [B,H,Lq,dh]
        out = out.transpose(1, 2).reshape(B, Lq, H * dh)
        return self.out_proj(out), (attn if need_weights else None)


def feed_forward(d_model: int, ffn_mult: int, dropout: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(d_model, ffn_mult * d_model),
        nn.GELU(),
        nn.Dropout(dropout),
        nn.Linear(ffn_mult * d_model, d_model),
    )


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, d_model: int, n_heads: int, ffn_mult: int, dropout: float):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = feed_forward(d_model, ffn_mult, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, attn_mask=None, key_padding_mask=None):
        h = self.norm_attn(x)
        a, _ = self.attn(h, h, h, attn_mask, key_padding_mask)
        x = x + self.dropout(a)
        x = x + self.dropout(self.ffn(self.norm_ffn(x)))
        return x


class CrossBlock(nn.Module):
    """Pre-norm block: self-attention, cross-attention, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ffn_mult: int, dropout: float):
        super().__init__()
        self.norm_self = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm_cross = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = feed_forward(d_model, ffn_mult, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, kv, self_mask=None, q_padding_mask=None,
                kv_padding_mask=None, need_weights=False):
        h = self.norm_self(x)
        a, _ = self.self_attn(h, h, h, self_mask, q_padding_mask)
        x = x + self.dropout(a)
        c, attn = self.cross_attn(self.norm_cross(x), kv, kv,
                                  key_padding_mask=kv_padding_mask,
                                  need_weights=need_weights)
        x = x + self.dropout(c)
        x = x + self.dropout(self.ffn(self.norm_ffn(x)))
        return x, attn


def causal_mask(length: int) -> torch.Tensor:
    """Lower-triangular allowed matrix: position i attends to j <= i."""
    return torch.ones(length, length, dtype=torch.bool).tril()
