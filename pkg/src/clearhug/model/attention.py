"""Masked multi-head attention: a dense reference and a pair-skipping sparse kernel."""

from __future__ import annotations

import math

import torch
from torch import nn

# additive stand-in for -inf; disallowed weights are also zeroed after the softmax
NEG = -1e30


class InertRowError(ValueError):
    pass


class MultiHeadAttention(nn.Module):
    def __init__(self, d_t: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_t % n_heads:
            raise ValueError("d_t must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_k = d_t // n_heads
        self.w_q = nn.Linear(d_t, d_t, bias=False)
        self.w_k = nn.Linear(d_t, d_t, bias=False)
        self.w_v = nn.Linear(d_t, d_t, bias=False)
        self.w_o = nn.Linear(d_t, d_t)
        self.drop = nn.Dropout(dropout)

    def split(self, x, lin):
        # (B, L, d) -> (B, h, L, d_k)
        B, L, _ = x.shape
        return lin(x).view(B, L, self.n_heads, self.d_k).transpose(1, 2)

    def merge(self, y):
        B, h, L, dk = y.shape
        return y.transpose(1, 2).reshape(B, L, h * dk)


def _check_rows(allow: torch.Tensor):
    if not bool(allow.any(dim=-1).all()):
        raise InertRowError("inert attention row")


def _batched(x, allow):
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if allow.dim() == 2:
        allow = allow.unsqueeze(0).expand(x.shape[0], -1, -1)
    return x, allow, squeeze


def masked_attention(x: torch.Tensor, allow: torch.Tensor, attn: MultiHeadAttention, return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d_k) + M) V`` per head, then ``W_O``.

    ``allow`` is boolean ``(L, L)`` or ``(B, L, L)``; disallowed pairs get exactly zero weight.
    """
    x, allow, squeeze = _batched(x, allow)
    _check_rows(allow)
    q, k, v = attn.split(x, attn.w_q), attn.split(x, attn.w_k), attn.split(x, attn.w_v)
    scores = q @ k.transpose(-1, -2) / math.sqrt(attn.d_k)
    blocked = ~allow.unsqueeze(1)
    scores = scores + blocked.to(scores.dtype) * NEG
    weights = torch.softmax(scores, dim=-1).masked_fill(blocked, 0.0)
    out = attn.w_o(attn.merge(attn.drop(weights) @ v))
    if squeeze:
        out, weights = out[0], weights[0]
    return (out, weights) if return_weights else out


def sparse_attention(x: torch.Tensor, allow: torch.Tensor, attn: MultiHeadAttention):
    """Same contract as :func:`masked_attention`, touching only allowed (row, col) pairs.

    Returns ``(output, pair_count)`` where ``pair_count`` is the number of allowed pairs
    (summed over the batch).
    """
    x, allow, squeeze = _batched(x, allow)
    _check_rows(allow)
    B, L, _ = x.shape
    h, dk = attn.n_heads, attn.d_k
    q, k, v = attn.split(x, attn.w_q), attn.split(x, attn.w_k), attn.split(x, attn.w_v)
    b, r, c = allow.nonzero(as_tuple=True)
    s = (q[b, :, r, :] * k[b, :, c, :]).sum(-1) / math.sqrt(dk)  # (P, h)
    seg = b * L + r
    seg_h = seg.unsqueeze(1).expand(-1, h)
    smax = torch.full((B * L, h), -math.inf, dtype=s.dtype).scatter_reduce(
        0, seg_h, s.detach(), reduce="amax", include_self=True)
    e = torch.exp(s - smax[seg])
    denom = torch.zeros((B * L, h), dtype=s.dtype).index_add(0, seg, e)
    w = attn.drop(e / denom[seg])
    y = torch.zeros((B * L, h, dk), dtype=s.dtype).index_add(0, seg, w.unsqueeze(-1) * v[b, :, c, :])
    out = attn.w_o(y.view(B, L, h * dk))
    if squeeze:
        out = out[0]
    return out, int(b.numel())
