"""Attention primitives: plain, feature-injected self-attention, and cross-attention.

These are pure tensor functions over token matrices of shape (n, d).  The
injected variant appends externally supplied feature tokens to the key/value
sequences: queries come from the resident hidden state alone, keys see the
token-concatenation [z, f], and the value sequence is [z + lambda * f, f],
so the resident block of V is additionally shifted by the features.  Output
length always equals the resident token count.
"""

from __future__ import annotations

import math

import torch

from .errors import DimensionError


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    n, d = x.shape
    if d % heads:
        raise DimensionError(f"channel dim {d} not divisible by {heads} heads")
    return x.reshape(n, heads, d // heads).permute(1, 0, 2)  # (heads, n, dh)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    heads, n, dh = x.shape
    return x.permute(1, 0, 2).reshape(n, heads * dh)


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax attention per head; returns (output, head-averaged prob map)."""
    dh = q.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(dh)
    probs = torch.softmax(logits, dim=-1)
    return probs @ v, probs.mean(dim=0)


def self_attention(
    z: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    heads: int = 1,
) -> torch.Tensor:
    """Plain multi-head self-attention over tokens z of shape (n, d)."""
    q = _split_heads(z @ w_q.T, heads)
    k = _split_heads(z @ w_k.T, heads)
    v = _split_heads(z @ w_v.T, heads)
    out, _ = _attend(q, k, v)
    return _merge_heads(out)


def injected_self_attention(
    z: torch.Tensor,
    f: torch.Tensor,
    lam: float,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    heads: int = 1,
) -> torch.Tensor:
    """Self-attention with injected feature tokens.

    Q = W_q z, K = W_k [z, f], V = W_v [z + lam*f, f].  ``f`` must match
    ``z`` in both token count (the resident value block is shifted
    elementwise) and channel dim.
    """
    if z.shape != f.shape:
        raise DimensionError(f"resident {tuple(z.shape)} and feature {tuple(f.shape)} shapes differ")
    k_in = torch.cat([z, f], dim=0)
    v_in = torch.cat([z + lam * f, f], dim=0)
    q = _split_heads(z @ w_q.T, heads)
    k = _split_heads(k_in @ w_k.T, heads)
    v = _split_heads(v_in @ w_v.T, heads)
    out, _ = _attend(q, k, v)
    return _merge_heads(out)


def cross_attention(
    x: torch.Tensor,
    context: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    heads: int = 1,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-attention from x tokens onto context tokens.

    Returns the attended output and the head-averaged attention map of shape
    (n_x, n_context); each row of the map sums to 1.
    """
    q = _split_heads(x @ w_q.T, heads)
    k = _split_heads(context @ w_k.T, heads)
    v = _split_heads(context @ w_v.T, heads)
    out, probs = _attend(q, k, v)
    return _merge_heads(out), probs
