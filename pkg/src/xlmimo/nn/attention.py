"""Scaled dot-product and multi-head attention over ``(..., tokens, dim)`` arrays."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import glorot_uniform, softmax, softmax_backward
from .tensor import Module


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int = 1

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"{self.n_heads} heads do not divide d_model={self.d_model}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def scaled_dot_product_attention(q, k, v):
    """Return ``(softmax(q k^T / sqrt(d_k)) v, weights)``.

    Leading axes broadcast as batch axes.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value token counts differ: {k.shape} vs {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = softmax((q @ np.swapaxes(k, -1, -2)) * scale)
    return weights @ v, weights


def scaled_dot_product_attention_backward(q, k, v, weights, dout):
    """Gradients ``(dq, dk, dv)`` given the forward inputs and weights."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    dv = np.swapaxes(weights, -1, -2) @ dout
    dw = dout @ np.swapaxes(v, -1, -2)
    ds = softmax_backward(weights, dw) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq, dk, dv


class MultiHeadAttention(Module):
    """Per-head projections, parallel attention, concatenation and ``W_O``.

    The per-head matrices ``W_i^Q`` are the column blocks of one
    ``(d_model, d_model)`` matrix. No biases. ``self.weights`` holds the
    ``(B, h, T_q, T_k)`` attention matrices of the last forward call.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.w_q = self.param("w_q", glorot_uniform(rng, (d, d), d, d, dtype))
        self.w_k = self.param("w_k", glorot_uniform(rng, (d, d), d, d, dtype))
        self.w_v = self.param("w_v", glorot_uniform(rng, (d, d), d, d, dtype))
        self.w_o = self.param("w_o", glorot_uniform(rng, (d, d), d, d, dtype))
        self.weights = None

    def _split(self, x):
        *lead, t, _ = x.shape
        h, dh = self.cfg.n_heads, self.cfg.d_head
        return np.swapaxes(x.reshape(*lead, t, h, dh), -2, -3)

    def _merge(self, x):
        x = np.swapaxes(x, -2, -3)
        return x.reshape(*x.shape[:-2], self.cfg.d_model)

    def forward(self, xq, xk=None, xv=None, train: bool = False):
        xk = xq if xk is None else xk
        xv = xk if xv is None else xv
        d = self.cfg.d_model
        for x in (xq, xk, xv):
            if x.shape[-1] != d:
                raise ValueError(f"expected token dimension {d}, got {x.shape}")
        q = self._split(xq @ self.w_q.data)
        k = self._split(xk @ self.w_k.data)
        v = self._split(xv @ self.w_v.data)
        heads, self.weights = scaled_dot_product_attention(q, k, v)
        concat = self._merge(heads)
        self._cache = (xq, xk, xv, q, k, v, concat)
        return concat @ self.w_o.data

    def backward(self, dout):
        """Return ``(dxq, dxk, dxv)``; sum them for self-attention."""
        xq, xk, xv, q, k, v, concat = self._cache
        d = self.cfg.d_model
        self.w_o.accumulate(concat.reshape(-1, d).T @ dout.reshape(-1, d))
        dheads = self._split(dout @ self.w_o.data.T)
        dq, dk, dv = scaled_dot_product_attention_backward(q, k, v, self.weights, dheads)
        dq, dk, dv = self._merge(dq), self._merge(dk), self._merge(dv)
        self.w_q.accumulate(xq.reshape(-1, d).T @ dq.reshape(-1, d))
        self.w_k.accumulate(xk.reshape(-1, d).T @ dk.reshape(-1, d))
        self.w_v.accumulate(xv.reshape(-1, d).T @ dv.reshape(-1, d))
        return dq @ self.w_q.data.T, dk @ self.w_k.data.T, dv @ self.w_v.data.T
