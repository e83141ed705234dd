"""Layers with hand-written backward passes.

Every layer keeps what it needs from the last ``forward`` call and
``backward(dout)`` returns the input gradient while accumulating parameter
gradients into the ``Tensor.grad`` buffers. Image tensors are channels-last
``(B, H, W, C)``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Module


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float64):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


class Conv2d(Module):
    """Stride-1 'same' cross-correlation, kernel ``(K, K, C_in, C_out)``."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3, dtype=np.float64):
        super().__init__()
        if k % 2 != 1:
            raise ValueError("kernel size must be odd to preserve the spatial shape")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        fan_in, fan_out = k * k * c_in, k * k * c_out
        self.weight = self.param("weight", glorot_uniform(rng, (k, k, c_in, c_out), fan_in, fan_out, dtype))
        self.bias = self.param("bias", np.zeros(c_out, dtype=dtype))
        self._cache = None

    def _columns(self, x):
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (self.k, self.k), axis=(1, 2))  # B,H,W,C,K,K
        B, H, W = x.shape[:3]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, self.k * self.k * self.c_in)
        return cols

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[-1] != self.c_in:
            raise ValueError(f"expected (B, H, W, {self.c_in}) input, got {x.shape}")
        B, H, W, _ = x.shape
        cols = self._columns(x)
        w2 = self.weight.data.reshape(-1, self.c_out)
        out = cols @ w2 + self.bias.data
        self._cache = (x.shape, cols)
        return out.reshape(B, H, W, self.c_out)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        shape, cols = self._cache
        B, H, W, C = shape
        k, p = self.k, self.k // 2
        d2 = dout.reshape(-1, self.c_out)
        self.weight.accumulate((cols.T @ d2).reshape(self.weight.shape))
        self.bias.accumulate(d2.sum(axis=0))
        dcols = (d2 @ self.weight.data.reshape(-1, self.c_out).T).reshape(B, H, W, k, k, C)
        dxp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p:p + H, p:p + W, :]


class BatchNorm(Module):
    """Normalisation over every axis but the last (channel) axis.

    ``momentum`` is the weight kept on the running statistics.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = self.buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.buffer("running_var", np.ones(channels, dtype=dtype))
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        axes = tuple(range(x.ndim - 1))
        if train:
            n = x.size // x.shape[-1]
            if n < 2:
                raise ValueError("batch norm in train mode needs at least 2 values per channel")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean.data = m * self.running_mean.data + (1 - m) * mean
            self.running_var.data = m * self.running_var.data + (1 - m) * var
        else:
            mean, var = self.running_mean.data, self.running_var.data
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, train)
        return self.gamma.data * xhat + self.beta.data

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv, train = self._cache
        axes = tuple(range(dout.ndim - 1))
        self.gamma.accumulate((dout * xhat).sum(axis=axes))
        self.beta.accumulate(dout.sum(axis=axes))
        dxhat = dout * self.gamma.data
        if not train:
            return dxhat * inv
        return inv * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))


class ReLU(Module):
    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dout, 0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


class Linear(Module):
    """``y = x W + b`` over the last axis; ``W`` is ``(Z_in, Z_out)``."""

    def __init__(self, z_in: int, z_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        super().__init__()
        self.z_in, self.z_out = z_in, z_out
        self.weight = self.param("weight", glorot_uniform(rng, (z_in, z_out), z_in, z_out, dtype))
        self.bias = self.param("bias", np.zeros(z_out, dtype=dtype)) if bias else None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[-1] != self.z_in:
            raise ValueError(f"expected last dimension {self.z_in}, got {x.shape}")
        self._x = x
        y = x @ self.weight.data
        if self.bias is not None:
            y = y + self.bias.data
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.z_in)
        d2 = dout.reshape(-1, self.z_out)
        self.weight.accumulate(x2.T @ d2)
        if self.bias is not None:
            self.bias.accumulate(d2.sum(axis=0))
        return dout @ self.weight.data.T


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(dim, dtype=dtype))
        self.beta = self.param("beta", np.zeros(dim, dtype=dtype))

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv)
        return self.gamma.data * xhat + self.beta.data

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        lead = tuple(range(dout.ndim - 1))
        self.gamma.accumulate((dout * xhat).sum(axis=lead))
        self.beta.accumulate(dout.sum(axis=lead))
        g = dout * self.gamma.data
        return inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, max-shifted for stability."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return probs * (dout - (dout * probs).sum(axis=-1, keepdims=True))
