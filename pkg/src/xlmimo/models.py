"""MAT-CENet and the XLCNet convolutional baseline.

Both map a batch of packed LS estimates ``(B, s, s, 2)`` (``s = sqrt(M)``)
to refined estimates of the same shape via ``out = x - tail(x)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .nn import AttentionConfig, BatchNorm, Conv2d, LayerNorm, Linear, Module, MultiHeadAttention, ReLU


@dataclass(frozen=True)
class MatCenetConfig:
    M: int = 64
    F: int = 32
    n_heads: int = 4
    ffn_hidden: int | None = None
    n_encoders: int = 2
    n_conv_blocks: int = 4

    def __post_init__(self):
        side = math.isqrt(self.M)
        if side * side != self.M or self.M < 4:
            raise ValueError(f"M={self.M} must be a perfect square >= 4")
        if self.F % self.n_heads or self.M % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide both F={self.F} and M={self.M}")
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.F)

    @property
    def side(self) -> int:
        return math.isqrt(self.M)

    def descriptor(self) -> str:
        return (f"arch=matcenet;M={self.M};F={self.F};h={self.n_heads};ffn_hidden={self.ffn_hidden};"
                f"n_encoders={self.n_encoders};n_conv_blocks={self.n_conv_blocks};residual=subtract")


@dataclass(frozen=True)
class XlcnetConfig:
    M: int = 64
    F: int = 64
    n_conv_blocks: int = 8

    def __post_init__(self):
        side = math.isqrt(self.M)
        if side * side != self.M or self.M < 4:
            raise ValueError(f"M={self.M} must be a perfect square >= 4")

    @property
    def side(self) -> int:
        return math.isqrt(self.M)

    def descriptor(self) -> str:
        return f"arch=xlcnet;M={self.M};F={self.F};n_conv_blocks={self.n_conv_blocks};residual=subtract"


def parse_descriptor(text: str) -> MatCenetConfig | XlcnetConfig:
    fields = dict(item.split("=", 1) for item in text.split(";"))
    arch = fields.pop("arch")
    if fields.pop("residual", "subtract") != "subtract":
        raise ValueError("only residual=subtract is supported")
    values = {k: int(v) for k, v in fields.items()}
    if arch == "matcenet":
        values["n_heads"] = values.pop("h")
        return MatCenetConfig(**values)
    if arch == "xlcnet":
        return XlcnetConfig(**values)
    raise ValueError(f"unknown architecture {arch!r}")


class ConvBlock(Module):
    """conv 3x3 -> BN -> optional ReLU."""

    def __init__(self, c_in, c_out, rng, activation=True, dtype=np.float64):
        super().__init__()
        self.conv = self.add("conv", Conv2d(c_in, c_out, rng, dtype=dtype))
        self.bn = self.add("bn", BatchNorm(c_out, dtype=dtype))
        self.act = ReLU() if activation else None

    def forward(self, x, train=False):
        y = self.bn.forward(self.conv.forward(x, train), train)
        return self.act.forward(y) if self.act else y

    def backward(self, dout):
        if self.act:
            dout = self.act.backward(dout)
        return self.conv.backward(self.bn.backward(dout))


class FeatureMapAttention(Module):
    """Attention among the F feature maps; each map is a length-M token.

    Input/output ``(B, M, F)``; ``weights`` has shape ``(B, h, F, F)``.
    """

    def __init__(self, M, F, n_heads, rng, dtype=np.float64):
        super().__init__()
        self.mha = self.add("mha", MultiHeadAttention(AttentionConfig(M, n_heads), rng, dtype))

    @property
    def weights(self):
        return self.mha.weights

    def forward(self, h1, train=False):
        tokens = np.swapaxes(h1, -1, -2)
        out = self.mha.forward(tokens)
        return h1 + np.swapaxes(out, -1, -2)

    def backward(self, dout):
        dq, dk, dv = self.mha.backward(np.swapaxes(dout, -1, -2))
        return dout + np.swapaxes(dq + dk + dv, -1, -2)


class SpatialAttention(Module):
    """Attention among the M positions; ``weights`` has shape ``(B, h, M, M)``.

    ``s_in``/``s_out`` keep the transposed ``(F, M)`` views of the last call.
    """

    def __init__(self, M, F, n_heads, rng, dtype=np.float64):
        super().__init__()
        self.mha = self.add("mha", MultiHeadAttention(AttentionConfig(F, n_heads), rng, dtype))
        self.s_in = self.s_out = None

    @property
    def weights(self):
        return self.mha.weights

    def forward(self, h2, train=False):
        self.s_in = np.swapaxes(h2, -1, -2)
        out = self.mha.forward(h2)
        self.s_out = np.swapaxes(out, -1, -2)
        return h2 + out

    def backward(self, dout):
        dq, dk, dv = self.mha.backward(dout)
        return dout + dq + dk + dv


class Encoder(Module):
    """feature attention -> spatial attention -> FFN + residual -> layer norm."""

    def __init__(self, M, F, n_heads, ffn_hidden, rng, dtype=np.float64):
        super().__init__()
        self.feature = self.add("feature_attn", FeatureMapAttention(M, F, n_heads, rng, dtype))
        self.spatial = self.add("spatial_attn", SpatialAttention(M, F, n_heads, rng, dtype))
        self.fc1 = self.add("fc1", Linear(F, ffn_hidden, rng, dtype=dtype))
        self.act = ReLU()
        self.fc2 = self.add("fc2", Linear(ffn_hidden, F, rng, dtype=dtype))
        self.norm = self.add("norm", LayerNorm(F, dtype=dtype))
        self.trace = {}

    def forward(self, x, train=False):
        h2 = self.feature.forward(x, train)
        h3 = self.spatial.forward(h2, train)
        ffn = self.fc2.forward(self.act.forward(self.fc1.forward(h3)))
        out = self.norm.forward(h3 + ffn)
        self.trace = {"in": x, "feature": h2, "spatial": h3, "out": out}
        return out

    def backward(self, dout):
        d = self.norm.backward(dout)
        d3 = d + self.fc1.backward(self.act.backward(self.fc2.backward(d)))
        return self.feature.backward(self.spatial.backward(d3))


class ResidualNet(Module):
    """Common plumbing: ``forward`` returns ``x - tail(body(x))``."""

    side: int

    def _check_input(self, x):
        s = self.side
        if x.ndim != 4 or x.shape[1:] != (s, s, 2):
            raise ValueError(f"expected (B, {s}, {s}, 2) input, got {x.shape}")

    def __call__(self, x, train=False):
        return self.forward(x, train)

    def zero_tail(self) -> None:
        """Zero the last conv and its BN affine so the net becomes the identity."""
        for t in self.tail.parameters():
            t.data[...] = 0


class MatCenet(ResidualNet):
    def __init__(self, cfg: MatCenetConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.side = cfg.side
        self.blocks = []
        c = 2
        for i in range(cfg.n_conv_blocks):
            self.blocks.append(self.add(f"conv{i}", ConvBlock(c, cfg.F, rng, dtype=dtype)))
            c = cfg.F
        self.encoders = [
            self.add(f"encoder{i}", Encoder(cfg.M, cfg.F, cfg.n_heads, cfg.ffn_hidden, rng, dtype))
            for i in range(cfg.n_encoders)
        ]
        self.tail = self.add("tail", ConvBlock(cfg.F, 2, rng, activation=False, dtype=dtype))
        self.activations: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        self._check_input(x)
        B, s = x.shape[0], self.side
        y = x
        for blk in self.blocks:
            y = blk.forward(y, train)
        acts = {"H_input": x, "H_0": y}
        z = y.reshape(B, s * s, self.cfg.F)
        acts["H_1"] = z
        for enc in self.encoders:
            z = enc.forward(z, train)
        y = z.reshape(B, s, s, self.cfg.F)
        acts["H_5"] = z
        acts["H_6"] = y
        h7 = self.tail.forward(y, train)
        acts["H_7"] = h7
        out = x - h7
        acts["H_output"] = out
        first = self.encoders[0]
        acts["H_2"] = first.trace["feature"]
        acts["H_3"] = first.trace["spatial"]
        acts["H_4"] = first.trace["out"]
        self.activations = acts
        return out

    def backward(self, dout):
        """Gradient w.r.t. the input; parameter gradients are accumulated."""
        B, s = dout.shape[0], self.side
        dx = dout.copy()
        d = self.tail.backward(-dout)
        d = d.reshape(B, s * s, self.cfg.F)
        for enc in reversed(self.encoders):
            d = enc.backward(d)
        d = d.reshape(B, s, s, self.cfg.F)
        for blk in reversed(self.blocks):
            d = blk.backward(d)
        return dx + d

    def attention_weights(self) -> dict[str, np.ndarray]:
        out = {}
        for i, enc in enumerate(self.encoders):
            out[f"encoder{i}.E"] = enc.feature.weights
            out[f"encoder{i}.B"] = enc.spatial.weights
        return out


class Xlcnet(ResidualNet):
    def __init__(self, cfg: XlcnetConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.side = cfg.side
        self.blocks = []
        c = 2
        for i in range(cfg.n_conv_blocks):
            self.blocks.append(self.add(f"conv{i}", ConvBlock(c, cfg.F, rng, dtype=dtype)))
            c = cfg.F
        self.tail = self.add("tail", ConvBlock(cfg.F, 2, rng, activation=False, dtype=dtype))

    def forward(self, x, train=False):
        self._check_input(x)
        y = x
        for blk in self.blocks:
            y = blk.forward(y, train)
        return x - self.tail.forward(y, train)

    def backward(self, dout):
        d = self.tail.backward(-dout)
        for blk in reversed(self.blocks):
            d = blk.backward(d)
        return dout + d


def build_model(cfg: MatCenetConfig | XlcnetConfig, rng: np.random.Generator, dtype=np.float64):
    if isinstance(cfg, MatCenetConfig):
        return MatCenet(cfg, rng, dtype)
    if isinstance(cfg, XlcnetConfig):
        return Xlcnet(cfg, rng, dtype)
    raise TypeError(f"unsupported config {cfg!r}")


def config_dict(cfg) -> dict:
    return asdict(cfg)
