"""Parameter and multiply-accumulate accounting for the two networks.

MACs cover the matrix products only (convolutions, attention projections
and score/value products, fully connected layers); normalisation and
activations contribute parameters but no MACs. One MAC = 2 FLOPs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .models import ConvBlock, Encoder, MatCenet, Xlcnet
from .nn import BatchNorm, Conv2d, LayerNorm, Linear, MultiHeadAttention


@dataclass
class LayerCount:
    name: str
    kind: str
    params: int
    macs: int
    dims: dict = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return 2 * self.macs


@dataclass
class FlopsReport:
    model: str
    entries: list[LayerCount]
    assumptions: list[str] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "params", "macs", "flops"])
        for e in self.entries:
            w.writerow([e.name, e.kind, e.params, e.macs, e.flops])
        w.writerow(["total", self.model, self.total_params, self.total_macs, self.total_flops])
        return buf.getvalue()


def conv_macs(nx: int, ny: int, k: int, c_in: int, c_out: int) -> int:
    return nx * ny * k * k * c_in * c_out


def attention_macs(tokens: int, d_model: int, n_heads: int) -> int:
    """Q/K/V/O projections plus the per-head score and value products."""
    d_head = d_model // n_heads
    projections = 4 * tokens * d_model * d_model
    products = 2 * n_heads * tokens * tokens * d_head
    return projections + products


def fc_macs(tokens: int, z_in: int, z_out: int) -> int:
    return tokens * z_in * z_out


def _conv_entries(prefix: str, blk: ConvBlock, side: int) -> list[LayerCount]:
    conv: Conv2d = blk.conv
    bn: BatchNorm = blk.bn
    dims = {"N_x": side, "N_y": side, "K": conv.k, "C_in": conv.c_in, "C_out": conv.c_out}
    return [
        LayerCount(f"{prefix}.conv", "conv", conv.num_parameters(),
                   conv_macs(side, side, conv.k, conv.c_in, conv.c_out), dims),
        LayerCount(f"{prefix}.bn", "batchnorm", bn.num_parameters(), 0, {"C": conv.c_out}),
    ]


def _attention_entry(name: str, mha: MultiHeadAttention, tokens: int) -> LayerCount:
    cfg = mha.cfg
    dims = {"tokens": tokens, "D_model": cfg.d_model, "D_head": cfg.d_head, "h": cfg.n_heads}
    return LayerCount(name, "attention", mha.num_parameters(),
                      attention_macs(tokens, cfg.d_model, cfg.n_heads), dims)


def _fc_entry(name: str, fc: Linear, tokens: int) -> LayerCount:
    return LayerCount(name, "fc", fc.num_parameters(), fc_macs(tokens, fc.z_in, fc.z_out),
                      {"tokens": tokens, "Z_in": fc.z_in, "Z_out": fc.z_out})


def _encoder_entries(prefix: str, enc: Encoder, M: int, F: int) -> list[LayerCount]:
    norm: LayerNorm = enc.norm
    return [
        _attention_entry(f"{prefix}.feature_attn", enc.feature.mha, F),
        _attention_entry(f"{prefix}.spatial_attn", enc.spatial.mha, M),
        _fc_entry(f"{prefix}.fc1", enc.fc1, M),
        _fc_entry(f"{prefix}.fc2", enc.fc2, M),
        LayerCount(f"{prefix}.norm", "layernorm", norm.num_parameters(), 0, {"D": F}),
    ]


def count_params_flops(model) -> FlopsReport:
    side = model.side
    entries: list[LayerCount] = []
    for i, blk in enumerate(model.blocks):
        entries += _conv_entries(f"conv{i}", blk, side)
    if isinstance(model, MatCenet):
        cfg = model.cfg
        for i, enc in enumerate(model.encoders):
            entries += _encoder_entries(f"encoder{i}", enc, cfg.M, cfg.F)
    entries += _conv_entries("tail", model.tail, side)

    if isinstance(model, MatCenet):
        cfg = model.cfg
        notes = [
            f"heads h={cfg.n_heads} (feature attention D_head={cfg.M // cfg.n_heads}, "
            f"spatial attention D_head={cfg.F // cfg.n_heads})",
            f"FFN hidden width {cfg.ffn_hidden}",
            "feature attention: F tokens of dimension M; spatial attention: M tokens of dimension F",
            "attention projections carry no bias; BN/LN count trainable scale+shift only",
            "MACs = matrix-product multiply-adds; FLOPs = 2 x MACs",
        ]
        name = "matcenet"
    elif isinstance(model, Xlcnet):
        notes = ["BN counts trainable scale+shift only", "MACs = multiply-adds; FLOPs = 2 x MACs"]
        name = "xlcnet"
    else:
        raise TypeError(f"unsupported model {type(model).__name__}")
    return FlopsReport(name, entries, notes)
