"""Built-in self-check: analytic oracles, gradient checks and file roundtrips.

Each check reports the measured quantity next to its tolerance, so a
failure says by how much it missed.
"""

from __future__ import annotations

import math
import os
import tempfile
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import channel as ch
from .channel import ArrayConfig, ChannelConfig
from .estimators import build_dictionary, default_rings, fit_covariance, lmmse_estimate, omp
from .formats import Dataset, read_dataset, read_weights, write_dataset, write_weights
from .harness import ExperimentConfig, draw_channels, nmse, run_experiment, stream, to_db
from .models import FeatureMapAttention, MatCenet, MatCenetConfig, SpatialAttention
from .nn import (
    AttentionConfig,
    BatchNorm,
    Conv2d,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    grad_check,
    scaled_dot_product_attention,
    scaled_dot_product_attention_backward,
)


@dataclass
class Check:
    name: str
    measured: float
    tolerance: float
    # "<" means measured must stay below tolerance, "<=" allows equality
    op: str = "<"

    @property
    def passed(self) -> bool:
        if not math.isfinite(self.measured):
            return False
        return self.measured < self.tolerance if self.op == "<" else self.measured <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<40s} measured {self.measured:.3e}  {self.op} {self.tolerance:.1e}"


def _layer_error(layer, x, rng, train=False, tol=1e-4):
    proj = rng.normal(size=layer.forward(x, train).shape)

    def loss():
        return float(np.sum(layer.forward(x, train) * proj))

    layer.zero_grad()
    loss()
    dx = layer.backward(proj)
    arrays = {"x": x, **{n: t.data for n, t in layer.named_parameters()}}
    analytic = {"x": dx, **{n: t.grad for n, t in layer.named_parameters()}}
    return grad_check(loss, arrays, analytic, tol).max_rel_error


class _SelfAttention:
    """Multi-head attention fed the same tokens as query, key and value."""

    def __init__(self, mha):
        self.mha = mha

    def forward(self, x, train=False):
        return self.mha.forward(x)

    def backward(self, dout):
        return sum(self.mha.backward(dout))

    def zero_grad(self):
        self.mha.zero_grad()

    def named_parameters(self):
        return self.mha.named_parameters()


def geometry_checks() -> list[Check]:
    rng = stream(0, "verify/geometry")
    worst = 0.0
    for M in (4, 16, 64, 256):
        arr = ArrayConfig(M)
        for _ in range(25):
            phi = rng.uniform(-math.pi / 2, math.pi / 2)
            r = rng.uniform(0.05, 500.0)
            worst = max(worst, abs(np.linalg.norm(ch.far_field_steering(arr, phi)) - 1),
                        abs(np.linalg.norm(ch.near_field_steering(arr, phi, r)) - 1))
    limit = 0.0
    for M in (16, 64, 256):
        arr = ArrayConfig(M)
        r = 1e6 * ch.rayleigh_distance(arr)
        for phi in np.linspace(-1.5, 1.5, 7):
            far = ch.far_field_steering(arr, phi)
            limit = max(limit, float(np.max(np.abs(ch.near_field_steering(arr, phi, r) - far) / np.abs(far))))
    d_ray = ch.rayleigh_distance(ArrayConfig(256, 0.01, 0.005))
    return [
        Check("steering unit norm (max |norm-1|)", worst, 1e-12),
        Check("near->far limit at 1e6 D_Ray", limit, 1e-4),
        Check("rayleigh distance M=256 (|D-327.68|)", abs(d_ray - 327.68), 1e-12 * 327.68, "<="),
    ]


def ls_law_checks(n_test: int = 10000, M: int = 16) -> list[Check]:
    """LS NMSE (ratio of sums) against -SNR on the near-only and far-only grids."""
    out = []
    for scenario in ("near_only", "far_only"):
        rep = run_experiment(ExperimentConfig(scenario=scenario, M=M, n_test=n_test, seed=11))
        dev = max(abs(to_db(r.nmse_ratio_of_sums) + r.x) for r in rep.rows)
        out.append(Check(f"LS law {scenario} (max |dB + SNR|)", dev, 0.3))
    return out


def gradient_checks() -> list[Check]:
    rng = stream(0, "verify/grad")
    conv = Conv2d(2, 3, rng)
    conv.bias.data[:] = rng.normal(size=3)
    bn = BatchNorm(3)
    bn.gamma.data[:] = rng.normal(size=3)
    ln = LayerNorm(5)
    ln.gamma.data[:] = rng.normal(size=5)
    mha = MultiHeadAttention(AttentionConfig(6, 2), rng)
    checks = [
        Check("grad conv2d", _layer_error(conv, rng.normal(size=(2, 4, 4, 2)), rng), 1e-4),
        Check("grad batchnorm (train)", _layer_error(bn, rng.normal(size=(2, 4, 4, 3)), rng, True), 1e-4),
        Check("grad layernorm", _layer_error(ln, rng.normal(size=(3, 4, 5)), rng), 1e-4),
        Check("grad linear", _layer_error(Linear(4, 3, rng), rng.normal(size=(5, 4)), rng, tol=1e-6), 1e-6),
        Check("grad multi-head attention", _layer_error(_SelfAttention(mha), rng.normal(size=(2, 4, 6)), rng), 1e-4),
    ]

    q, k, v = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 6, 4)), rng.normal(size=(2, 6, 3))
    proj = rng.normal(size=(2, 5, 3))
    _, w = scaled_dot_product_attention(q, k, v)
    grads = scaled_dot_product_attention_backward(q, k, v, w, proj)
    rep = grad_check(lambda: float(np.sum(scaled_dot_product_attention(q, k, v)[0] * proj)),
                     {"q": q, "k": k, "v": v}, dict(zip("qkv", grads)), 1e-4)
    checks.append(Check("grad scaled dot-product attention", rep.max_rel_error, 1e-4))

    net = MatCenet(MatCenetConfig(M=16, F=8, n_heads=2), rng)
    net.forward(rng.normal(size=(4, 4, 4, 2)), train=True)
    x = rng.normal(size=(2, 4, 4, 2))
    proj = rng.normal(size=x.shape)

    def loss():
        return float(np.sum(net.forward(x) * proj))

    net.zero_grad()
    loss()
    dx = net.backward(proj)
    arrays = {"x": x, **{n: t.data for n, t in net.named_parameters()}}
    analytic = {"x": dx, **{n: t.grad for n, t in net.named_parameters()}}
    rep = grad_check(loss, arrays, analytic, 1e-3, max_entries=8, rng=rng)
    checks.append(Check("grad MAT-CENet end to end (M=16,F=8,h=2)", rep.max_rel_error, 1e-3))
    return checks


def attention_checks() -> list[Check]:
    rng = stream(0, "verify/attention")
    net = MatCenet(MatCenetConfig(M=16, F=8, n_heads=2), rng)
    net.forward(rng.normal(scale=3.0, size=(3, 4, 4, 2)))
    stoch = max(float(np.max(np.abs(w.sum(-1) - 1))) for w in net.attention_weights().values())
    ident = 0.0
    for cls in (FeatureMapAttention, SpatialAttention):
        mod = cls(16, 8, 2, rng)
        mod.mha.w_v.data[...] = 0
        x = rng.normal(size=(2, 16, 8))
        ident = max(ident, float(np.max(np.abs(mod.forward(x) - x))))
    return [Check("attention rows sum to 1 (max dev)", stoch, 1e-12),
            Check("zero value projection identity (max dev)", ident, 0.0, "<=")]


def baseline_checks() -> list[Check]:
    arr = ArrayConfig(16)
    ccfg = ChannelConfig(arr, 4, 1, r_range=(0.1 * ch.rayleigh_distance(arr), 0.8 * ch.rayleigh_distance(arr)))
    truth = draw_channels(ccfg, 2000, 5, "verify/lmmse/h")
    cov = fit_covariance(draw_channels(ccfg, 4000, 5, "verify/lmmse/cov"))
    worst = -math.inf
    for snr_db in (-10.0, 0.0, 10.0, 20.0):
        sig = ch.SignalConfig.from_snr_db(snr_db)
        y = truth + ch.complex_normal(stream(5, "verify/lmmse/noise", int(snr_db + 100)), truth.shape,
                                      sig.noise_variance)
        gap = to_db(nmse(lmmse_estimate(y, sig, cov), truth)) - to_db(nmse(ch.ls_estimate(y, sig), truth))
        worst = max(worst, gap)

    # well-separated on-grid pair: far atom at sin(phi) = -1/2, polar atom at
    # sin(phi) = +1/2 on the innermost ring
    arr = ArrayConfig(64)
    d_ray = ch.rayleigh_distance(arr)
    d = build_dictionary(arr, 64, default_rings((0.1 * d_ray, 0.8 * d_ray)))
    far_idx, near_idx = 16, 64 + 48
    h = d.atoms[:, far_idx] + 0.8j * d.atoms[:, near_idx]
    res = omp(h, d, 1, 1)
    err = to_db(float(np.sum(np.abs(res.estimate - h) ** 2) / np.sum(np.abs(h) ** 2)))
    if res.support != [far_idx, near_idx]:
        err = math.inf
    return [Check("LMMSE - LS NMSE (dB, worst SNR)", worst, 0.1, "<="),
            Check("hybrid OMP 2-sparse noiseless NMSE (dB)", err, -60.0)]


def roundtrip_checks() -> list[Check]:
    rng = stream(0, "verify/roundtrip")
    h = ch.complex_normal(rng, (3, 16))
    pack = float(np.max(np.abs(ch.unpack_real(ch.pack_real(h)) - h)))
    with tempfile.TemporaryDirectory() as tmp:
        ds_path = os.path.join(tmp, "d.xlce")
        ds = Dataset(h.astype(np.complex64), (2 * h).astype(np.complex64), 10.0)
        write_dataset(ds_path, ds)
        back = read_dataset(ds_path)
        ds_err = float(max(np.max(np.abs(back.h_ls - ds.h_ls)), np.max(np.abs(back.h - ds.h))))
        w_path = os.path.join(tmp, "w.xlnw")
        tensors = OrderedDict(a=rng.normal(size=(2, 3)).astype(np.float32), b=np.arange(4, dtype=np.float32))
        write_weights(w_path, tensors)
        wb = read_weights(w_path)
        w_err = float(max(np.max(np.abs(wb[k] - tensors[k])) for k in tensors)) if list(wb) == list(tensors) else math.inf
    return [Check("pack/unpack roundtrip (max dev)", pack, 0.0, "<="),
            Check("XLCE dataset roundtrip (max dev)", ds_err, 0.0, "<="),
            Check("XLNW weights roundtrip (max dev)", w_err, 0.0, "<=")]


SUITES = OrderedDict(
    geometry=geometry_checks,
    ls_law=ls_law_checks,
    gradients=gradient_checks,
    attention=attention_checks,
    baselines=baseline_checks,
    roundtrips=roundtrip_checks,
)


def run_verify(suites=None) -> list[Check]:
    checks = []
    for name in suites or SUITES:
        checks.extend(SUITES[name]())
    return checks
