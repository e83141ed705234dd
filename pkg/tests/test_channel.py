import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlmimo import channel as ch
from xlmimo.channel import ArrayConfig, ChannelConfig, FieldKind, PathParams, SignalConfig

angles = st.floats(-math.pi / 2, math.pi / 2)


def test_rayleigh_distance_full_size_geometry():
    assert ch.rayleigh_distance(ArrayConfig(256, 0.01)) == pytest.approx(327.68, rel=1e-15)


def test_rayleigh_distance_two_antennas():
    assert ch.rayleigh_distance(ArrayConfig(2, 1.0, 0.5)) == pytest.approx(2.0)


@pytest.mark.parametrize("kwargs", [dict(M=0), dict(M=4, lam=0.0), dict(M=4, lam=0.01, d=-1.0)])
def test_invalid_array_rejected(kwargs):
    with pytest.raises(ValueError):
        ArrayConfig(**kwargs)


def test_far_field_broadside_is_constant():
    a = ch.far_field_steering(ArrayConfig(16), 0.0)
    np.testing.assert_allclose(a, np.full(16, 0.25), atol=1e-15)


def test_far_field_endfire_alternates():
    a = ch.far_field_steering(ArrayConfig(4), math.pi / 2)
    np.testing.assert_allclose(a, 0.5 * np.array([1, -1, 1, -1]), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(phi=angles, r=st.floats(0.05, 1e4), M=st.sampled_from([2, 4, 16, 64, 256]))
def test_steering_vectors_unit_norm(phi, r, M):
    arr = ArrayConfig(M)
    assert abs(np.linalg.norm(ch.far_field_steering(arr, phi)) - 1) < 1e-12
    assert abs(np.linalg.norm(ch.near_field_steering(arr, phi, r)) - 1) < 1e-12


@pytest.mark.parametrize("M", [16, 64, 256])
@pytest.mark.parametrize("phi", [-1.4, -0.5, 0.0, 0.3, 1.2, math.pi / 2])
def test_near_field_tends_to_far_field(M, phi):
    arr = ArrayConfig(M)
    r = 1e6 * ch.rayleigh_distance(arr)
    near = ch.near_field_steering(arr, phi, r)
    far = ch.far_field_steering(arr, phi)
    assert np.max(np.abs(near - far) / np.abs(far)) < 1e-4


def test_near_field_matches_direct_geometry():
    # naive distances are accurate at moderate range
    arr = ArrayConfig(8, 0.01)
    phi, r = 0.4, 0.3
    delta = (2 * np.arange(8) - 7) / 2 * arr.d
    dist = np.sqrt(r**2 + delta**2 + 2 * r * delta * np.sin(phi))
    expected = np.exp(-2j * np.pi * (dist - dist[0]) / arr.lam) / np.sqrt(8)
    np.testing.assert_allclose(ch.near_field_steering(arr, phi, r), expected, atol=1e-10)


def test_near_field_two_antennas_broadside_equal_phase():
    lam = 1.0
    arr = ArrayConfig(2, lam)
    a = ch.near_field_steering(arr, 0.0, 10 * lam)
    # both antennas sit sqrt(r^2 + d^2/4) from the scatterer
    assert a[0] == pytest.approx(a[1], abs=1e-15)
    assert a[0] == pytest.approx(1 / math.sqrt(2))


def test_near_field_rejects_nonpositive_distance():
    with pytest.raises(ValueError):
        ch.near_field_steering(ArrayConfig(4), 0.1, 0.0)


def test_path_validation():
    with pytest.raises(ValueError):
        PathParams(1, 2.0, FieldKind.FAR)
    with pytest.raises(ValueError):
        PathParams(1, 0.1, FieldKind.NEAR, None)


def test_sample_paths_split():
    cfg = ChannelConfig(ArrayConfig(16), L=6, L0=1)
    paths = ch.sample_paths(cfg, np.random.default_rng(0))
    kinds = [p.kind for p in paths]
    assert kinds.count(FieldKind.FAR) == 1 and kinds.count(FieldKind.NEAR) == 5
    assert all(p.r is None for p in paths if p.kind is FieldKind.FAR)
    assert all(10 <= p.r <= 80 for p in paths if p.kind is FieldKind.NEAR)


def test_sample_paths_all_far():
    cfg = ChannelConfig(ArrayConfig(16), L=3, L0=3)
    paths = ch.sample_paths(cfg, np.random.default_rng(0))
    assert all(p.kind is FieldKind.FAR and p.r is None for p in paths)


def test_gain_variance_monte_carlo():
    g = ch.complex_normal(np.random.default_rng(1), 100_000, 1.0)
    assert g.real.var() + g.imag.var() == pytest.approx(1.0, rel=0.02)


def test_single_broadside_path_gives_ones():
    arr = ArrayConfig(16)
    h = ch.generate_channel([PathParams(1.0, 0.0, FieldKind.FAR)], arr)
    np.testing.assert_allclose(h, np.ones(16), atol=1e-14)


def test_zero_gains_give_zero_channel():
    arr = ArrayConfig(16)
    paths = [PathParams(0.0, 0.2, FieldKind.FAR), PathParams(0.0, -0.4, FieldKind.NEAR, 12.0)]
    assert not np.any(ch.generate_channel(paths, arr))


def test_empty_path_list_rejected():
    with pytest.raises(ValueError):
        ch.generate_channel([], ArrayConfig(4))


def test_channel_energy_monte_carlo():
    cfg = ChannelConfig(ArrayConfig(64), L=6, L0=1, r_range=(2.0, 16.0))
    rng = np.random.default_rng(3)
    energy = np.mean([np.sum(np.abs(ch.draw_channel(cfg, rng)) ** 2) for _ in range(10_000)])
    assert energy == pytest.approx(64, rel=0.02)


def test_received_signal_noiseless():
    h = np.arange(4) + 1j
    y = ch.received_signal(h, SignalConfig(4.0, 0.0), np.random.default_rng(0))
    np.testing.assert_array_equal(y, 2 * h)


def test_received_signal_noise_power():
    rng = np.random.default_rng(5)
    h = np.zeros((10_000, 16), dtype=complex)
    y = ch.received_signal(h, SignalConfig(1.0, 1.0), rng)
    assert np.mean(np.sum(np.abs(y - h) ** 2, axis=1)) / 16 == pytest.approx(1.0, rel=0.02)


def test_ls_inverts_noiseless_observation():
    h = np.array([1 + 2j, -3j, 0.5, 2])
    sig = SignalConfig(9.0, 0.0)
    np.testing.assert_allclose(ch.ls_estimate(ch.received_signal(h, sig, None), sig), h)


def test_ls_scalar_division():
    y = np.array([2 + 2j, 0, 0, 0])
    np.testing.assert_allclose(ch.ls_estimate(y, SignalConfig(4.0, 1.0)), [1 + 1j, 0, 0, 0])


@pytest.mark.parametrize("snr_db", [-10, 0, 10, 20])
def test_ls_nmse_law(snr_db):
    cfg = ChannelConfig(ArrayConfig(16), L=3, L0=1, r_range=(0.13, 1.0))
    sig = SignalConfig.from_snr_db(snr_db)
    rng = np.random.default_rng(snr_db + 100)
    err = ref = 0.0
    for _ in range(10_000):
        h = ch.draw_channel(cfg, rng)
        est = ch.ls_estimate(ch.received_signal(h, sig, rng), sig)
        err += np.sum(np.abs(est - h) ** 2)
        ref += np.sum(np.abs(h) ** 2)
    assert 10 * math.log10(err / ref) == pytest.approx(-snr_db, abs=0.2)


def test_pack_example():
    t = ch.pack_real(np.array([1 + 2j, 3 + 4j, 5 + 6j, 7 + 8j]))
    np.testing.assert_array_equal(t[..., 0], [[1, 3], [5, 7]])
    np.testing.assert_array_equal(t[..., 1], [[2, 4], [6, 8]])


@given(st.lists(st.complex_numbers(allow_nan=False, allow_infinity=False, max_magnitude=1e6),
                min_size=16, max_size=16))
def test_pack_roundtrip_exact(values):
    h = np.array(values, dtype=complex)
    back = ch.unpack_real(ch.pack_real(h))
    assert back.tobytes() == h.tobytes()


def test_pack_batch_shape():
    h = np.zeros((5, 64), dtype=complex)
    assert ch.pack_real(h).shape == (5, 8, 8, 2)


def test_pack_non_square_rejected():
    with pytest.raises(ValueError):
        ch.pack_real(np.zeros(6, dtype=complex))


def test_seeded_sampling_is_deterministic():
    cfg = ChannelConfig(ArrayConfig(16), L=4, L0=2, r_range=(0.5, 2.0))
    a = ch.draw_channel(cfg, np.random.default_rng(42))
    b = ch.draw_channel(cfg, np.random.default_rng(42))
    assert a.tobytes() == b.tobytes()
