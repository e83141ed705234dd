import math
import struct
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from xlmimo.checkpoint import load_model, load_training_state, save_model
from xlmimo.formats import (
    Dataset,
    FormatError,
    decode_text,
    encode_text,
    read_covariance,
    read_dataset,
    read_weights,
    write_covariance,
    write_dataset,
    write_weights,
)
from xlmimo.harness import init_model
from xlmimo.models import MatCenetConfig, XlcnetConfig
from xlmimo.nn import Adam

f32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


def test_dataset_header_layout(tmp_path):
    h = np.array([[1 + 2j, 3 - 4j]], dtype=np.complex64)
    write_dataset(tmp_path / "d", Dataset(h * 0, h, 10.0))
    raw = (tmp_path / "d").read_bytes()
    assert raw[:4] == b"XLCE"
    assert struct.unpack_from("<IIIf", raw, 4) == (1, 2, 1, 10.0)
    body = np.frombuffer(raw, "<f4", offset=20)
    np.testing.assert_array_equal(body, [0, 0, 0, 0, 1, 2, 3, -4])


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 4), st.just(16), st.just(4)), elements=f32))
def test_dataset_roundtrip(tmp_path_factory, parts):
    path = tmp_path_factory.mktemp("ds") / "d.xlce"
    h_ls = parts[..., 0] + 1j * parts[..., 1]
    h = parts[..., 2] + 1j * parts[..., 3]
    write_dataset(path, Dataset(h_ls, h, -5.0))
    back = read_dataset(path)
    np.testing.assert_array_equal(back.h_ls, h_ls)
    np.testing.assert_array_equal(back.h, h)
    assert back.snr_db == -5.0


def test_dataset_nan_snr(tmp_path):
    write_dataset(tmp_path / "d", Dataset(np.zeros((1, 4), complex), np.zeros((1, 4), complex)))
    assert math.isnan(read_dataset(tmp_path / "d").snr_db)


def test_dataset_truncated(tmp_path):
    write_dataset(tmp_path / "d", Dataset(np.zeros((2, 4), complex), np.zeros((2, 4), complex)))
    raw = (tmp_path / "d").read_bytes()
    (tmp_path / "d").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "d")


def test_dataset_bad_magic(tmp_path):
    (tmp_path / "d").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "d")


def test_missing_file_names_path(tmp_path):
    with pytest.raises(OSError, match="nowhere.xlce"):
        read_dataset(tmp_path / "nowhere.xlce")


def test_weights_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = OrderedDict([("conv0.conv.weight", rng.normal(size=(3, 3, 2, 4)).astype(np.float32)),
                           ("scalar", np.array(2.5, dtype=np.float32)),
                           ("ünï", np.arange(3, dtype=np.float32))])
    write_weights(tmp_path / "w", tensors)
    back = read_weights(tmp_path / "w")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        np.testing.assert_array_equal(back[k], tensors[k])


def test_weights_layout(tmp_path):
    write_weights(tmp_path / "w", OrderedDict(ab=np.array([1.0, 2.0], dtype=np.float32)))
    raw = (tmp_path / "w").read_bytes()
    expected = b"XLNW" + struct.pack("<IIH", 1, 1, 2) + b"ab" + struct.pack("<BI", 1, 2) + struct.pack("<2f", 1, 2)
    assert raw == expected


def test_weights_trailing_bytes(tmp_path):
    write_weights(tmp_path / "w", OrderedDict(a=np.zeros(2, np.float32)))
    with open(tmp_path / "w", "ab") as f:
        f.write(b"\0")
    with pytest.raises(FormatError):
        read_weights(tmp_path / "w")


def test_text_encoding_roundtrip():
    text = "arch=matcenet;M=64"
    assert decode_text(encode_text(text)) == text


def test_covariance_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    R = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
    write_covariance(tmp_path / "c", R)
    assert (tmp_path / "c").read_bytes()[:4] == b"XLCV"
    np.testing.assert_array_equal(read_covariance(tmp_path / "c"), R)


@pytest.mark.parametrize("mcfg", [MatCenetConfig(M=16, F=8, n_heads=2), XlcnetConfig(M=16, F=4, n_conv_blocks=2)])
def test_checkpoint_roundtrip(tmp_path, mcfg):
    model = init_model(mcfg, 3)
    x = np.random.default_rng(0).normal(size=(4, 4, 4, 2)).astype(np.float32)
    model.forward(x, train=True)
    save_model(tmp_path / "m", model, epoch=7)
    back = load_model(tmp_path / "m", mcfg.descriptor())
    assert back.cfg == mcfg
    for (n, a), (m, b) in zip(model.state().items(), back.state().items()):
        assert n == m
        np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(back.forward(x), model.forward(x))


def test_checkpoint_wrong_architecture(tmp_path):
    model = init_model(XlcnetConfig(M=16, F=4, n_conv_blocks=2), 0)
    save_model(tmp_path / "m", model)
    with pytest.raises(FormatError, match="architecture"):
        load_model(tmp_path / "m", XlcnetConfig(M=16, F=8, n_conv_blocks=2).descriptor())


def test_checkpoint_shape_mismatch(tmp_path):
    model = init_model(XlcnetConfig(M=16, F=4, n_conv_blocks=2), 0)
    save_model(tmp_path / "m", model)
    tensors = read_weights(tmp_path / "m")
    tensors["tail.conv.weight"] = np.zeros((1, 1), np.float32)
    write_weights(tmp_path / "m", tensors)
    with pytest.raises(FormatError, match="tail.conv.weight"):
        load_model(tmp_path / "m")


def test_checkpoint_missing_tensor(tmp_path):
    model = init_model(XlcnetConfig(M=16, F=4, n_conv_blocks=2), 0)
    save_model(tmp_path / "m", model)
    tensors = read_weights(tmp_path / "m")
    del tensors["conv1.bn.running_var"]
    write_weights(tmp_path / "m", tensors)
    with pytest.raises(FormatError, match="running_var"):
        load_model(tmp_path / "m")


def test_training_state_restores_adam(tmp_path):
    model = init_model(XlcnetConfig(M=16, F=4, n_conv_blocks=1), 0)
    opt = Adam(dict(model.named_parameters()), lr=1e-3)
    for t in model.parameters():
        t.grad = np.ones_like(t.data)
    opt.step()
    opt.step()
    save_model(tmp_path / "m", model, epoch=4, optimizer=opt)
    back, epoch, opt2 = load_training_state(tmp_path / "m", 1e-3)
    assert epoch == 4 and opt2.step_count == 2
    for name in opt.params:
        np.testing.assert_array_equal(opt2.m[name], opt.m[name])
        np.testing.assert_array_equal(opt2.v[name], opt.v[name])
    # and a plain load ignores the optimizer state
    load_model(tmp_path / "m")
