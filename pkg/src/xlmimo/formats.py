"""Little-endian binary formats: datasets (XLCE), weights (XLNW), covariances (XLCV)."""

from __future__ import annotations

import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

DATASET_MAGIC = b"XLCE"
WEIGHTS_MAGIC = b"XLNW"
COVARIANCE_MAGIC = b"XLCV"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Pairs of LS estimates and true channels, both ``(n, M)`` complex."""

    h_ls: np.ndarray
    h: np.ndarray
    snr_db: float = math.nan

    def __post_init__(self):
        if self.h_ls.shape != self.h.shape or self.h.ndim != 2:
            raise ValueError(f"mismatched dataset arrays {self.h_ls.shape} / {self.h.shape}")

    @property
    def M(self) -> int:
        return self.h.shape[1]

    def __len__(self):
        return self.h.shape[0]


def _interleave(z: np.ndarray) -> np.ndarray:
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],), dtype="<f4")
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def _deinterleave(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    return x[..., 0::2] + 1j * x[..., 1::2]


def _open(path, mode):
    try:
        return open(path, mode)
    except OSError as exc:
        raise OSError(f"cannot open {os.fspath(path)!r}: {exc.strerror}") from exc


def write_dataset(path, ds: Dataset) -> None:
    n, M = ds.h.shape
    header = DATASET_MAGIC + struct.pack("<IIIf", FORMAT_VERSION, M, n, ds.snr_db)
    body = np.concatenate([_interleave(ds.h_ls), _interleave(ds.h)], axis=1)
    with _open(path, "wb") as f:
        f.write(header)
        f.write(body.tobytes())


def read_dataset(path) -> Dataset:
    with _open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not an XLCE dataset")
    version, M, n, snr = struct.unpack_from("<IIIf", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    body = np.frombuffer(raw, dtype="<f4", offset=20)
    if body.size != n * 4 * M:
        raise FormatError(f"{path}: expected {n} samples of M={M}, file holds {body.size} floats")
    body = body.reshape(n, 4 * M)
    return Dataset(_deinterleave(body[:, :2 * M]), _deinterleave(body[:, 2 * M:]), float(snr))


def write_weights(path, tensors: "OrderedDict[str, np.ndarray]") -> None:
    chunks = [WEIGHTS_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with _open(path, "wb") as f:
        f.write(b"".join(chunks))


def read_weights(path) -> "OrderedDict[str, np.ndarray]":
    with _open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not an XLNW checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def encode_text(text: str) -> np.ndarray:
    """Store a string as a rank-1 float array of its UTF-8 byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8).tolist()).decode("utf-8")


def write_covariance(path, R: np.ndarray) -> None:
    M = R.shape[0]
    if R.shape != (M, M):
        raise ValueError(f"covariance must be square, got {R.shape}")
    flat = np.empty(2 * M * M, dtype="<f8")
    flat[0::2] = R.real.reshape(-1)
    flat[1::2] = R.imag.reshape(-1)
    with _open(path, "wb") as f:
        f.write(COVARIANCE_MAGIC + struct.pack("<I", M) + flat.tobytes())


def read_covariance(path) -> np.ndarray:
    with _open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != COVARIANCE_MAGIC:
        raise FormatError(f"{path}: not an XLCV covariance file")
    (M,) = struct.unpack_from("<I", raw, 4)
    flat = np.frombuffer(raw, dtype="<f8", offset=8)
    if flat.size != 2 * M * M:
        raise FormatError(f"{path}: expected {M}x{M} complex entries")
    return (flat[0::2] + 1j * flat[1::2]).reshape(M, M)
