"""Model checkpoints on top of the XLNW weight format.

Besides the model tensors a checkpoint carries three reserved entries:
``__arch__`` (architecture descriptor as UTF-8 byte values), ``__epoch__``
(last completed epoch) and, when saved with an optimizer, ``__adam_step__``
plus ``adam.m.<name>`` / ``adam.v.<name>`` moment tensors.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .formats import FormatError, decode_text, encode_text, read_weights, write_weights
from .models import build_model, parse_descriptor
from .nn import Adam


def save_model(path, model, epoch: int = 0, optimizer: Adam | None = None) -> None:
    tensors = OrderedDict()
    tensors["__arch__"] = encode_text(model.cfg.descriptor())
    tensors["__epoch__"] = np.array([epoch], dtype=np.float32)
    for name, t in model.state().items():
        tensors[name] = t.data
    if optimizer is not None:
        tensors["__adam_step__"] = np.array([optimizer.step_count], dtype=np.float32)
        for name in optimizer.params:
            tensors[f"adam.m.{name}"] = optimizer.m[name]
            tensors[f"adam.v.{name}"] = optimizer.v[name]
    write_weights(path, tensors)


def _load(path, expected_descriptor: str | None = None, dtype=np.float32):
    tensors = read_weights(path)
    if "__arch__" not in tensors:
        raise FormatError(f"{path}: checkpoint has no architecture descriptor")
    descriptor = decode_text(tensors.pop("__arch__"))
    if expected_descriptor is not None and descriptor != expected_descriptor:
        raise FormatError(f"{path}: checkpoint architecture {descriptor!r} != {expected_descriptor!r}")
    cfg = parse_descriptor(descriptor)
    model = build_model(cfg, np.random.default_rng(0), dtype)
    epoch = int(tensors.pop("__epoch__")[0]) if "__epoch__" in tensors else 0
    live = model.state()
    for name, t in live.items():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name!r}")
        arr = tensors.pop(name)
        if arr.shape != t.data.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {arr.shape}, model expects {t.data.shape}")
        t.data = arr.astype(dtype)
    return model, epoch, tensors


def load_model(path, expected_descriptor: str | None = None, dtype=np.float32):
    model, _, rest = _load(path, expected_descriptor, dtype)
    extra = [n for n in rest if not (n == "__adam_step__" or n.startswith("adam."))]
    if extra:
        raise FormatError(f"{path}: unexpected tensors {extra[:3]}")
    return model


def load_training_state(path, learning_rate: float, dtype=np.float32):
    """Model, last epoch and a restored optimizer (fresh if none was saved)."""
    model, epoch, rest = _load(path, None, dtype)
    opt = Adam(dict(model.named_parameters()), lr=learning_rate)
    if "__adam_step__" in rest:
        opt.step_count = int(rest["__adam_step__"][0])
        for name in opt.params:
            opt.m[name] = rest[f"adam.m.{name}"].astype(dtype)
            opt.v[name] = rest[f"adam.v.{name}"].astype(dtype)
    return model, epoch, opt
