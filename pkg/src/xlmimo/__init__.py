"""Hybrid near/far-field XL-MIMO channel estimation on plain numpy.

Submodules: ``channel`` (geometry and signal model), ``nn`` (layer kernel
with hand-written gradients), ``models`` (MAT-CENet and XLCNet),
``estimators`` (LS, LMMSE, OMP), ``harness`` (data, training, NMSE
experiments), ``complexity``, ``formats``/``checkpoint`` (binary files)
and ``cli``.
"""

from .channel import ArrayConfig, ChannelConfig, FieldKind, PathParams, SignalConfig
from .models import MatCenet, MatCenetConfig, Xlcnet, XlcnetConfig, build_model

__version__ = "0.1.0"

__all__ = [
    "ArrayConfig",
    "ChannelConfig",
    "FieldKind",
    "MatCenet",
    "MatCenetConfig",
    "PathParams",
    "SignalConfig",
    "Xlcnet",
    "XlcnetConfig",
    "build_model",
    "__version__",
]
