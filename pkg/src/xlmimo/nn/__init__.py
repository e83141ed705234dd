"""Small numpy neural-network kernel with explicit backward passes."""

from .attention import (
    AttentionConfig,
    MultiHeadAttention,
    scaled_dot_product_attention,
    scaled_dot_product_attention_backward,
)
from .gradcheck import GradCheckReport, grad_check, numeric_gradient, relative_error
from .layers import BatchNorm, Conv2d, LayerNorm, Linear, ReLU, relu, softmax
from .optim import Adam
from .tensor import Module, Tensor

__all__ = [
    "Adam",
    "AttentionConfig",
    "BatchNorm",
    "Conv2d",
    "GradCheckReport",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadAttention",
    "ReLU",
    "Tensor",
    "grad_check",
    "numeric_gradient",
    "relative_error",
    "relu",
    "scaled_dot_product_attention",
    "scaled_dot_product_attention_backward",
    "softmax",
]
