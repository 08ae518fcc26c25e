"""Dense math substrate: kernels, layers with manual backward, Adam."""

from .kernels import backend_name
from .layers import Dropout, EncoderBlock, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, ReLU
from .ops import layer_norm, matmul, multi_head_attention, softmax_rows
from .optim import adam_step, zero_grads
from .tensor import ParamTensor, check_finite

__all__ = [
    "Dropout", "EncoderBlock", "FeedForward", "LayerNorm", "Linear", "Module",
    "MultiHeadAttention", "ParamTensor", "ReLU", "adam_step", "backend_name",
    "check_finite", "layer_norm", "matmul", "multi_head_attention", "softmax_rows",
    "zero_grads",
]
