from . import tensor as ops
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import (
    Conv2d,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    causal_mask,
)
from .optim import Adam, cosine_lr
from .tensor import Tensor, topological_order

__all__ = [
    "Adam",
    "Conv2d",
    "Embedding",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadAttention",
    "Tensor",
    "causal_mask",
    "cosine_lr",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
    "topological_order",
]
