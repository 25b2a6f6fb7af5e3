"""Global feature extraction: one fully connected projection of the feature map."""
from __future__ import annotations

import numpy as np

from lgaf.nn import BatchNorm1d, Module
from lgaf.tensor import ShapeError, Tensor, flatten, linear


class GlobalHead(Module):
    def __init__(self, feature_shape, embedding_dim, rng, batch_norm=False, name="gfe", dtype=np.float32):
        super().__init__(name, rng, dtype)
        self.feature_shape = tuple(feature_shape)
        fan_in = int(np.prod(self.feature_shape))
        self.embedding_dim = embedding_dim
        self.weight = self.he_param("weight", (fan_in, embedding_dim), fan_in)
        self.bias = self.zeros_param("bias", embedding_dim)
        self.bn = self.add_module("bn", BatchNorm1d(self._full("bn"), embedding_dim, dtype=dtype)) if batch_norm else None

    def __call__(self, fmap: Tensor) -> Tensor:
        return global_embed(self, fmap)


def global_embed(head: GlobalHead, fmap: Tensor) -> Tensor:
    """Flatten -> linear (-> batch norm). The result is not L2-normalized."""
    if tuple(fmap.shape[1:]) != head.feature_shape:
        raise ShapeError(f"gfe expects feature map {head.feature_shape}, got {tuple(fmap.shape[1:])}")
    out = linear(flatten(fmap), head.weight, head.bias)
    return head.bn(out) if head.bn is not None else out
