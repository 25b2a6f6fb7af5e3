"""Cosine classification head with CosFace / ArcFace target margins."""
from __future__ import annotations

import numpy as np

from lgaf.nn import Module
from lgaf.tensor import Tensor, arcface_logits, cosface_logits, linear, normalize, softmax_cross_entropy

DEFAULT_MARGIN = {"cosface": 0.4, "arcface": 0.5, "none": 0.0}


class MarginHead(Module):
    """Class weights W [D, n_classes]; logits use unit embeddings and unit columns."""

    def __init__(self, embedding_dim, n_classes, rng, kind="cosface", s=64.0, m=None, name="margin", dtype=np.float32):
        super().__init__(name, rng, dtype)
        if kind not in DEFAULT_MARGIN:
            raise ValueError(f"margin kind must be one of {sorted(DEFAULT_MARGIN)}, got {kind!r}")
        self.kind = kind
        self.s = float(s)
        self.m = float(DEFAULT_MARGIN[kind] if m is None else m)
        stream = rng.substream(self._full("weight"))
        self.weight = self.add_param("weight", stream.normal(0.0, 1.0, size=(embedding_dim, n_classes)))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def logits(self, kappa: Tensor, labels=None) -> Tensor:
        """Margin logits for training; plain s*cos when labels is None."""
        cos = cosine_logits(self, kappa)
        if labels is None or self.kind == "none":
            return cos * self.s
        if self.kind == "cosface":
            return cosface_logits(cos, labels, self.s, self.m)
        return arcface_logits(cos, labels, self.s, self.m)


def cosine_logits(head: MarginHead, kappa: Tensor) -> Tensor:
    """cos(theta)[i, c] between row-normalized kappa and column-normalized W."""
    norms = np.sqrt((kappa.data.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ValueError(f"cosine_logits: embedding row {bad} has zero norm")
    return linear(normalize(kappa, axis=1), normalize(head.weight, axis=0))


def classification_loss(logits: Tensor, labels) -> Tensor:
    return softmax_cross_entropy(logits, labels)
