"""Parameter containers shared by the network modules."""
from __future__ import annotations

import numpy as np

from lgaf.rng import RngStream
from lgaf.tensor import BatchNormState, Parameter, Tensor, batch_norm_1d, reshape, transpose


class Module:
    """Holds named parameters, buffers and child modules.

    Parameter names are full dotted paths fixed at construction, and each
    parameter is initialized from an RNG substream keyed by that path, so
    initialization does not depend on construction order.
    """

    def __init__(self, name: str, rng: RngStream | None = None, dtype=np.float32):
        self.name = name
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.training = True
        self._params: dict[str, Parameter] = {}
        self._modules: dict[str, Module] = {}

    def _full(self, local: str) -> str:
        return f"{self.name}.{local}" if self.name else local

    def add_param(self, local: str, data) -> Parameter:
        p = Parameter(np.asarray(data, dtype=self.dtype), self._full(local))
        self._params[local] = p
        return p

    def he_param(self, local: str, shape, fan_in: int) -> Parameter:
        stream = self.rng.substream(self._full(local))
        return self.add_param(local, stream.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))

    def zeros_param(self, local: str, shape) -> Parameter:
        return self.add_param(local, np.zeros(shape))

    def add_module(self, local: str, module: "Module") -> "Module":
        self._modules[local] = module
        return module

    def named_parameters(self):
        for p in self._params.values():
            yield p.name, p
        for m in self._modules.values():
            yield from m.named_parameters()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        """Non-trainable state arrays (batch-norm running statistics)."""
        for m in self._modules.values():
            yield from m.named_buffers()

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for m in self.modules():
            m.dtype = np.dtype(dtype)
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            if isinstance(m, BatchNorm1d):
                m.state.running_mean = m.state.running_mean.astype(dtype)
                m.state.running_var = m.state.running_var.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class BatchNorm1d(Module):
    def __init__(self, name, dim, rng=None, dtype=np.float32):
        super().__init__(name, rng, dtype)
        self.gamma = self.add_param("gamma", np.ones(dim))
        self.beta = self.zeros_param("beta", dim)
        self.state = BatchNormState(dim, dtype=dtype)

    def named_buffers(self):
        yield self._full("running_mean"), self.state, "running_mean"
        yield self._full("running_var"), self.state, "running_var"

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm_1d(x, self.state, self.training, self.gamma, self.beta)


class BatchNorm2d(BatchNorm1d):
    """Per-channel batch norm over [N, C, H, W] (statistics over N, H, W)."""

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        flat = reshape(transpose(x, (0, 2, 3, 1)), (n * h * w, c))
        out = batch_norm_1d(flat, self.state, self.training, self.gamma, self.beta)
        return transpose(reshape(out, (n, h, w, c)), (0, 3, 1, 2))
