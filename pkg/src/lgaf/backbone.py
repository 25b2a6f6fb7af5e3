"""Desk-scale pre-activation residual backbone producing the face feature map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lgaf.nn import BatchNorm2d, Module
from lgaf.rng import RngStream
from lgaf.tensor import ShapeError, Tensor, add, conv2d, relu


@dataclass(frozen=True)
class BackboneConfig:
    input_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    channel_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    batch_norm: bool = False

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        """(c_f, h_f, w_f) of the output map."""
        h, w = self.input_size
        for _ in self.channel_widths:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return self.channel_widths[-1], h, w

    def validate(self):
        if self.blocks_per_stage < 1:
            raise ValueError(f"blocks_per_stage must be >= 1, got {self.blocks_per_stage}")
        if not self.channel_widths or min(self.channel_widths) < 1:
            raise ValueError(f"channel_widths must be positive, got {self.channel_widths}")
        _, h, w = self.feature_shape
        if h < 4 or w < 4:
            raise ValueError(
                f"input {self.input_size} with {len(self.channel_widths)} stride-2 stages "
                f"gives a {h}x{w} feature map; at least 4x4 is required"
            )


class ResidualBlock(Module):
    """relu -> conv3x3(stride) -> relu -> conv3x3, plus identity or 1x1 projection."""

    def __init__(self, name, rng, c_in, c_out, stride, batch_norm, dtype=np.float32):
        super().__init__(name, rng, dtype)
        self.stride = stride
        self.w1 = self.he_param("conv1.weight", (c_out, c_in, 3, 3), c_in * 9)
        self.b1 = self.zeros_param("conv1.bias", c_out)
        self.w2 = self.he_param("conv2.weight", (c_out, c_out, 3, 3), c_out * 9)
        self.b2 = self.zeros_param("conv2.bias", c_out)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = self.he_param("proj.weight", (c_out, c_in, 1, 1), c_in)
        self.bn1 = self.bn2 = None
        if batch_norm:
            self.bn1 = self.add_module("bn1", BatchNorm2d(self._full("bn1"), c_in, dtype=dtype))
            self.bn2 = self.add_module("bn2", BatchNorm2d(self._full("bn2"), c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        a = relu(self.bn1(x) if self.bn1 else x)
        h = conv2d(a, self.w1, self.b1, stride=self.stride, padding=1)
        h = relu(self.bn2(h) if self.bn2 else h)
        h = conv2d(h, self.w2, self.b2, stride=1, padding=1)
        shortcut = conv2d(a, self.proj, None, stride=self.stride) if self.proj is not None else x
        return add(h, shortcut)


class BackboneNet(Module):
    def __init__(self, cfg: BackboneConfig, rng: RngStream, name="backbone", dtype=np.float32):
        super().__init__(name, rng, dtype)
        self.cfg = cfg
        w0 = cfg.channel_widths[0]
        self.stem_w = self.he_param("stem.weight", (w0, cfg.in_channels, 3, 3), cfg.in_channels * 9)
        self.stem_b = self.zeros_param("stem.bias", w0)
        self.blocks = []
        c_in = w0
        for s, width in enumerate(cfg.channel_widths):
            for b in range(cfg.blocks_per_stage):
                stride = 2 if b == 0 else 1
                local = f"stage{s}.block{b}"
                block = ResidualBlock(self._full(local), rng, c_in, width, stride, cfg.batch_norm, dtype)
                self.blocks.append(self.add_module(local, block))
                c_in = width

    def __call__(self, images: Tensor) -> Tensor:
        return forward_backbone(self, images)


def build_backbone(cfg: BackboneConfig, rng: RngStream, dtype=np.float32) -> BackboneNet:
    cfg.validate()
    return BackboneNet(cfg, rng, dtype=dtype)


def forward_backbone(net: BackboneNet, images: Tensor) -> Tensor:
    """images [N, C, H, W] -> feature map [N, c_f, h_f, w_f]."""
    cfg = net.cfg
    if images.ndim != 4 or images.shape[1] != cfg.in_channels:
        raise ShapeError(f"backbone expects [N,{cfg.in_channels},H,W], got {images.shape}")
    if tuple(images.shape[2:]) != tuple(cfg.input_size):
        raise ShapeError(f"backbone expects spatial size {tuple(cfg.input_size)}, got {images.shape[2:]}")
    x = conv2d(images, net.stem_w, net.stem_b, stride=1, padding=1)
    for block in net.blocks:
        x = block(x)
    return relu(x)
