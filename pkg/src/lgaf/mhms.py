"""Multi-head multi-scale local feature extraction.

Each head convolves the shared feature map at several kernel sizes, gates
every scale with its own spatial attention map (two 1x1 convolutions,
relu then sigmoid), concatenates the scales on the channel axis, applies
squeeze-and-excitation channel gates, and projects the flattened result to
``embedding_dim / heads`` features. Head outputs are concatenated.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from lgaf.nn import BatchNorm1d, Module
from lgaf.tensor import (
    ShapeError,
    Tensor,
    concat,
    conv2d,
    flatten,
    global_avg_pool,
    linear,
    mul,
    relu,
    reshape,
    sigmoid,
)


@dataclass(frozen=True)
class MHMSConfig:
    scales: tuple[int, ...] = (1, 3, 5)
    heads: int = 4
    embedding_dim: int = 64
    lanet_reduction: int = 8
    se_reduction: int = 16
    scale_channels: int | None = None  # None -> c_f
    batch_norm: bool = False

    @property
    def head_dim(self) -> int:
        return self.embedding_dim // self.heads

    def channels(self, c_f: int) -> int:
        return self.scale_channels or c_f

    def validate(self, c_f: int):
        if self.heads < 1 or self.embedding_dim % self.heads:
            raise ValueError(f"embedding_dim {self.embedding_dim} not divisible by heads {self.heads}")
        if not self.scales or any(k < 1 or k % 2 == 0 for k in self.scales):
            raise ValueError(f"scales must be odd positive kernel sizes, got {self.scales}")
        c_s = self.channels(c_f)
        if c_s < self.lanet_reduction or c_s % self.lanet_reduction:
            raise ValueError(f"scale channels {c_s} not divisible by lanet_reduction {self.lanet_reduction}")
        c_cat = c_s * len(self.scales)
        if c_cat < self.se_reduction or c_cat % self.se_reduction:
            raise ValueError(f"concatenated channels {c_cat} not divisible by se_reduction {self.se_reduction}")


class LANet(Module):
    """Spatial attention: 1x1 conv (C -> C/r, relu), 1x1 conv (C/r -> 1, sigmoid)."""

    def __init__(self, name, rng, channels, reduction, dtype=np.float32):
        super().__init__(name, rng, dtype)
        if channels < reduction:
            raise ValueError(f"LANet needs channels >= reduction, got {channels} < {reduction}")
        mid = channels // reduction
        self.w1 = self.he_param("conv1.weight", (mid, channels, 1, 1), channels)
        self.b1 = self.zeros_param("conv1.bias", mid)
        self.w2 = self.he_param("conv2.weight", (1, mid, 1, 1), mid)
        self.b2 = self.zeros_param("conv2.bias", 1)
        self.gate_override: float | None = None

    def attention(self, fmap: Tensor) -> Tensor:
        """Gate map in (0, 1), shape [N, 1, H, W]."""
        n, _, h, w = fmap.shape
        if self.gate_override is not None:
            return Tensor(np.full((n, 1, h, w), self.gate_override, dtype=fmap.dtype))
        hidden = relu(conv2d(fmap, self.w1, self.b1))
        return sigmoid(conv2d(hidden, self.w2, self.b2))


class SEGate(Module):
    """Squeeze (GAP) and excitation (C -> C/r relu -> C sigmoid) channel gates."""

    def __init__(self, name, rng, channels, reduction, dtype=np.float32):
        super().__init__(name, rng, dtype)
        if channels < reduction:
            raise ValueError(f"SE needs channels >= reduction, got {channels} < {reduction}")
        mid = channels // reduction
        self.w1 = self.he_param("fc1.weight", (channels, mid), channels)
        self.b1 = self.zeros_param("fc1.bias", mid)
        self.w2 = self.he_param("fc2.weight", (mid, channels), mid)
        self.b2 = self.zeros_param("fc2.bias", channels)
        self.gate_override: float | None = None

    def gates(self, fmap: Tensor) -> Tensor:
        """Per-channel gates in (0, 1), shape [N, C]."""
        if self.gate_override is not None:
            return Tensor(np.full(fmap.shape[:2], self.gate_override, dtype=fmap.dtype))
        squeezed = global_avg_pool(fmap)
        return sigmoid(linear(relu(linear(squeezed, self.w1, self.b1)), self.w2, self.b2))


def lanet(params: LANet, fmap: Tensor) -> Tensor:
    """Spatially gated map: fmap * A, A broadcast over channels."""
    return mul(fmap, params.attention(fmap))


def se_gate(params: SEGate, fmap: Tensor) -> Tensor:
    n, c = fmap.shape[:2]
    return mul(fmap, reshape(params.gates(fmap), (n, c, 1, 1)))


class MSNetHead(Module):
    def __init__(self, name, rng, cfg: MHMSConfig, feature_shape, dtype=np.float32):
        super().__init__(name, rng, dtype)
        c_f, h_f, w_f = feature_shape
        cfg.validate(c_f)
        self.cfg = cfg
        self.feature_shape = tuple(feature_shape)
        c_s = cfg.channels(c_f)
        self.conv_w, self.conv_b, self.lanets = [], [], []
        for k in cfg.scales:
            self.conv_w.append(self.he_param(f"scale{k}.conv.weight", (c_s, c_f, k, k), c_f * k * k))
            self.conv_b.append(self.zeros_param(f"scale{k}.conv.bias", c_s))
            self.lanets.append(
                self.add_module(f"scale{k}.lanet", LANet(self._full(f"scale{k}.lanet"), rng, c_s, cfg.lanet_reduction, dtype))
            )
        c_cat = c_s * len(cfg.scales)
        self.se = self.add_module("se", SEGate(self._full("se"), rng, c_cat, cfg.se_reduction, dtype))
        fan_in = c_cat * h_f * w_f
        self.proj_w = self.he_param("proj.weight", (fan_in, cfg.head_dim), fan_in)
        self.proj_b = self.zeros_param("proj.bias", cfg.head_dim)
        self.bn = None
        if cfg.batch_norm:
            self.bn = self.add_module("bn", BatchNorm1d(self._full("bn"), cfg.head_dim, dtype=dtype))

    def set_gate_override(self, lanet_value: float | None = None, se_value: float | None = None):
        for la in self.lanets:
            la.gate_override = lanet_value
        self.se.gate_override = se_value

    def __call__(self, fmap: Tensor) -> Tensor:
        return msnet_forward(self, fmap)


def msnet_forward(head: MSNetHead, fmap: Tensor, record: dict | None = None) -> Tensor:
    """One head: per-scale conv + spatial gate, concat, SE gate, flatten, project.

    If ``record`` is given it receives the per-scale conv outputs, attention
    maps and the SE gate vectors as numpy arrays.
    """
    if tuple(fmap.shape[1:]) != head.feature_shape:
        raise ShapeError(f"msnet expects feature map {head.feature_shape}, got {tuple(fmap.shape[1:])}")
    per_scale = []
    for k, w, b, la in zip(head.cfg.scales, head.conv_w, head.conv_b, head.lanets):
        local = conv2d(fmap, w, b, stride=1, padding=(k - 1) // 2)
        att = la.attention(local)
        per_scale.append(mul(local, att))
        if record is not None:
            record.setdefault("conv", {})[k] = local.data
            record.setdefault("attention", {})[k] = att.data
    cat = concat(per_scale, axis=1)
    n, c = cat.shape[:2]
    gates = head.se.gates(cat)
    if record is not None:
        record["se_gates"] = gates.data
    gated = mul(cat, reshape(gates, (n, c, 1, 1)))
    out = linear(flatten(gated), head.proj_w, head.proj_b)
    return head.bn(out) if head.bn is not None else out


class MHMS(Module):
    def __init__(self, cfg: MHMSConfig, feature_shape, rng, name="mhms", dtype=np.float32):
        super().__init__(name, rng, dtype)
        self.cfg = cfg
        self.heads = [
            self.add_module(f"head{i}", MSNetHead(self._full(f"head{i}"), rng, cfg, feature_shape, dtype))
            for i in range(cfg.heads)
        ]

    def __call__(self, fmap: Tensor) -> Tensor:
        return mhms_forward(self.heads, fmap, expected_heads=self.cfg.heads)


def mhms_forward(heads, fmap: Tensor, expected_heads: int | None = None) -> Tensor:
    """f_local = concat of head outputs in head order, dimension heads * head_dim."""
    if expected_heads is not None and len(heads) != expected_heads:
        raise ValueError(f"expected {expected_heads} heads, got {len(heads)}")
    if not heads:
        raise ValueError("mhms_forward needs at least one head")
    return concat([msnet_forward(h, fmap) for h in heads], axis=1)


def dump_attention_maps(heads, fmap: Tensor) -> dict:
    """Per-head, per-scale attention maps, conv outputs and SE gates as numpy arrays."""
    dump = {}
    for i, head in enumerate(heads):
        rec: dict = {}
        msnet_forward(head, fmap, record=rec)
        dump[i] = rec
    return dump


def write_attention_dump(dump: dict, out_dir) -> str:
    """Write ``attention.bin`` (little-endian float32) plus ``attention_manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for head_idx in sorted(dump):
        rec = dump[head_idx]
        items = [(f"attention_scale{k}", "attention", k, a) for k, a in sorted(rec["attention"].items())]
        items.append(("se_gates", "se_gates", None, rec["se_gates"]))
        for name, kind, scale, arr in items:
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append(
                {"head": head_idx, "name": name, "kind": kind, "scale": scale,
                 "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
            )
            chunks.append(blob)
            offset += len(blob)
    with open(os.path.join(out_dir, "attention.bin"), "wb") as f:
        f.write(b"".join(chunks))
    manifest = os.path.join(out_dir, "attention_manifest.json")
    with open(manifest, "w") as f:
        json.dump({"dtype": "float32", "byte_order": "little", "blob": "attention.bin", "entries": entries}, f, indent=2)
    return manifest


def read_attention_dump(out_dir) -> list[dict]:
    with open(os.path.join(out_dir, "attention_manifest.json")) as f:
        manifest = json.load(f)
    with open(os.path.join(out_dir, manifest["blob"]), "rb") as f:
        blob = f.read()
    out = []
    for e in manifest["entries"]:
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"])), offset=e["offset"]).reshape(e["shape"])
        out.append({**e, "array": arr})
    return out
