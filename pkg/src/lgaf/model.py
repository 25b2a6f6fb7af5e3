"""Backbone + local/global branches + fusion + margin head, per fusion mode.

Fusion modes mirror the ablation variants:

* ``local_only``  - MHMS branch only (no GFE parameters)
* ``global_only`` - GFE branch only (no MHMS parameters); plain margin-loss model
* ``direct_add``  - both branches, fixed 0.5/0.5 weights
* ``lgf``         - both branches, feature-norm attention weights
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from lgaf.backbone import BackboneConfig, build_backbone
from lgaf.gfe import GlobalHead
from lgaf.lgf import EmbeddingBundle, FusionState, batch_statistics, feature_quality, fuse, lgf_forward, update_ema
from lgaf.margin import MarginHead, classification_loss
from lgaf.mhms import MHMS, MHMSConfig
from lgaf.nn import Module
from lgaf.rng import RngStream
from lgaf.tensor import Tensor

FUSION_MODES = ("local_only", "global_only", "direct_add", "lgf")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mhms: MHMSConfig = field(default_factory=MHMSConfig)
    n_classes: int = 20
    gfe_batch_norm: bool = False
    margin: str = "cosface"
    margin_s: float = 64.0
    margin_m: float | None = None
    lgf_h: float = 0.333
    lgf_alpha: float = 0.01
    lgf_eps: float = 1e-6

    @property
    def embedding_dim(self) -> int:
        return self.mhms.embedding_dim


class LGAFModel(Module):
    def __init__(self, cfg: ModelConfig, fusion_mode: str, rng: RngStream, dtype=np.float32):
        super().__init__("", rng, dtype)
        if fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {fusion_mode!r}")
        self.cfg = cfg
        self.fusion_mode = fusion_mode
        self.backbone = self.add_module("backbone", build_backbone(cfg.backbone, rng, dtype))
        fshape = cfg.backbone.feature_shape
        self.mhms = None
        self.gfe = None
        if fusion_mode != "global_only":
            self.mhms = self.add_module("mhms", MHMS(cfg.mhms, fshape, rng, dtype=dtype))
        if fusion_mode != "local_only":
            self.gfe = self.add_module(
                "gfe", GlobalHead(fshape, cfg.embedding_dim, rng, batch_norm=cfg.gfe_batch_norm, dtype=dtype)
            )
        self.margin = self.add_module(
            "margin",
            MarginHead(cfg.embedding_dim, cfg.n_classes, rng, cfg.margin, cfg.margin_s, cfg.margin_m, dtype=dtype),
        )
        self.fusion_state = FusionState(alpha=cfg.lgf_alpha, h=cfg.lgf_h, eps=cfg.lgf_eps)

    def train(self, mode: bool = True):
        super().train(mode)
        self.fusion_state = replace(self.fusion_state, mode="train" if mode else "eval")
        return self

    def branches(self, images: Tensor) -> tuple[Tensor | None, Tensor | None]:
        fmap = self.backbone(images)
        f_local = self.mhms(fmap) if self.mhms is not None else None
        f_global = self.gfe(fmap) if self.gfe is not None else None
        return f_local, f_global

    def embed(self, images) -> EmbeddingBundle:
        """Forward to the fused embedding; in train mode this advances the EMA state."""
        images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        f_local, f_global = self.branches(images)
        return self.fuse_branches(f_local, f_global)

    def fuse_branches(self, f_local, f_global) -> EmbeddingBundle:
        mode = self.fusion_mode
        if mode == "lgf":
            bundle, self.fusion_state = lgf_forward(f_local, f_global, self.fusion_state)
            return bundle
        if mode == "local_only":
            z = feature_quality(f_local)
            return EmbeddingBundle(kappa=f_local, f_local=f_local, z_local=z,
                                   gamma_local=np.ones_like(z), gamma_global=np.zeros_like(z))
        if mode == "global_only":
            z = feature_quality(f_global)
            return EmbeddingBundle(kappa=f_global, f_global=f_global, z_global=z,
                                   gamma_local=np.zeros_like(z), gamma_global=np.ones_like(z))
        z_l, z_g = feature_quality(f_local), feature_quality(f_global)
        if self.fusion_state.mode == "train" and len(z_l) >= 2:
            # running norm statistics are tracked for reporting only
            st = update_ema(self.fusion_state, *batch_statistics(z_l), "local")
            self.fusion_state = update_ema(st, *batch_statistics(z_g), "global")
        half = np.full(len(z_l), 0.5)
        return EmbeddingBundle(kappa=fuse(f_local, f_global, half, half), f_local=f_local, f_global=f_global,
                               z_local=z_l, z_global=z_g, gamma_local=half, gamma_global=half.copy())

    def loss(self, images, labels) -> tuple[Tensor, EmbeddingBundle, Tensor]:
        bundle = self.embed(images)
        logits = self.margin.logits(bundle.kappa, labels)
        return classification_loss(logits, labels), bundle, logits


def assemble_model(cfg: ModelConfig, fusion_mode: str, seed: int = 0, dtype=np.float32) -> LGAFModel:
    model = LGAFModel(cfg, fusion_mode, RngStream(seed, name="init"), dtype=dtype)
    names = [n for n, _ in model.named_parameters()]
    if len(names) != len(set(names)):
        raise RuntimeError("duplicate parameter names in assembled model")
    return model
