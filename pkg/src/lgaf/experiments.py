"""Desk-scale experiment recipes: the ablation ordering study and the norm-correlation study.

Both train on synthetic identities and evaluate on a disjoint identity range.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lgaf.backbone import BackboneConfig
from lgaf.data import gen_synthetic_faces
from lgaf.degradation import DegradationSpec, apply_deformation, apply_occlusion, norm_correlation, random_side
from lgaf.evaluation import verify
from lgaf.mhms import MHMSConfig
from lgaf.model import ModelConfig, assemble_model
from lgaf.rng import RngStream
from lgaf.training import TrainConfig, embed_dataset, train

HELDOUT_ID_OFFSET = 10_000
SPLIT_LEVELS = {"occlusion": 0.4, "deformation": 3.0}


def desk_model_config(n_classes: int = 20, **overrides) -> ModelConfig:
    """Default model with the batch-norm flags on (needed for stable SGD at lr 0.1)."""
    return ModelConfig(
        backbone=BackboneConfig(batch_norm=True),
        mhms=MHMSConfig(batch_norm=True),
        gfe_batch_norm=True,
        n_classes=n_classes,
        **overrides,
    )


def train_desk_model(fusion_mode: str, seed: int, epochs: int = 30, n_ids: int = 20, n_per_id: int = 50,
                     data_seed: int = 0, out_dir=None, log=None):
    data = gen_synthetic_faces(n_ids, n_per_id, (32, 32), seed=data_seed)
    model = assemble_model(desk_model_config(n_ids), fusion_mode, seed=seed)
    cfg = TrainConfig(total_epochs=epochs, batch_size=64, seed=seed, fusion_mode=fusion_mode)
    result = train(model, data.images, data.labels, cfg, out_dir=out_dir, log=log)
    return model, result


@dataclass
class VerificationSplit:
    images: np.ndarray
    labels: np.ndarray
    pairs: list  # (index_a, index_b, same); image b of every pair is degraded

    def __len__(self):
        return len(self.pairs)


def make_pairs(labels: np.ndarray, n_pairs: int, rng: RngStream) -> list:
    """Balanced same/different index pairs, interleaved so every fold is balanced."""
    by_id = {int(i): np.flatnonzero(labels == i) for i in np.unique(labels)}
    ids = sorted(by_id)
    out = []
    for k in range(n_pairs):
        if k % 2 == 0:
            members = by_id[ids[int(rng.integers(len(ids)))]]
            a, b = rng.generator.choice(members, 2, replace=False)
            out.append((int(a), int(b), True))
        else:
            i, j = rng.generator.choice(len(ids), 2, replace=False)
            out.append((int(rng.generator.choice(by_id[ids[i]])), int(rng.generator.choice(by_id[ids[j]])), False))
    return out


def make_verification_split(kind: str, level: float | None = None, n_ids: int = 20, n_per_id: int = 10,
                            n_pairs: int = 600, data_seed: int = 0, split_seed: int = 0) -> VerificationSplit:
    """Held-out identities; each pair compares a clean image with a degraded one.

    Occlusion covers a randomly chosen side; deformation uses a per-image warp.
    ``kind="clean"`` leaves both sides untouched.
    """
    data = gen_synthetic_faces(n_ids, n_per_id, (32, 32), seed=data_seed, id_offset=HELDOUT_ID_OFFSET)
    rng = RngStream(split_seed, name=f"verification/{kind}")
    pairs = make_pairs(data.labels, n_pairs, rng)
    n = len(data.labels)
    images = [data.images]
    degraded = np.empty_like(data.images)
    level = SPLIT_LEVELS.get(kind, 0.0) if level is None else level
    for i, img in enumerate(data.images):
        s = split_seed * 100_003 + i
        if kind == "occlusion":
            degraded[i] = apply_occlusion(img, level, random_side(s))
        elif kind == "deformation":
            degraded[i] = apply_deformation(img, level, s)
        elif kind == "clean":
            degraded[i] = img
        else:
            raise ValueError(f"unknown split kind {kind!r}")
    images.append(degraded)
    pairs = [(a, b + n, same) for a, b, same in pairs]
    return VerificationSplit(np.concatenate(images), np.concatenate([data.labels, data.labels]), pairs)


def verification_accuracy(model, split: VerificationSplit, folds: int = 10) -> float:
    emb = embed_dataset(model, split.images)
    return verify(split.pairs, emb.kappa_unit, folds)


def probe_images(n: int = 40, data_seed: int = 0) -> np.ndarray:
    """Clean held-out images for the norm-correlation ladders (two per identity)."""
    data = gen_synthetic_faces(max(2, n // 2), 2, (32, 32), seed=data_seed, id_offset=HELDOUT_ID_OFFSET)
    return data.images[:n]


def correlation_study(model, kinds=("blur", "occlusion", "deformation"), n_probes: int = 40, seed: int = 0):
    probes = probe_images(n_probes)
    return {k: norm_correlation(model, probes, DegradationSpec(k), seed=seed) for k in kinds}
