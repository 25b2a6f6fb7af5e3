"""Checkpoint directories: ``manifest.json`` plus a raw little-endian float32 blob.

The manifest indexes every tensor by name with dtype, shape, byte offset and
byte length, carries the SHA-256 of the blob, the fusion state, the model
configuration and training progress. Tensors are written in sorted name
order, back to back, so offsets tile the blob exactly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os

import numpy as np

from lgaf.backbone import BackboneConfig
from lgaf.lgf import FusionState
from lgaf.mhms import MHMSConfig
from lgaf.model import ModelConfig, assemble_model

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_LE_F32 = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    for sub in ("backbone", "mhms"):
        d[sub] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[sub].items()}
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    tup = lambda sub: {k: tuple(v) if isinstance(v, list) else v for k, v in sub.items()}  # noqa: E731
    d["backbone"] = BackboneConfig(**tup(d["backbone"]))
    d["mhms"] = MHMSConfig(**tup(d["mhms"]))
    return ModelConfig(**d)


def model_tensors(model) -> dict[str, np.ndarray]:
    """Parameters and buffers by name."""
    out = {name: p.data for name, p in model.named_parameters()}
    for name, obj, attr in model.named_buffers():
        out[name] = getattr(obj, attr)
    return out


def save_checkpoint(path, model, extra: dict | None = None) -> str:
    """Write ``model`` to directory ``path`` and return the manifest path."""
    os.makedirs(path, exist_ok=True)
    tensors = model_tensors(model)
    index, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_LE_F32)
        raw = arr.tobytes()
        index[name] = {"dtype": "float32", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    with open(os.path.join(path, BLOB), "wb") as f:
        f.write(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "fusion_mode": model.fusion_mode,
        "model_config": model_config_to_dict(model.cfg),
        "fusion_state": model.fusion_state.to_dict(),
        "tensors": index,
        "blob": {"file": BLOB, "nbytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()},
        "trained_steps": int(getattr(model, "trained_steps", 0)),
    }
    manifest.update(extra or {})
    mpath = os.path.join(path, MANIFEST)
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return mpath


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a checkpoint directory; returns (manifest, tensors)."""
    mpath = os.path.join(path, MANIFEST)
    if not os.path.exists(mpath):
        raise CheckpointError(f"no {MANIFEST} in {path}")
    with open(mpath) as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})")
    with open(os.path.join(path, manifest["blob"]["file"]), "rb") as f:
        blob = f.read()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob"]["sha256"]:
        raise CheckpointError(
            f"checksum mismatch for {manifest['blob']['file']}: expected {manifest['blob']['sha256']}, got {digest}"
            f" ({len(blob)} of {manifest['blob']['nbytes']} bytes)"
        )
    tensors = {}
    for name, entry in manifest["tensors"].items():
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise CheckpointError(f"tensor {name} extends past end of blob")
        tensors[name] = np.frombuffer(blob, dtype=_LE_F32, count=n // 4, offset=start).reshape(entry["shape"]).copy()
    return manifest, tensors


def restore_model(path, dtype=np.float32):
    """Rebuild the model recorded in a checkpoint and load its tensors and fusion state."""
    manifest, tensors = load_checkpoint(path)
    cfg = model_config_from_dict(manifest["model_config"])
    model = assemble_model(cfg, manifest["fusion_mode"], seed=0, dtype=dtype)
    expected = set(model_tensors(model))
    if expected != set(tensors):
        missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
        raise CheckpointError(f"tensor set mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in model.named_parameters():
        p.data = tensors[name].astype(dtype)
    for name, obj, attr in model.named_buffers():
        setattr(obj, attr, tensors[name].astype(dtype))
    model.fusion_state = FusionState.from_dict(manifest["fusion_state"])
    model.trained_steps = manifest.get("trained_steps", 0)
    model.eval()
    return model, manifest
