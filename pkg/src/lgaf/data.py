"""Synthetic face-like identity data and image file manifests."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from lgaf.rng import RngStream


@dataclass
class LabeledImages:
    images: np.ndarray  # [N, 3, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _identity_params(rng: RngStream) -> dict:
    u = rng.uniform
    skin = u(0.45, 0.85, 3)
    return {
        "face_c": (u(0.46, 0.54), u(0.46, 0.54)),
        "face_r": (u(0.34, 0.44), u(0.28, 0.38)),
        "skin": skin,
        "bg": u(0.05, 0.3, 3),
        "eye_y": u(0.34, 0.46),
        "eye_dx": u(0.11, 0.2),
        "eye_r": u(0.035, 0.07),
        "eye_col": u(0.0, 0.35, 3),
        "brow_dy": u(0.06, 0.11),
        "brow_col": u(0.0, 0.4, 3),
        "nose_y": u(0.5, 0.6),
        "nose_len": u(0.05, 0.12),
        "nose_col": skin * u(0.5, 0.8),
        "mouth_y": u(0.67, 0.78),
        "mouth_w": u(0.08, 0.18),
        "mouth_col": np.array([u(0.5, 0.9), u(0.1, 0.35), u(0.1, 0.4)]),
        "marks": [(u(0.25, 0.75), u(0.25, 0.75), u(0.02, 0.05), u(-0.35, 0.35, 3)) for _ in range(2)],
    }


def _blob(yy, xx, cy, cx, ry, rx):
    return np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))


def render_face(params: dict, size, shift=(0.0, 0.0), brightness=1.0) -> np.ndarray:
    """Render one identity pattern as a [3, H, W] float image."""
    h, w = size
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h - shift[0], (np.arange(w) + 0.5) / w - shift[1], indexing="ij")
    fy, fx = params["face_c"]
    ry, rx = params["face_r"]
    face = 1.0 / (1.0 + np.exp(((((yy - fy) / ry) ** 2 + ((xx - fx) / rx) ** 2) - 1.0) * 12.0))
    img = params["bg"][:, None, None] * (1 - face) + params["skin"][:, None, None] * face

    def paint(mask, color):
        nonlocal img
        mask = mask * face
        img = img * (1 - mask) + color[:, None, None] * mask

    er = params["eye_r"]
    for side in (-1, 1):
        ex = fx + side * params["eye_dx"]
        paint(_blob(yy, xx, params["eye_y"], ex, er * 0.7, er), params["eye_col"])
        paint(0.8 * _blob(yy, xx, params["eye_y"] - params["brow_dy"], ex, er * 0.35, er * 1.6), params["brow_col"])
    ny, nl = params["nose_y"], params["nose_len"]
    paint(0.7 * _blob(yy, xx, ny, fx, nl, 0.03), params["nose_col"])
    paint(_blob(yy, xx, params["mouth_y"], fx, 0.025, params["mouth_w"]), params["mouth_col"])
    for my, mx, mr, dc in params["marks"]:
        paint(0.6 * _blob(yy, xx, my, mx, mr, mr), np.clip(params["skin"] + dc, 0, 1))
    return img * brightness


def gen_synthetic_faces(n_ids: int, n_per_id: int, size=(32, 32), seed: int = 0, id_offset: int = 0) -> LabeledImages:
    """Identity-major labeled set of rendered faces with per-image nuisance.

    Each identity draws a layout of eyes, brows, nose, mouth and marks; each
    image adds a translation up to 10% of the size, brightness jitter and
    Gaussian pixel noise (sigma 0.02). ``id_offset`` selects a disjoint
    identity range under the same seed.
    """
    if n_ids < 2 or n_per_id < 2:
        raise ValueError(f"need n_ids >= 2 and n_per_id >= 2, got {n_ids}, {n_per_id}")
    h, w = size
    if h < 8 or w < 8:
        raise ValueError(f"image size must be at least 8x8, got {size}")
    root = RngStream(seed, name="synthetic_faces")
    images = np.empty((n_ids * n_per_id, 3, h, w), dtype=np.float32)
    labels = np.repeat(np.arange(n_ids, dtype=np.int64), n_per_id)
    for i in range(n_ids):
        params = _identity_params(root.substream(f"id{i + id_offset}"))
        nuisance = root.substream(f"id{i + id_offset}/images")
        for j in range(n_per_id):
            shift = nuisance.uniform(-0.1, 0.1, 2)
            bright = 1.0 + nuisance.uniform(-0.1, 0.1)
            img = render_face(params, size, shift, bright)
            img = img + nuisance.normal(0.0, 0.02, img.shape)
            images[i * n_per_id + j] = np.clip(img, 0.0, 1.0)
    return LabeledImages(images, labels)


# ---------------------------------------------------------------- files


def save_image(path, image: np.ndarray):
    np.save(path, np.asarray(image, dtype=np.float32))


def load_image(path) -> np.ndarray:
    if not str(path).endswith(".npy"):
        raise ValueError(f"only .npy images are supported, got {path}")
    return np.load(path).astype(np.float32)


def write_image_set(data: LabeledImages, out_dir, prefix="img") -> str:
    """Write one .npy per image plus ``manifest.csv`` (path,identity)."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["path", "identity"])
        for i, (img, lab) in enumerate(zip(data.images, data.labels)):
            name = f"{prefix}_{i:05d}.npy"
            save_image(os.path.join(out_dir, name), img)
            wr.writerow([name, int(lab)])
    return manifest


def _resolve(base, p):
    return p if os.path.isabs(p) else os.path.join(base, p)


def read_manifest(path) -> tuple[list[str], np.ndarray]:
    """Parse a (path,identity) CSV; relative paths resolve against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    paths, ids = [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            paths.append(_resolve(base, row["path"]))
            ids.append(int(row["identity"]))
    return paths, np.asarray(ids, dtype=np.int64)


def read_pairs(path) -> list[tuple[str, str, bool]]:
    """Parse a (pathA,pathB,same) CSV."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append((_resolve(base, row["pathA"]), _resolve(base, row["pathB"]), row["same"].strip() in ("1", "true", "True")))
    return out


def load_labeled(manifest) -> LabeledImages:
    paths, ids = read_manifest(manifest)
    return LabeledImages(np.stack([load_image(p) for p in paths]), ids)
