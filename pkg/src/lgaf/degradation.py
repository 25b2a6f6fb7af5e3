"""Synthetic image degradations and the feature-norm correlation study.

Three degradation ladders stand in for the three low-quality categories:

* occlusion   - progressive side occlusion (missing facial region, e.g. yaw)
* deformation - local elastic warp (deformed facial region, e.g. expression)
* blur        - horizontal motion blur (both at once)

Images are [C, H, W] float arrays. Level 0 of every kind returns an exact copy.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from lgaf.rng import RngStream

KINDS = ("occlusion", "deformation", "blur")
DEFAULT_LEVELS = {
    "occlusion": (0.0, 0.15, 0.3, 0.45),
    "deformation": (0.0, 1.0, 2.0, 3.0),
    "blur": (0, 6, 12, 18),
}


def apply_occlusion(image: np.ndarray, fraction: float, side: str = "left") -> np.ndarray:
    """Zero the ceil(fraction * W) outermost columns on ``side``."""
    if not 0.0 <= fraction <= 0.6:
        raise ValueError(f"occlusion fraction must be in [0, 0.6], got {fraction}")
    out = image.copy()
    cols = math.ceil(fraction * image.shape[-1] - 1e-9)
    if cols:
        if side == "left":
            out[..., :cols] = 0
        elif side == "right":
            out[..., -cols:] = 0
        else:
            raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    return out


def random_side(seed: int) -> str:
    """Per-image coin flip for randomized occlusion side."""
    return "left" if RngStream(seed, name="occlusion_side").random() < 0.5 else "right"


def displacement_field(shape, magnitude: float, seed: int = 0, window_fraction: float = 0.25):
    """Smooth (dy, dx) field confined to a random window, peak length = magnitude.

    The field is the curl of a windowed, Gaussian-smoothed random potential, so it is
    divergence-free: the warp moves content around without compressing it, which keeps
    the image mean nearly unchanged.
    """
    h, w = shape
    rng = RngStream(seed, name="deformation")
    side = math.sqrt(window_fraction)
    wh, ww = max(2, int(round(side * h))), max(2, int(round(side * w)))
    y0 = int(rng.integers(0, h - wh + 1))
    x0 = int(rng.integers(0, w - ww + 1))
    sigma = max(1.0, min(h, w) / 10.0)
    psi = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma, mode="reflect")
    win = np.zeros((h, w))
    win[y0:y0 + wh, x0:x0 + ww] = np.outer(np.hanning(wh), np.hanning(ww))
    gy, gx = np.gradient(psi * win)
    dy, dx = gx, -gy
    peak = np.sqrt(dy**2 + dx**2).max()
    if peak > 0:
        dy, dx = dy * (magnitude / peak), dx * (magnitude / peak)
    return dy, dx


def apply_deformation(image: np.ndarray, magnitude: float, seed: int = 0) -> np.ndarray:
    """Local elastic warp with peak displacement ``magnitude`` pixels (bilinear)."""
    if magnitude < 0:
        raise ValueError(f"deformation magnitude must be >= 0, got {magnitude}")
    if magnitude == 0:
        return image.copy()
    h, w = image.shape[-2:]
    dy, dx = displacement_field((h, w), magnitude, seed)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([yy + dy, xx + dx])
    out = np.empty_like(image)
    for c in range(image.shape[0]):
        out[c] = ndimage.map_coordinates(image[c], coords, order=1, mode="nearest")
    return out


def apply_motion_blur(image: np.ndarray, length: int) -> np.ndarray:
    """Horizontal box blur of ``length`` pixels with replicated edges."""
    if length < 0:
        raise ValueError(f"blur length must be >= 0, got {length}")
    length = int(length)
    if length <= 1:
        return image.copy()
    # average the offsets from the center pixel so constant rows come back bit-exact
    left = length // 2
    x = image.astype(np.float64)
    padded = np.pad(x, [(0, 0)] * (image.ndim - 1) + [(left, length - 1 - left)], mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, length, axis=-1)
    return (x + (windows - x[..., None]).sum(axis=-1) / length).astype(image.dtype)


def resize_bilinear(image: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of [C, H, W] to ``size`` (pixel-center alignment)."""
    h, w = image.shape[-2:]
    th, tw = size
    if (th, tw) == (h, w):
        return image.copy()
    ys = np.clip((np.arange(th) + 0.5) * h / th - 0.5, 0, h - 1)
    xs = np.clip((np.arange(tw) + 0.5) * w / tw - 0.5, 0, w - 1)
    coords = np.stack(np.meshgrid(ys, xs, indexing="ij"))
    return np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="nearest") for ch in image]).astype(image.dtype)


@dataclass
class DegradationSpec:
    kind: str
    levels: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.levels:
            self.levels = DEFAULT_LEVELS[self.kind]
        self.levels = tuple(self.levels)
        if list(self.levels) != sorted(self.levels):
            raise ValueError(f"levels must be ascending, got {self.levels}")

    def apply(self, image: np.ndarray, level, seed: int = 0) -> np.ndarray:
        if self.kind == "occlusion":
            return apply_occlusion(image, float(level))
        if self.kind == "deformation":
            return apply_deformation(image, float(level), seed)
        return apply_motion_blur(image, int(level))


def pearson(xs, ys) -> float:
    """Pearson product-moment correlation; constant input is an error."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs equal-length 1-D sequences, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise ValueError(f"pearson needs at least 3 observations, got {len(x)}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = (dx * dx).sum(), (dy * dy).sum()
    if sxx == 0 or syy == 0:
        raise ValueError("pearson is undefined for a constant sequence")
    return float(np.clip((dx * dy).sum() / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class CorrelationReport:
    kind: str
    levels: tuple
    mean_z_local: list
    std_z_local: list
    mean_z_global: list
    std_z_global: list
    counts: list
    r_local: float | None
    r_global: float | None
    seed: int = 0
    untrained: bool = False
    notes: list = field(default_factory=list)

    def write(self, out_dir, stem="norm_correlation") -> tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f"{stem}.csv")
        with open(csv_path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["kind", "level", "mean_Zl", "std_Zl", "mean_Zg", "std_Zg"])
            for i, lv in enumerate(self.levels):
                wr.writerow([self.kind, lv, repr(self.mean_z_local[i]), repr(self.std_z_local[i]),
                             repr(self.mean_z_global[i]), repr(self.std_z_global[i])])
        json_path = os.path.join(out_dir, f"{stem}.json")
        with open(json_path, "w") as f:
            json.dump({"kind": self.kind, "levels": list(self.levels), "r_local": self.r_local,
                       "r_global": self.r_global, "n": int(sum(self.counts)), "n_per_level": self.counts,
                       "seed": self.seed, "untrained": self.untrained, "notes": self.notes}, f, indent=2, sort_keys=True)
        return csv_path, json_path


def branch_norms(model, images: np.ndarray, batch_size: int = 128):
    """Eval-mode local and global embedding norms (None for an absent branch)."""
    from lgaf.lgf import feature_quality
    from lgaf.tensor import Tensor, no_grad

    was_training = model.training
    model.eval()
    zl, zg = [], []
    try:
        with no_grad():
            for s in range(0, len(images), batch_size):
                f_l, f_g = model.branches(Tensor(np.asarray(images[s:s + batch_size], dtype=model.dtype)))
                zl.append(feature_quality(f_l) if f_l is not None else None)
                zg.append(feature_quality(f_g) if f_g is not None else None)
    finally:
        model.train(was_training)
    cat = lambda parts: None if parts[0] is None else np.concatenate(parts)  # noqa: E731
    return cat(zl), cat(zg)


def norm_correlation(model, probe_images: np.ndarray, spec: DegradationSpec, seed: int = 0,
                     min_probes: int = 20) -> CorrelationReport:
    """Degrade every probe at every level, record branch norms, correlate with the level value.

    Pearson correlation is taken over all (image, level) observations. A
    single-level ladder has no correlation; that surfaces as the pearson
    error.
    """
    if len(probe_images) < min_probes:
        raise ValueError(f"need at least {min_probes} probe images, got {len(probe_images)}")
    levels, zl_all, zg_all = [], [], []
    stats = {"ml": [], "sl": [], "mg": [], "sg": [], "n": []}
    for lv in spec.levels:
        degraded = np.stack([spec.apply(img, lv, seed=seed * 100003 + i) for i, img in enumerate(probe_images)])
        zl, zg = branch_norms(model, degraded)
        n = len(degraded)
        levels.extend([float(lv)] * n)
        for key, z in (("l", zl), ("g", zg)):
            stats["m" + key].append(float(z.mean()) if z is not None else float("nan"))
            stats["s" + key].append(float(z.std()) if z is not None else float("nan"))
        stats["n"].append(n)
        zl_all.append(zl)
        zg_all.append(zg)
    r_l = pearson(levels, np.concatenate(zl_all)) if zl_all[0] is not None else None
    r_g = pearson(levels, np.concatenate(zg_all)) if zg_all[0] is not None else None
    untrained = getattr(model, "trained_steps", 0) == 0
    return CorrelationReport(spec.kind, spec.levels, stats["ml"], stats["sl"], stats["mg"], stats["sg"],
                             stats["n"], r_l, r_g, seed, untrained,
                             ["model has not been trained"] if untrained else [])
