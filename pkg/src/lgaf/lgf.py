"""Feature-norm driven fusion of local and global embeddings.

The norm of each branch's embedding is a per-sample quality score. Scores
are standardized against batch statistics (running EMA statistics at eval
time), scaled by ``h``, clipped to [-1, 1] and shifted to [0, 2]. The two
shifted scores are normalized into mixing weights, and the fused embedding
is the weighted sum of the branches.

Norms, standardized scores and weights are constants for backpropagation:
gradients reach the embeddings only through the weighted sum.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from lgaf.tensor import ShapeError, Tensor, add, mul

BRANCHES = ("local", "global")


@dataclass
class FusionState:
    mu_l: float = 0.0
    sigma_l: float = 1.0
    mu_g: float = 0.0
    sigma_g: float = 1.0
    alpha: float = 0.01
    h: float = 0.333
    eps: float = 1e-6
    mode: str = "train"
    step_l: int = 0
    step_g: int = 0

    @property
    def step(self) -> int:
        """Number of training batches folded into both running statistics."""
        return min(self.step_l, self.step_g)

    def stats(self, branch: str) -> tuple[float, float]:
        if branch == "local":
            return self.mu_l, self.sigma_l
        if branch == "global":
            return self.mu_g, self.sigma_g
        raise ValueError(f"branch must be 'local' or 'global', got {branch!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionState":
        return cls(**d)


@dataclass
class EmbeddingBundle:
    """Per-sample outputs of the fusion stage (arrays are [N] unless noted)."""

    kappa: Tensor  # [N, D], unnormalized
    f_local: Tensor | None = None
    f_global: Tensor | None = None
    z_local: np.ndarray | None = None
    z_global: np.ndarray | None = None
    zhat_local: np.ndarray | None = None
    zhat_global: np.ndarray | None = None
    gamma_local: np.ndarray | None = None
    gamma_global: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def feature_quality(f) -> np.ndarray:
    """Per-row L2 norm, returned as a plain array (no gradient)."""
    data = f.data if isinstance(f, Tensor) else np.asarray(f)
    if data.ndim != 2:
        raise ShapeError(f"feature_quality expects [N,D], got shape {data.shape}")
    return np.sqrt((data.astype(np.float64) ** 2).sum(axis=1))


def normalize_quality(z, mu: float, sigma: float, h: float = 0.333, eps: float = 1e-6) -> np.ndarray:
    """clip(h * (z - mu) / max(sigma, eps), -1, 1) + 1, in [0, 2].

    ``eps`` is a floor rather than an additive term so that scaling z, mu and
    sigma together leaves the result unchanged whenever sigma > eps.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    z = np.asarray(z, dtype=np.float64)
    return np.clip(h * (z - mu) / max(sigma, eps), -1.0, 1.0) + 1.0


def update_ema(state: FusionState, batch_mu: float, batch_sigma: float, branch: str) -> FusionState:
    """Fold one batch's statistics into the running values (new batch weighted by alpha).

    Written as prev + alpha * (batch - prev), which equals
    alpha * batch + (1 - alpha) * prev and leaves a fixed point exactly unchanged.
    """
    if state.mode != "train":
        raise RuntimeError("update_ema called on a FusionState in eval mode")
    a = state.alpha
    if branch == "local":
        return replace(
            state,
            mu_l=state.mu_l + a * (batch_mu - state.mu_l),
            sigma_l=state.sigma_l + a * (batch_sigma - state.sigma_l),
            step_l=state.step_l + 1,
        )
    if branch == "global":
        return replace(
            state,
            mu_g=state.mu_g + a * (batch_mu - state.mu_g),
            sigma_g=state.sigma_g + a * (batch_sigma - state.sigma_g),
            step_g=state.step_g + 1,
        )
    raise ValueError(f"branch must be 'local' or 'global', got {branch!r}")


def fusion_attention(zhat_l, zhat_g, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Mixing weights zhat_j / (zhat_l + zhat_g); 0.5/0.5 when the sum is below eps."""
    zl = np.asarray(zhat_l, dtype=np.float64)
    zg = np.asarray(zhat_g, dtype=np.float64)
    total = zl + zg
    ok = total >= eps
    safe = np.where(ok, total, 1.0)
    gamma_l = np.where(ok, zl / safe, 0.5)
    # derive the global weight from the local one so the pair sums to 1
    return gamma_l, 1.0 - gamma_l


def fuse(f_local: Tensor, f_global: Tensor, gamma_l, gamma_g) -> Tensor:
    """gamma_l * f_local + gamma_g * f_global per sample; gammas are constants."""
    if f_local.shape != f_global.shape:
        raise ShapeError(f"fuse: local {f_local.shape} and global {f_global.shape} differ")
    dt = f_local.dtype
    gl = Tensor(np.asarray(gamma_l, dtype=dt).reshape(-1, 1))
    gg = Tensor(np.asarray(gamma_g, dtype=dt).reshape(-1, 1))
    if gl.shape[0] != f_local.shape[0]:
        raise ShapeError(f"fuse: {gl.shape[0]} weights for batch of {f_local.shape[0]}")
    return add(mul(f_local, gl), mul(f_global, gg))


def batch_statistics(z) -> tuple[float, float]:
    """Mean and population standard deviation of a batch of norms."""
    z = np.asarray(z, dtype=np.float64)
    return float(z.mean()), float(z.std())


def lgf_forward(f_local: Tensor, f_global: Tensor, state: FusionState) -> tuple[EmbeddingBundle, FusionState]:
    """Full fusion step.

    Train mode normalizes with the current batch's statistics and returns
    the EMA-updated state; eval mode uses the running statistics and returns
    ``state`` unchanged.
    """
    if f_local.shape != f_global.shape:
        raise ShapeError(f"lgf: local {f_local.shape} and global {f_global.shape} differ")
    z_l, z_g = feature_quality(f_local), feature_quality(f_global)
    if state.mode == "train":
        if z_l.shape[0] < 2:
            raise ValueError("lgf_forward in train mode needs batch size >= 2")
        mu_l, sd_l = batch_statistics(z_l)
        mu_g, sd_g = batch_statistics(z_g)
        new_state = update_ema(state, mu_l, sd_l, "local")
        new_state = update_ema(new_state, mu_g, sd_g, "global")
    elif state.mode == "eval":
        mu_l, sd_l = state.mu_l, state.sigma_l
        mu_g, sd_g = state.mu_g, state.sigma_g
        new_state = state
    else:
        raise ValueError(f"FusionState.mode must be 'train' or 'eval', got {state.mode!r}")
    zh_l = normalize_quality(z_l, mu_l, sd_l, state.h, state.eps)
    zh_g = normalize_quality(z_g, mu_g, sd_g, state.h, state.eps)
    g_l, g_g = fusion_attention(zh_l, zh_g, state.eps)
    bundle = EmbeddingBundle(
        kappa=fuse(f_local, f_global, g_l, g_g),
        f_local=f_local,
        f_global=f_global,
        z_local=z_l,
        z_global=z_g,
        zhat_local=zh_l,
        zhat_global=zh_g,
        gamma_local=g_l,
        gamma_global=g_g,
    )
    return bundle, new_state
