"""SGD training loop, augmentation, and dataset embedding."""
from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lgaf.degradation import resize_bilinear
from lgaf.lgf import EmbeddingBundle
from lgaf.model import FUSION_MODES
from lgaf.rng import RngStream
from lgaf.tensor import Parameter, Tensor, _topo_order, backward, no_grad

BASE_SCHEDULE = (12, 20, 24)
BASE_EPOCHS = 24
METRICS_HEADER = ("epoch", "loss", "train_acc", "lr", "mean_Zl", "mean_Zg", "mean_gamma_l")


def scaled_schedule(total_epochs: int, base=BASE_SCHEDULE, base_epochs: int = BASE_EPOCHS) -> tuple[int, ...]:
    """Scale the step-drop epochs to ``total_epochs``.

    Each drop is scaled by total/base_epochs and rounded; the last drop is
    pulled in to leave at least two epochs at the final rate. Drops that
    collide or fall outside [1, total) are removed. 30 epochs gives (15, 25, 28).
    """
    raw = [int(math.floor(b * total_epochs / base_epochs + 0.5)) for b in base]
    raw[-1] = min(raw[-1], total_epochs - 2)
    out = []
    for m in raw:
        if 1 <= m < total_epochs and (not out or m > out[-1]):
            out.append(m)
    return tuple(out)


@dataclass
class TrainConfig:
    total_epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule_epochs: tuple | None = None  # None -> scaled_schedule(total_epochs)
    aug_probability: float = 0.2
    seed: int = 0
    fusion_mode: str = "lgf"
    workers: int = 1

    def __post_init__(self):
        if self.schedule_epochs is None:
            self.schedule_epochs = scaled_schedule(self.total_epochs)
        self.schedule_epochs = tuple(int(e) for e in self.schedule_epochs)
        self.validate()

    def validate(self):
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        s = self.schedule_epochs
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError(f"schedule_epochs must be strictly increasing, got {s}")
        if s and (s[0] < 1 or s[-1] >= self.total_epochs):
            raise ValueError(f"schedule_epochs must lie in [1, {self.total_epochs}), got {s}")
        if not 0.0 <= self.aug_probability <= 1.0:
            raise ValueError(f"aug_probability must be in [0, 1], got {self.aug_probability}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.schedule_epochs if epoch >= m)
        return self.lr / 10**drops


# ---------------------------------------------------------------- augmentation


def augment(image: np.ndarray, rng: RngStream, p: float = 0.2, crop_max_area: float = 0.4,
            jitter: float = 0.3, scale_range=(0.25, 1.0)) -> np.ndarray:
    """Rectangle erase, brightness/contrast jitter and down-up rescale, each with probability p.

    The same number of random draws is made whatever is applied, so the
    stream position after the call does not depend on the outcome.
    """
    c, h, w = image.shape
    u = rng.random(12)
    out = image
    # rectangle erase
    area = u[1] * crop_max_area * h * w
    aspect = math.exp((u[2] - 0.5) * math.log(3.0))
    rh = min(h, int(math.sqrt(area * aspect)))
    rw = min(w, int(math.sqrt(area / aspect)))
    if u[0] < p and rh > 0 and rw > 0:
        y0 = int(u[3] * (h - rh + 1))
        x0 = int(u[4] * (w - rw + 1))
        out = out.copy()
        out[:, y0:y0 + rh, x0:x0 + rw] = 0
    # photometric
    bright = (2 * u[6] - 1) * jitter
    contrast = 1 + (2 * u[7] - 1) * jitter
    if u[5] < p and (bright != 0 or contrast != 1):
        mean = out.mean()
        out = np.clip((out - mean) * contrast + mean + bright, 0.0, 1.0).astype(image.dtype)
    # resolution loss
    lo, hi = scale_range
    frac = lo + u[9] * (hi - lo)
    th, tw = max(1, int(round(frac * h))), max(1, int(round(frac * w)))
    if u[8] < p and (th, tw) != (h, w):
        out = resize_bilinear(resize_bilinear(out, (th, tw)), (h, w))
    return out


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("metrics epochs must increase")
        self.rows.append({k: row[k] for k in METRICS_HEADER})

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(METRICS_HEADER)
        for r in self.rows:
            wr.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRICS_HEADER[1:]])
        return buf.getvalue()

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_csv())

    def column(self, key):
        return [r[key] for r in self.rows]


@dataclass
class TrainResult:
    metrics: MetricsLog
    final_loss: float
    checkpoint: str | None = None
    seconds: float = 0.0


# ---------------------------------------------------------------- loop


def batches(n: int, batch_size: int, order: np.ndarray):
    """Split ``order`` into batches; a trailing batch of one sample joins the previous batch."""
    cuts = list(range(0, n, batch_size)) + [n]
    if len(cuts) > 2 and cuts[-1] - cuts[-2] == 1:
        cuts.pop(-2)
    return [order[a:b] for a, b in zip(cuts, cuts[1:])]


def first_nonfinite(loss: Tensor) -> str | None:
    """Name of the first tensor (inputs before outputs) holding a non-finite value."""
    for t in _topo_order(loss):
        if not np.all(np.isfinite(t.data)):
            return t.name if isinstance(t, Parameter) else f"output of {t.op}"
    return None


def _cosine_predictions(model, kappa: np.ndarray) -> np.ndarray:
    k = kappa / np.linalg.norm(kappa, axis=1, keepdims=True)
    w = model.margin.weight.data
    return np.argmax(k @ (w / np.linalg.norm(w, axis=0, keepdims=True)), axis=1)


class SGD:
    """Momentum SGD; weight decay on weight tensors (ndim > 1) only."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        dt = self.params[0].data.dtype
        mom, wd, lr = dt.type(self.momentum), dt.type(self.weight_decay), dt.type(self.lr)
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + wd * p.data if p.data.ndim > 1 else p.grad
            v *= mom
            v += g
            p.data -= lr * v


def _mean_or_nan(parts):
    parts = [x for x in parts if x is not None]
    return float(np.mean(np.concatenate(parts))) if parts else float("nan")


def train(model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, out_dir=None,
          log=None, checkpoint_extra: dict | None = None) -> TrainResult:
    """Train ``model`` in place; optionally write metrics.csv and a checkpoint to ``out_dir``."""
    from lgaf.checkpoint import save_checkpoint

    labels = np.asarray(labels, dtype=np.int64)
    n_classes = model.margin.n_classes
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    if model.fusion_mode != cfg.fusion_mode:
        raise ValueError(f"model fusion_mode {model.fusion_mode!r} != config {cfg.fusion_mode!r}")
    n = len(labels)
    if n < 2:
        raise ValueError("need at least 2 training samples")
    root = RngStream(cfg.seed, name="train")
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    metrics = MetricsLog()
    model.train()
    steps = getattr(model, "trained_steps", 0)
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    loss_value = float("nan")
    try:
        for epoch in range(cfg.total_epochs):
            opt.lr = cfg.lr_at(epoch)
            order = root.substream(f"shuffle/{epoch}").permutation(n)
            aug_root = root.substream(f"augment/{epoch}")

            def aug_one(idx, aug_root=aug_root):
                return augment(images[idx], aug_root.substream(str(idx)), cfg.aug_probability)

            losses, correct, zl, zg, gl = [], 0, [], [], []
            for step, idx in enumerate(batches(n, cfg.batch_size, order)):
                if cfg.aug_probability > 0:
                    mapped = pool.map(aug_one, idx) if pool else map(aug_one, idx)
                    x = np.stack(list(mapped))
                else:
                    x = images[idx]
                y = labels[idx]
                model.zero_grad()
                loss, bundle, _ = model.loss(Tensor(np.asarray(x, dtype=model.dtype)), y)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch} step {step}; first non-finite tensor: {first_nonfinite(loss)}"
                    )
                backward(loss)
                for name, p in model.named_parameters():
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise FloatingPointError(f"non-finite gradient in {name} at epoch {epoch} step {step}")
                opt.step()
                steps += 1
                losses.append(loss_value * len(idx))
                correct += int((_cosine_predictions(model, bundle.kappa.data) == y).sum())
                zl.append(bundle.z_local)
                zg.append(bundle.z_global)
                gl.append(bundle.gamma_local)
            row = dict(epoch=epoch, loss=sum(losses) / n, train_acc=correct / n, lr=opt.lr,
                       mean_Zl=_mean_or_nan(zl), mean_Zg=_mean_or_nan(zg), mean_gamma_l=_mean_or_nan(gl))
            metrics.append(**row)
            if log:
                log(row)
    finally:
        if pool:
            pool.shutdown()
    model.trained_steps = steps
    result = TrainResult(metrics, loss_value, seconds=time.perf_counter() - t0)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics.write(os.path.join(out_dir, "metrics.csv"))
        extra = {"epoch": cfg.total_epochs, "train_seed": cfg.seed}
        extra.update(checkpoint_extra or {})
        result.checkpoint = os.path.dirname(save_checkpoint(os.path.join(out_dir, "checkpoint"), model, extra))
    model.eval()
    return result


# ---------------------------------------------------------------- embedding


@dataclass
class EmbeddedSet:
    kappa: np.ndarray  # [N, D] raw fused embedding
    kappa_unit: np.ndarray  # [N, D] L2-normalized
    f_local: np.ndarray | None
    f_global: np.ndarray | None
    z_local: np.ndarray | None
    z_global: np.ndarray | None
    gamma_local: np.ndarray
    gamma_global: np.ndarray


def embed_dataset(model, images: np.ndarray, batch_size: int = 128) -> EmbeddedSet:
    """Eval-mode embeddings (running fusion statistics) for every image."""
    was_training = model.training
    model.eval()
    parts: list[EmbeddingBundle] = []
    try:
        with no_grad():
            for s in range(0, len(images), batch_size):
                parts.append(model.embed(np.asarray(images[s:s + batch_size], dtype=model.dtype)))
    finally:
        model.train(was_training)

    def cat(attr, data=False):
        vals = [getattr(b, attr) for b in parts]
        if vals[0] is None:
            return None
        return np.concatenate([v.data if data else v for v in vals])

    kappa = cat("kappa", True).astype(np.float64)
    norms = np.linalg.norm(kappa, axis=1, keepdims=True)
    return EmbeddedSet(kappa, kappa / np.where(norms == 0, 1.0, norms), cat("f_local", True), cat("f_global", True),
                       cat("z_local"), cat("z_global"), cat("gamma_local"), cat("gamma_global"))
