"""Flat TOML run configuration.

Every key is top-level. Unknown keys are rejected, and the fully resolved
configuration (defaults included) is written next to each run's outputs so
the run can be repeated from its output directory alone.

Keys (defaults in parentheses):

    seed (0)                  model init, shuffling and augmentation seed
    fusion_mode ("lgf")       local_only | global_only | direct_add | lgf
    out_dir ("runs/default")  output directory for train
    train_manifest ("")       CSV (path,identity); empty means synthetic data
    synthetic_ids (20)        synthetic identities when no manifest is given
    synthetic_per_id (50)     synthetic images per identity
    data_seed (0)             synthetic data seed
    image_height (32), image_width (32)
    channel_widths ([16, 32, 64]), blocks_per_stage (2), backbone_batch_norm (true)
    scales ([1, 3, 5]), heads (4), embedding_dim (64)
    lanet_reduction (8), se_reduction (16), mhms_batch_norm (true), gfe_batch_norm (true)
    margin ("cosface"), margin_s (64.0), margin_m (0.4 cosface / 0.5 arcface / 0.0 none)
    lgf_h (0.333), lgf_alpha (0.01), lgf_eps (1e-6)
    epochs (30), batch_size (64), lr (0.1), momentum (0.9), weight_decay (0.0005)
    schedule_epochs (12/20/24 scaled to epochs), aug_probability (0.2)
    verify_folds (10)
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from lgaf.backbone import BackboneConfig
from lgaf.margin import DEFAULT_MARGIN
from lgaf.mhms import MHMSConfig
from lgaf.model import FUSION_MODES, ModelConfig
from lgaf.training import TrainConfig, scaled_schedule


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n" + "\n".join(f"  {p}" for p in problems))


@dataclass
class RunConfig:
    seed: int = 0
    fusion_mode: str = "lgf"
    out_dir: str = "runs/default"
    train_manifest: str = ""
    synthetic_ids: int = 20
    synthetic_per_id: int = 50
    data_seed: int = 0
    image_height: int = 32
    image_width: int = 32
    channel_widths: list = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 2
    backbone_batch_norm: bool = True
    scales: list = field(default_factory=lambda: [1, 3, 5])
    heads: int = 4
    embedding_dim: int = 64
    lanet_reduction: int = 8
    se_reduction: int = 16
    mhms_batch_norm: bool = True
    gfe_batch_norm: bool = True
    margin: str = "cosface"
    margin_s: float = 64.0
    margin_m: float | None = None
    lgf_h: float = 0.333
    lgf_alpha: float = 0.01
    lgf_eps: float = 1e-6
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule_epochs: list | None = None
    aug_probability: float = 0.2
    verify_folds: int = 10

    def __post_init__(self):
        if self.margin_m is None and self.margin in DEFAULT_MARGIN:
            self.margin_m = DEFAULT_MARGIN[self.margin]
        if self.schedule_epochs is None and isinstance(self.epochs, int) and self.epochs > 0:
            self.schedule_epochs = list(scaled_schedule(self.epochs))

    def model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(
                input_size=(self.image_height, self.image_width),
                channel_widths=tuple(self.channel_widths),
                blocks_per_stage=self.blocks_per_stage,
                batch_norm=self.backbone_batch_norm,
            ),
            mhms=MHMSConfig(
                scales=tuple(self.scales),
                heads=self.heads,
                embedding_dim=self.embedding_dim,
                lanet_reduction=self.lanet_reduction,
                se_reduction=self.se_reduction,
                batch_norm=self.mhms_batch_norm,
            ),
            n_classes=n_classes,
            gfe_batch_norm=self.gfe_batch_norm,
            margin=self.margin,
            margin_s=self.margin_s,
            margin_m=self.margin_m,
            lgf_h=self.lgf_h,
            lgf_alpha=self.lgf_alpha,
            lgf_eps=self.lgf_eps,
        )

    def train_config(self, workers: int = 1) -> TrainConfig:
        return TrainConfig(
            total_epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            schedule_epochs=tuple(self.schedule_epochs),
            aug_probability=self.aug_probability,
            seed=self.seed,
            fusion_mode=self.fusion_mode,
            workers=workers,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_LIST_KEYS = {"channel_widths", "scales", "schedule_epochs"}


def _type_problem(key, value) -> str | None:
    default = RunConfig()
    expected = type(getattr(default, key)) if getattr(default, key) is not None else float
    if key in _LIST_KEYS:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return f"{key}: expected a list of integers, got {value!r}"
        return None
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    return None if ok else f"{key}: expected {expected.__name__}, got {type(value).__name__} {value!r}"


def config_from_dict(raw: dict) -> RunConfig:
    problems = [f"{k}: unknown key" for k in sorted(raw) if k not in _FIELDS]
    for k in sorted(raw):
        if k in _FIELDS:
            p = _type_problem(k, raw[k])
            if p:
                problems.append(p)
    if problems:
        raise ConfigError(problems)
    values = {k: float(v) if _FIELDS[k].type in ("float", "float | None") else v for k, v in raw.items()}
    cfg = RunConfig(**values)
    problems = validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: RunConfig) -> list[str]:
    problems = []
    if cfg.fusion_mode not in FUSION_MODES:
        problems.append(f"fusion_mode: must be one of {FUSION_MODES}, got {cfg.fusion_mode!r}")
    if cfg.margin not in DEFAULT_MARGIN:
        problems.append(f"margin: must be one of {sorted(DEFAULT_MARGIN)}, got {cfg.margin!r}")
    for key in ("synthetic_ids", "synthetic_per_id", "epochs", "heads", "embedding_dim", "blocks_per_stage"):
        if getattr(cfg, key) < 1:
            problems.append(f"{key}: must be >= 1, got {getattr(cfg, key)}")
    if cfg.batch_size < 2:
        problems.append(f"batch_size: must be >= 2, got {cfg.batch_size}")
    if not 0.0 <= cfg.aug_probability <= 1.0:
        problems.append(f"aug_probability: must be in [0, 1], got {cfg.aug_probability}")
    if cfg.verify_folds < 2:
        problems.append(f"verify_folds: must be >= 2, got {cfg.verify_folds}")
    if not problems:
        for key, build in (("schedule_epochs", lambda: cfg.train_config()),
                           ("backbone/mhms", lambda: cfg.model_config(2).backbone.validate()),
                           ("mhms", lambda: cfg.model_config(2).mhms.validate(cfg.channel_widths[-1]))):
            try:
                build()
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
    return problems


def load_config(path) -> RunConfig:
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: TOML parse error: {exc}"]) from exc
    return config_from_dict(raw)
