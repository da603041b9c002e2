"""Experiment configuration: one JSON document drives every pipeline stage."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .segmenter.training import SegConfig
from .selfsr.training import SelfSRConfig


class ConfigError(ValueError):
    pass


@dataclass
class PhantomSection:
    n: int = 24
    n_val: int = 4
    size: int = 64
    n_blobs: int = 2
    intensity_texture: float = 0.15


@dataclass
class SelfSRSection:
    channels: int = 16
    branches: int = 4
    mid_channels: int = 8
    residual: bool = True
    iters_total: int = 3000
    iters_uncertainty_on: int = 2600
    batch_size: int = 8
    learning_rate: float = 1e-4
    patch_size: list = field(default_factory=lambda: [8, 32, 32])
    stride: list | None = None
    pairs_along_y: bool = False
    augment: bool = True
    calibrate_uncertainty: bool = True
    backbone_weights: str | None = None
    resume: bool = False


@dataclass
class SegSection:
    base_channels: int = 16
    levels: int = 3
    # "lambda" in JSON
    lam: float = 1.0
    lambda_sweep: list | None = None
    epochs: int = 50
    batch_size: int = 2
    learning_rate: float = 1e-3
    uncertainty_on: bool = True
    distill_on: bool = True
    hr_head_on: bool = True
    pseudo_data_on: bool = True
    crop_size: list | None = field(default_factory=lambda: [32, 32])
    beta: list = field(default_factory=lambda: [1, 2, 2])
    feature_stage: int = 0
    augment: bool = True
    run_name: str | None = None


@dataclass
class ExperimentConfig:
    workdir: str = "runs/default"
    seed: int = 0
    r: int = 4
    num_classes: int = 2
    phantom: PhantomSection = field(default_factory=PhantomSection)
    selfsr: SelfSRSection = field(default_factory=SelfSRSection)
    seg: SegSection = field(default_factory=SegSection)

    # derived views -----------------------------------------------------
    @property
    def root(self) -> Path:
        return Path(self.workdir)

    def selfsr_config(self) -> SelfSRConfig:
        s = self.selfsr
        return SelfSRConfig(
            r=self.r, channels=s.channels, branches=s.branches, mid_channels=s.mid_channels,
            residual=s.residual,
            num_classes=self.num_classes, iters_total=s.iters_total,
            iters_uncertainty_on=s.iters_uncertainty_on, batch_size=s.batch_size,
            learning_rate=s.learning_rate, seed=self.seed, patch_size=tuple(s.patch_size),
            stride=None if s.stride is None else tuple(s.stride), pairs_along_y=s.pairs_along_y,
            augment=s.augment, calibrate_uncertainty=s.calibrate_uncertainty,
            backbone_weights=s.backbone_weights,
        )

    def seg_config(self, lam: float | None = None) -> SegConfig:
        s = self.seg
        return SegConfig(
            base_channels=s.base_channels, levels=s.levels, num_classes=self.num_classes, r=self.r,
            lam=s.lam if lam is None else lam, epochs=s.epochs, batch_size=s.batch_size,
            learning_rate=s.learning_rate, seed=self.seed, uncertainty_on=s.uncertainty_on,
            distill_on=s.distill_on, hr_head_on=s.hr_head_on, pseudo_data_on=s.pseudo_data_on,
            crop_size=None if s.crop_size is None else tuple(s.crop_size), beta=tuple(s.beta),
            feature_stage=s.feature_stage, augment=s.augment,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seg"]["lambda"] = d["seg"].pop("lam")
        return d


_SECTIONS = {"phantom": PhantomSection, "selfsr": SelfSRSection, "seg": SegSection}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name for f in fields(cls)}
    if cls is SegSection:
        known = (known - {"lam"}) | {"lambda"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    data = dict(data)
    if cls is SegSection and "lambda" in data:
        data["lam"] = data.pop("lambda")
    kwargs = {}
    for k, v in data.items():
        if where == "" and k in _SECTIONS:
            v = _build(_SECTIONS[k], v, k)
        kwargs[k] = v
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig) -> None:
    if not isinstance(cfg.r, int) or cfg.r < 2:
        raise ConfigError(f"r must be an integer >= 2, got {cfg.r!r}")
    if cfg.num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if cfg.phantom.n < 2 or not 0 < cfg.phantom.n_val < cfg.phantom.n:
        raise ConfigError("phantom.n must be >= 2 and 0 < phantom.n_val < phantom.n")
    if cfg.phantom.size % cfg.r:
        raise ConfigError(f"phantom.size {cfg.phantom.size} must be divisible by r={cfg.r}")
    sweep = cfg.seg.lambda_sweep
    if sweep is not None and (not sweep or any(not isinstance(x, (int, float)) or x < 0 for x in sweep)):
        raise ConfigError("seg.lambda_sweep must be a non-empty list of non-negative numbers")
    try:
        cfg.selfsr_config()
        cfg.seg_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        cfg = _build(ExperimentConfig, data, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    _validate(cfg)
    return cfg


def apply_override(data: dict, override: str) -> dict:
    """Apply ``dotted.key=value``; the value is parsed as JSON, else kept as a string."""
    if "=" not in override:
        raise ConfigError(f"override must look like key=value, got {override!r}")
    key, raw = override.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    data = copy.deepcopy(data)
    node = data
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override inside non-object key {p!r}")
    node[parts[-1]] = value
    return data


def load_config(path, overrides=(), seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for ov in overrides:
        data = apply_override(data, ov)
    if seed is not None:
        data["seed"] = seed
    return config_from_dict(data)
