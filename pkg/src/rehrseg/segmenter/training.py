"""Segmenter dataset assembly, training loop, checkpoints and inference."""
from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..degrade import generate_pseudo_lr_set
from ..distill import Adaptor
from ..selfsr.training import PseudoHRBundle, SelfSRCheckpoint, TrainingDiverged, teacher_features
from ..volume_io import LabelVolume, Volume
from .losses import COMPONENTS, LossComponentError, total_loss, uncertainty_weight_map
from .model import SegNet, seg_forward

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iter", "epoch", *COMPONENTS, "total")


@dataclass
class SegConfig:
    base_channels: int = 16
    levels: int = 3
    num_classes: int = 2
    r: int = 4
    lam: float = 1.0
    epochs: int = 50
    batch_size: int = 2
    learning_rate: float = 1e-3
    seed: int = 0
    uncertainty_on: bool = True
    distill_on: bool = True
    hr_head_on: bool = True
    pseudo_data_on: bool = True
    crop_size: tuple | None = (32, 32)
    beta: tuple = (1, 2, 2)
    feature_stage: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.crop_size is not None:
            self.crop_size = tuple(self.crop_size)
        self.beta = tuple(self.beta)
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.r < 2 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("r >= 2, epochs >= 1 and batch_size >= 1 are required")

    def build_model(self) -> SegNet:
        torch.manual_seed(self.seed)
        return SegNet(self.num_classes, self.base_channels, self.levels, self.r,
                      self.hr_head_on, self.feature_stage)


@dataclass
class SegSample:
    """One LR training volume plus the self-SR supervision that goes with it."""

    case_id: str
    image: np.ndarray  # (D, H, W)
    labels: np.ndarray  # (D, H, W)
    hr_labels: np.ndarray | None = None  # (rD, H, W), aligned to this sample's offset
    weights: np.ndarray | None = None  # (D, H, W) uncertainty weight map
    features: np.ndarray | None = None  # (C, D, H, W) teacher features
    offset: int = 0
    pseudo: bool = False


def shift_hr(hr: np.ndarray, offset: int) -> np.ndarray:
    """Re-index an HR volume so that LR slice k of an offset sample maps to HR slice r*k."""
    if offset == 0:
        return hr
    return np.concatenate([hr[offset:], np.repeat(hr[-1:], offset, axis=0)], axis=0)


def build_seg_dataset(case_id: str, lr: Volume, lr_labels: LabelVolume, bundle: PseudoHRBundle | None,
                      r: int, selfsr: SelfSRCheckpoint | None = None, pseudo: bool = True) -> list[SegSample]:
    """The visible LR case, plus ``r`` offset-degraded copies of its pseudo-HR volume.

    Without a bundle only the visible case is returned (baseline training).
    """
    if bundle is None:
        return [SegSample(case_id, lr.data, lr_labels.data)]
    unc = torch.from_numpy(bundle.uncertainty)
    hr_lab = bundle.labels.data
    samples = [SegSample(case_id, lr.data, lr_labels.data, hr_lab,
                         uncertainty_weight_map(unc, r, 0).numpy(), bundle.features, 0)]
    if pseudo:
        model = selfsr.model() if selfsr is not None else None
        for o, (img, lab) in enumerate(generate_pseudo_lr_set(bundle.image, bundle.labels, r)):
            feats = teacher_features(model, img, lab) if model is not None else None
            samples.append(SegSample(case_id, img.data, lab.data, shift_hr(hr_lab, o),
                                     uncertainty_weight_map(unc, r, o).numpy(), feats, o, True))
    return samples


@dataclass
class SegCheckpoint:
    config: SegConfig
    state: dict
    adaptor_state: dict | None = None
    trace: list = field(default_factory=list)

    def model(self) -> SegNet:
        model = SegNet(self.config.num_classes, self.config.base_channels, self.config.levels,
                       self.config.r, self.config.hr_head_on, self.config.feature_stage)
        model.load_state_dict(self.state)
        model.eval()
        return model

    def epoch_losses(self) -> list[float]:
        per_epoch = defaultdict(list)
        for row in self.trace:
            per_epoch[int(row["epoch"])].append(row["total"])
        return [float(np.mean(per_epoch[e])) for e in sorted(per_epoch)]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save({"state": self.state, "adaptor": self.adaptor_state}, directory / "weights.pt")
        with open(directory / "loss_trace.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            writer.writeheader()
            writer.writerows(self.trace)
        cfg = asdict(self.config)
        cfg["lambda"] = cfg.pop("lam")
        manifest = {"kind": "segmenter", "config": cfg, "seed": self.config.seed,
                    "loss_trace": "loss_trace.csv", "epoch_losses": self.epoch_losses()}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "SegCheckpoint":
        directory = Path(directory)
        if not (directory / "manifest.json").exists():
            raise FileNotFoundError(f"no segmenter checkpoint in {directory}")
        manifest = json.loads((directory / "manifest.json").read_text())
        cfg = dict(manifest["config"])
        cfg["lam"] = cfg.pop("lambda")
        blob = torch.load(directory / "weights.pt", map_location="cpu", weights_only=False)
        trace = []
        with open(directory / "loss_trace.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                trace.append({k: (int(v) if k in ("iter", "epoch") else float(v)) for k, v in row.items()})
        return cls(SegConfig(**cfg), blob["state"], blob["adaptor"], trace)


def _crop_window(shape, crop, rng):
    if crop is None:
        return slice(None), slice(None)
    h, w = shape
    ch, cw = min(crop[0], h), min(crop[1], w)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return slice(y0, y0 + ch), slice(x0, x0 + cw)


def _prepare(sample: SegSample, cfg: SegConfig, rng: np.random.Generator):
    ys, xs = _crop_window(sample.image.shape[1:], cfg.crop_size, rng)
    flip_y, flip_x = (rng.random() < 0.5, rng.random() < 0.5) if cfg.augment else (False, False)
    scale, shift = (rng.uniform(0.9, 1.1), rng.uniform(-0.05, 0.05)) if cfg.augment else (1.0, 0.0)

    def view(a):
        if a is None:
            return None
        a = a[..., ys, xs]
        if flip_y:
            a = a[..., ::-1, :]
        if flip_x:
            a = a[..., ::-1]
        return torch.from_numpy(np.ascontiguousarray(a))

    image = view(sample.image).float() * scale + shift
    return {
        "image": image.unsqueeze(0),
        "labels": view(sample.labels).long(),
        "hr_labels": None if sample.hr_labels is None else view(sample.hr_labels).long(),
        "weights": None if sample.weights is None else view(sample.weights).float(),
        "teacher": None if sample.features is None else view(sample.features).float(),
    }


def _collate(items, key):
    vals = [it[key] for it in items]
    if any(v is None for v in vals):
        return None
    return torch.stack(vals)


def _check_dataset(samples, cfg):
    if not cfg.pseudo_data_on:
        samples = [s for s in samples if not s.pseudo]
    if not samples:
        raise ValueError("empty segmentation dataset")
    if cfg.hr_head_on and any(s.hr_labels is None for s in samples):
        raise ValueError("hr_head_on requires pseudo HR labels for every sample")
    if cfg.uncertainty_on and any(s.weights is None for s in samples):
        raise ValueError("uncertainty_on requires uncertainty maps for every sample")
    if cfg.distill_on and cfg.lam > 0 and any(s.features is None for s in samples):
        raise ValueError("distill_on requires teacher features for every sample")
    by_case = defaultdict(list)
    for s in samples:
        by_case[s.case_id].append(s)
    return [by_case[k] for k in sorted(by_case)]


def train_segmenter(samples: list[SegSample], cfg: SegConfig, teacher_channels: int | None = None,
                    log_every: int = 10) -> SegCheckpoint:
    """Train on a dataset built by :func:`build_seg_dataset`.

    An epoch visits every case once; a case contributes one of its variants
    (the visible volume or an offset pseudo-LR copy) chosen at random, so the
    pseudo data adds variety at equal compute.
    """
    cases = _check_dataset(samples, cfg)
    model = cfg.build_model()
    params = list(model.parameters())
    adaptor = None
    if cfg.distill_on:
        if teacher_channels is None:
            teacher_channels = next(s.features.shape[0] for group in cases for s in group if s.features is not None)
        adaptor = Adaptor(model.feature_channels, teacher_channels)
        params += list(adaptor.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    steps_per_epoch = -(-len(cases) // cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch)

    rng = np.random.default_rng(cfg.seed)
    trace, it = [], 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(cases))
        for start in range(0, len(order), cfg.batch_size):
            items = []
            for ci in order[start:start + cfg.batch_size]:
                group = cases[ci]
                items.append(_prepare(group[int(rng.integers(len(group)))], cfg, rng))
            out = seg_forward(model, _collate(items, "image"))
            try:
                total, parts = total_loss(out, _collate(items, "labels"), cfg,
                                          hr_labels=_collate(items, "hr_labels"),
                                          weights=_collate(items, "weights"),
                                          teacher=_collate(items, "teacher"), adaptor=adaptor)
            except LossComponentError as exc:
                raise TrainingDiverged(f"segmenter diverged at iteration {it} (epoch {epoch}): {exc}") from exc
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step()
            row = {"iter": it, "epoch": epoch, **{k: v.item() for k, v in parts.items()}, "total": total.item()}
            trace.append(row)
            it += 1
        if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
            log.info("seg epoch %d  total %.4f", epoch, np.mean([r["total"] for r in trace if r["epoch"] == epoch]))

    return SegCheckpoint(
        cfg,
        {k: v.detach().clone() for k, v in model.state_dict().items()},
        None if adaptor is None else {k: v.detach().clone() for k, v in adaptor.state_dict().items()},
        trace,
    )


@torch.no_grad()
def infer_segmenter(lr: Volume, checkpoint: SegCheckpoint, model: SegNet | None = None):
    """LR mask and (when the HR head exists) an HR mask with ``r`` times the depth."""
    cfg = checkpoint.config
    model = model or checkpoint.model()
    x = torch.from_numpy(np.ascontiguousarray(lr.data, dtype=np.float32))[None, None]
    out = seg_forward(model, x)
    lr_mask = LabelVolume(out.lr_logits[0].argmax(0).numpy().astype(np.int64), lr.spacing, cfg.num_classes)
    if out.hr_logits is None:
        return lr_mask, None
    spacing = (lr.spacing[0] / cfg.r, lr.spacing[1], lr.spacing[2])
    hr_mask = LabelVolume(out.hr_logits[0].argmax(0).numpy().astype(np.int64), spacing, cfg.num_classes)
    return lr_mask, hr_mask
