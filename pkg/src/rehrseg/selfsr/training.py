"""Self-SR training loop, checkpoints, and through-plane inference."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..degrade import PairSet
from ..volume_io import LabelVolume, Volume
from .losses import sr_label_loss, sr_uncertainty_loss
from .model import SelfSRNet, load_backbone_weights

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iter", "l1", "image_loss", "label_loss", "u_calibration", "total", "uncertainty_on")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SelfSRConfig:
    r: int = 4
    channels: int = 16
    branches: int = 4
    mid_channels: int = 8
    num_classes: int = 2
    residual: bool = True
    iters_total: int = 3000
    iters_uncertainty_on: int = 2600
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    patch_size: tuple = (8, 32, 32)
    stride: tuple | None = None
    pairs_along_y: bool = False
    augment: bool = True
    calibrate_uncertainty: bool = True
    backbone_weights: str | None = None

    def __post_init__(self):
        self.patch_size = tuple(self.patch_size)
        if self.stride is not None:
            self.stride = tuple(self.stride)
        if self.r < 2:
            raise ValueError(f"r must be >= 2, got {self.r}")
        if self.branches < 2:
            raise ValueError("branches (N) must be >= 2")
        if not 0 <= self.iters_uncertainty_on < self.iters_total:
            raise ValueError("need 0 <= iters_uncertainty_on < iters_total")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")

    def build_model(self) -> SelfSRNet:
        torch.manual_seed(self.seed)
        model = SelfSRNet(self.r, self.channels, self.branches, self.num_classes, self.mid_channels,
                          self.residual)
        if self.backbone_weights:
            load_backbone_weights(model, self.backbone_weights)
        return model


@dataclass
class SelfSRCheckpoint:
    config: SelfSRConfig
    state: dict
    iteration: int = 0
    trace: list = field(default_factory=list)
    optimizer_state: dict | None = None
    scheduler_state: dict | None = None

    def model(self) -> SelfSRNet:
        c = self.config
        model = SelfSRNet(c.r, c.channels, c.branches, c.num_classes, c.mid_channels, c.residual)
        model.load_state_dict(self.state)
        model.eval()
        return model

    def final_losses(self) -> dict:
        return dict(self.trace[-1]) if self.trace else {}

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(
            {"state": self.state, "optimizer": self.optimizer_state,
             "scheduler": self.scheduler_state, "iteration": self.iteration},
            directory / "weights.pt",
        )
        manifest = {
            "kind": "selfsr",
            "config": asdict(self.config),
            "seed": self.config.seed,
            "iteration": self.iteration,
            "final_losses": self.final_losses(),
            "loss_trace": "loss_trace.csv",
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        with open(directory / "loss_trace.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            writer.writeheader()
            writer.writerows(self.trace)
        return directory

    @classmethod
    def load(cls, directory) -> "SelfSRCheckpoint":
        directory = Path(directory)
        if not (directory / "manifest.json").exists():
            raise FileNotFoundError(f"no self-SR checkpoint in {directory}")
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = torch.load(directory / "weights.pt", map_location="cpu", weights_only=False)
        trace = []
        with open(directory / "loss_trace.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                trace.append({k: (int(float(v)) if k in ("iter", "uncertainty_on") else float(v)) for k, v in row.items()})
        return cls(SelfSRConfig(**manifest["config"]), blob["state"], blob["iteration"], trace,
                   blob["optimizer"], blob["scheduler"])


def _stack(pairs: PairSet):
    lr = torch.from_numpy(np.stack([p.lr for p in pairs.pairs])).float().unsqueeze(1)
    hr = torch.from_numpy(np.stack([p.hr for p in pairs.pairs])).float().unsqueeze(1)
    # labels kept compact; widened per batch
    lr_lab = torch.from_numpy(np.stack([p.lr_labels for p in pairs.pairs]).astype(np.int16))
    hr_lab = torch.from_numpy(np.stack([p.hr_labels for p in pairs.pairs]).astype(np.int16))
    return lr, hr, lr_lab, hr_lab


def _augment(tensors, rng: np.random.Generator):
    # in-plane flips and transpose only: flipping depth would break the k <-> r*k alignment
    dims = [t.ndim for t in tensors]
    if rng.random() < 0.5:
        tensors = [t.flip(n - 1) for t, n in zip(tensors, dims)]
    if rng.random() < 0.5:
        tensors = [t.flip(n - 2) for t, n in zip(tensors, dims)]
    if rng.random() < 0.5 and tensors[0].shape[-1] == tensors[0].shape[-2]:
        tensors = [t.transpose(-1, -2) for t in tensors]
    return tensors


def train_selfsr(pairs: PairSet, cfg: SelfSRConfig, resume: SelfSRCheckpoint | None = None,
                 log_every: int = 100, stop_after: int | None = None) -> SelfSRCheckpoint:
    """Optimise L1 + label loss, switching the image term to the uncertainty loss
    from ``cfg.iters_uncertainty_on`` on.

    Before the switch, ``cfg.calibrate_uncertainty`` fits the U conv alone to
    the (detached) reconstruction error, so U is already on the error scale
    when it starts weighting the image loss.

    With ``resume`` the iteration count, optimiser and schedule continue where
    the checkpoint stopped, up to ``cfg.iters_total``. ``stop_after`` ends the
    run early at that iteration (the schedule still spans ``iters_total``).
    """
    if len(pairs) == 0:
        raise ValueError("cannot train on an empty pair set")
    if pairs.r != cfg.r:
        raise ValueError(f"pairs were made with r={pairs.r}, config says r={cfg.r}")
    lr_t, hr_t, lr_lab_t, hr_lab_t = _stack(pairs)

    model = cfg.build_model()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.iters_total)
    start, trace = 0, []
    if resume is not None:
        model.load_state_dict(resume.state)
        if resume.optimizer_state:
            opt.load_state_dict(resume.optimizer_state)
        if resume.scheduler_state:
            sched.load_state_dict(resume.scheduler_state)
        start, trace = resume.iteration, list(resume.trace)
    # batch order depends only on (seed, iteration), so resumed runs replay the same stream
    end = cfg.iters_total if stop_after is None else min(stop_after, cfg.iters_total)
    model.train()
    for it in range(start, end):
        rng = np.random.default_rng([cfg.seed, it])
        idx = torch.from_numpy(rng.choice(len(pairs), size=cfg.batch_size, replace=len(pairs) < cfg.batch_size))
        lr, hr, lr_lab, hr_lab = lr_t[idx], hr_t[idx], lr_lab_t[idx].long(), hr_lab_t[idx].long()
        if cfg.augment:
            lr, hr, lr_lab, hr_lab = _augment([lr, hr, lr_lab, hr_lab], rng)

        _, out = model(lr, lr_lab)
        l1 = (out.image - hr).abs().mean()
        unc_on = it >= cfg.iters_uncertainty_on
        image_loss = sr_uncertainty_loss(out.image, hr, out.uncertainty) if unc_on else l1
        label_loss = sr_label_loss(out.label_logits, hr_lab)
        total = image_loss + label_loss
        calib = l1.new_zeros(())
        if not unc_on and cfg.calibrate_uncertainty:
            # fit only the U conv to the current error; image and attention see no gradient
            u = model.head.uncertainty_from(out.attention.detach())
            calib = sr_uncertainty_loss(out.image.detach(), hr, u)
            total = total + calib
        for name, val in (("image_loss", image_loss), ("label_loss", label_loss)):
            if not math.isfinite(float(val.detach())):
                raise TrainingDiverged(f"self-SR {name} became {val.item()} at iteration {it}")
        opt.zero_grad()
        total.backward()
        opt.step()
        sched.step()
        trace.append({"iter": it, "l1": l1.item(), "image_loss": image_loss.item(),
                      "label_loss": label_loss.item(), "u_calibration": calib.item(), "total": total.item(), "uncertainty_on": int(unc_on)})
        if log_every and (it % log_every == 0 or it == cfg.iters_total - 1):
            log.info("selfsr it %d  l1 %.4f  label %.4f  total %.4f", it, l1.item(), label_loss.item(), total.item())

    return SelfSRCheckpoint(cfg, {k: v.detach().clone() for k, v in model.state_dict().items()},
                            max(end, start), trace, opt.state_dict(), sched.state_dict())


@dataclass
class PseudoHRBundle:
    image: Volume
    labels: LabelVolume
    uncertainty: np.ndarray
    features: np.ndarray  # (C, D, H, W) at LR depth

    def __post_init__(self):
        if not (self.image.shape == self.labels.shape == self.uncertainty.shape):
            raise ValueError("bundle image, labels and uncertainty must share a shape")


def _as_batch(lr: Volume, lr_labels: LabelVolume):
    image = torch.from_numpy(np.ascontiguousarray(lr.data, dtype=np.float32))[None, None]
    labels = torch.from_numpy(np.ascontiguousarray(lr_labels.data))[None].long()
    return image, labels


@torch.no_grad()
def teacher_features(model: SelfSRNet, lr: Volume, lr_labels: LabelVolume) -> np.ndarray:
    image, labels = _as_batch(lr, lr_labels)
    return model.encode(image, labels)[0].numpy()


@torch.no_grad()
def infer_selfsr(lr: Volume, lr_labels: LabelVolume, checkpoint: SelfSRCheckpoint,
                 r: int | None = None, model: SelfSRNet | None = None) -> PseudoHRBundle:
    """Super-resolve an LR volume and its labels along axis 0 (through-plane)."""
    cfg = checkpoint.config
    if r is not None and r != cfg.r:
        raise ValueError(f"checkpoint was trained for r={cfg.r}, requested r={r}")
    if lr.shape != lr_labels.shape:
        raise ValueError(f"image shape {lr.shape} != label shape {lr_labels.shape}")
    if lr_labels.num_classes != cfg.num_classes:
        raise ValueError(f"checkpoint has {cfg.num_classes} classes, labels declare {lr_labels.num_classes}")
    model = model or checkpoint.model()
    image, labels = _as_batch(lr, lr_labels)
    feats, out = model(image, labels)
    spacing = (lr.spacing[0] / cfg.r, lr.spacing[1], lr.spacing[2])
    hr_img = out.image[0, 0].clamp(0.0, 1.0).numpy()
    hr_lab = out.label_logits[0].argmax(0).numpy().astype(np.int64)
    return PseudoHRBundle(
        Volume(hr_img, spacing),
        LabelVolume(hr_lab, spacing, cfg.num_classes),
        out.uncertainty[0, 0].numpy(),
        feats[0].numpy(),
    )
