from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from ..distill import DEFAULT_BETA, distillation_losses
from ..losses import ce_dice_loss, check_targets

COMPONENTS = ("L_u_seg", "L_HR_seg", "L_corr", "L_spatial")


class LossComponentError(RuntimeError):
    pass


def uncertainty_weight_map(unc_hr: torch.Tensor, r: int, offset: int = 0) -> torch.Tensor:
    """``1 - minmax(U[offset::r])`` along depth; a flat map gives weight 1 everywhere.

    ``unc_hr`` is (rD, H, W) or (B, rD, H, W); normalisation is per volume.
    """
    squeeze = unc_hr.ndim == 3
    u = unc_hr[None] if squeeze else unc_hr
    u = u[:, offset::r]
    flat = u.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    span = hi - lo
    norm = torch.where(span > 0, (u - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(u))
    w = 1.0 - norm
    return w[0] if squeeze else w


def weighted_ce(lr_logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    check_targets(labels, lr_logits.shape[1])
    ce = F.cross_entropy(lr_logits, labels.long(), reduction="none")
    if weights is None:
        return ce.mean()
    if weights.shape != ce.shape:
        raise ValueError(f"weight map {tuple(weights.shape)} does not match loss map {tuple(ce.shape)}")
    return (ce * weights).mean()


def uncertainty_weighted_seg_loss(lr_logits, labels, unc_hr, r: int, offset: int = 0) -> torch.Tensor:
    """Per-voxel cross-entropy weighted by one minus the normalised, depth-decimated uncertainty."""
    return weighted_ce(lr_logits, labels, uncertainty_weight_map(unc_hr, r, offset))


def hr_seg_loss(hr_logits, pseudo_labels) -> torch.Tensor:
    return ce_dice_loss(hr_logits, pseudo_labels)


def total_loss(outputs, lr_labels, cfg, hr_labels=None, weights=None, teacher=None, adaptor=None):
    """Combined segmentation objective and its components.

    total = L_u_seg + L_HR_seg + lambda * (L_corr + L_spatial); components
    switched off by ``cfg`` flags are exactly zero.
    """
    zero = outputs.lr_logits.new_zeros(())
    parts = dict.fromkeys(COMPONENTS, zero)
    parts["L_u_seg"] = weighted_ce(outputs.lr_logits, lr_labels, weights if cfg.uncertainty_on else None)
    if cfg.hr_head_on:
        if outputs.hr_logits is None or hr_labels is None:
            raise ValueError("hr_head_on needs HR logits and pseudo HR labels")
        parts["L_HR_seg"] = hr_seg_loss(outputs.hr_logits, hr_labels)
    if cfg.distill_on and cfg.lam > 0:
        if teacher is None or adaptor is None:
            raise ValueError("distill_on needs teacher features and an adaptor")
        parts["L_corr"], parts["L_spatial"] = distillation_losses(outputs.features, teacher, adaptor,
                                                                  getattr(cfg, "beta", DEFAULT_BETA))
    for name, val in parts.items():
        if not math.isfinite(float(val.detach())):
            raise LossComponentError(f"loss component {name} is {val.item()}")
    total = parts["L_u_seg"] + parts["L_HR_seg"] + cfg.lam * (parts["L_corr"] + parts["L_spatial"])
    return total, parts
