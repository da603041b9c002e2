"""Structural distillation from the frozen self-SR network into the segmenter.

Two terms: an affinity-graph correlation loss over average-pooled feature
patches, and a cosine loss between adapted student features and teacher
features.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_BETA = (1, 2, 2)
NORM_EPS = 1e-12


def _batched(feat: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if feat.ndim == 4:
        return feat.unsqueeze(0), True
    if feat.ndim != 5:
        raise ValueError(f"expected a (C, D, H, W) or (B, C, D, H, W) feature map, got {tuple(feat.shape)}")
    return feat, False


def align_features(f_sr: torch.Tensor, target_shape) -> torch.Tensor:
    """Trilinearly resample teacher features to the student's spatial shape."""
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or min(target_shape) < 1:
        raise ValueError(f"invalid target shape {target_shape}")
    feat, squeeze = _batched(f_sr)
    if not torch.isfinite(feat).all():
        raise ValueError("teacher features contain non-finite values")
    if tuple(feat.shape[2:]) != target_shape:
        feat = F.interpolate(feat, size=target_shape, mode="trilinear", align_corners=False)
    return feat[0] if squeeze else feat


def crop_to_multiple(feat: torch.Tensor, beta=DEFAULT_BETA) -> torch.Tensor:
    """Crop trailing voxels so every spatial extent is divisible by ``beta``."""
    d, h, w = feat.shape[-3:]
    return feat[..., : d - d % beta[0], : h - h % beta[1], : w - w % beta[2]]


def build_affinity(feat: torch.Tensor, beta=DEFAULT_BETA) -> torch.Tensor:
    """Pairwise cosine similarity between average-pooled patches of ``beta`` voxels.

    Returns (n, n) for a single map or (B, n, n) for a batch, with
    n = D * H * W / prod(beta).
    """
    feat, squeeze = _batched(feat)
    beta = tuple(int(b) for b in beta)
    if any(s % b for s, b in zip(feat.shape[2:], beta)):
        raise ValueError(f"spatial shape {tuple(feat.shape[2:])} is not divisible by beta={beta}")
    pooled = F.avg_pool3d(feat, kernel_size=beta, stride=beta).flatten(2)  # (B, C, n)
    norms = pooled.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)
    unit = pooled / norms
    aff = unit.transpose(1, 2) @ unit
    return aff[0] if squeeze else aff


def correlation_loss(a_sr: torch.Tensor, a_seg: torch.Tensor) -> torch.Tensor:
    """Sum of squared affinity differences divided by the node count n (batch mean)."""
    if a_sr.shape != a_seg.shape:
        raise ValueError(f"affinity shapes differ: {tuple(a_sr.shape)} vs {tuple(a_seg.shape)}")
    if a_sr.ndim == 2:
        a_sr, a_seg = a_sr[None], a_seg[None]
    n = a_sr.shape[-1]
    return ((a_sr - a_seg) ** 2).sum(dim=(1, 2)).mean() / n


class Adaptor(nn.Module):
    """Single 1x1x1 convolution mapping student channels onto teacher channels."""

    def __init__(self, student_channels: int, teacher_channels: int):
        super().__init__()
        self.conv = nn.Conv3d(student_channels, teacher_channels, kernel_size=1)
        self.out_channels = teacher_channels

    def forward(self, x):
        return self.conv(x)


def cosine_distance(adapted: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Mean over voxels of 1 - cos(student, teacher); zero-norm teacher voxels contribute 0."""
    if adapted.shape != teacher.shape:
        raise ValueError(f"adapted student {tuple(adapted.shape)} and teacher {tuple(teacher.shape)} differ")
    t_norm = teacher.norm(dim=1)
    s_norm = adapted.norm(dim=1).clamp_min(NORM_EPS)
    valid = t_norm > 0
    cos = (adapted * teacher).sum(dim=1) / (s_norm * t_norm.clamp_min(NORM_EPS))
    per_voxel = torch.where(valid, 1.0 - cos, torch.zeros_like(cos))
    return per_voxel.mean()


def spatial_loss(f_seg: torch.Tensor, f_sr: torch.Tensor, adaptor: Adaptor) -> torch.Tensor:
    """Cosine loss between adapted student features and (frozen) teacher features."""
    f_seg, _ = _batched(f_seg)
    f_sr, _ = _batched(f_sr)
    return cosine_distance(adaptor(f_seg), f_sr.detach())


def distillation_losses(f_seg: torch.Tensor, f_sr: torch.Tensor, adaptor: Adaptor, beta=DEFAULT_BETA):
    """Both distillation terms for a student/teacher pair; teacher is aligned to the student first."""
    f_seg, _ = _batched(f_seg)
    teacher = align_features(f_sr.detach(), f_seg.shape[2:])
    s = crop_to_multiple(f_seg, beta)
    t = crop_to_multiple(teacher, beta)
    corr = correlation_loss(build_affinity(t, beta), build_affinity(s, beta))
    return corr, spatial_loss(f_seg, teacher, adaptor)
