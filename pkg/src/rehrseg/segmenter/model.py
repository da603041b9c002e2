"""Compact 3D U-Net with a low-resolution head and a depth-upsampling HR head."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

POOL = (1, 2, 2)  # in-plane pooling only: the LR input is already coarse along depth


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
    )


@dataclass
class SegOutputs:
    lr_logits: torch.Tensor  # (B, K, D, H, W)
    hr_logits: torch.Tensor | None  # (B, K, rD, H, W)
    features: torch.Tensor  # decoder map used for distillation


class HRHead(nn.Module):
    """Upsample the pre-final features by ``r`` along depth, then conv -> ReLU -> conv."""

    def __init__(self, channels: int, num_classes: int, r: int):
        super().__init__()
        self.r = r
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, num_classes, 1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=(self.r, 1, 1), mode="trilinear", align_corners=False)
        return self.conv2(F.relu(self.conv1(x)))


class SegNet(nn.Module):
    def __init__(self, num_classes: int = 2, base_channels: int = 16, levels: int = 3, r: int = 4,
                 hr_head: bool = True, feature_stage: int = 0):
        super().__init__()
        if levels < 2:
            raise ValueError("the U-Net needs at least two levels")
        if not 0 <= feature_stage < levels - 1:
            raise ValueError(f"feature_stage must lie in [0, {levels - 1})")
        chans = [base_channels * 2 ** i for i in range(levels)]
        self.levels, self.r, self.feature_stage = levels, r, feature_stage
        self.encoders = nn.ModuleList(
            conv_block(1 if i == 0 else chans[i - 1], chans[i]) for i in range(levels)
        )
        # decoder stage 0 sits next to the bottleneck
        self.decoders = nn.ModuleList(
            conv_block(chans[i + 1] + chans[i], chans[i]) for i in reversed(range(levels - 1))
        )
        self.lr_head = nn.Conv3d(chans[0], num_classes, 1)
        # built last so the LR path draws identical initial weights with or without it
        self.hr_head = HRHead(chans[0], num_classes, r) if hr_head else None

    @property
    def feature_channels(self) -> int:
        return self.decoders[self.feature_stage][0].out_channels

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def forward(self, x) -> SegOutputs:
        h, w = x.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ValueError(f"in-plane size {(h, w)} must be divisible by {self.divisor}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else F.max_pool3d(x, POOL))
            skips.append(x)
        x = skips.pop()
        feats = None
        for stage, dec in enumerate(self.decoders):
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[2:], mode="trilinear", align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
            if stage == self.feature_stage:
                feats = x
        lr_logits = self.lr_head(x)
        hr_logits = self.hr_head(x) if self.hr_head is not None else None
        return SegOutputs(lr_logits, hr_logits, feats)


def seg_forward(model: SegNet, lr) -> SegOutputs:
    if lr.ndim != 5 or lr.shape[1] != 1:
        raise ValueError(f"expected an image batch (B, 1, D, H, W), got {tuple(lr.shape)}")
    return model(lr)
