"""Self-SR network: compact 3D encoder-decoder backbone plus the uncertainty-aware SR head."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LADDER = 4  # backbone pools depth and in-plane twice


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.1, inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.1, inplace=True),
    )


class Backbone(nn.Module):
    """Three-level 3D U-Net whose decoder returns ``channels`` features at input resolution.

    Stands in for a video frame-interpolation network; pretrained weights can be
    loaded with :func:`load_backbone_weights`.
    """

    def __init__(self, in_channels: int, channels: int = 16):
        super().__init__()
        c = channels
        self.enc1 = conv_block(in_channels, c)
        self.enc2 = conv_block(c, 2 * c)
        self.bottom = conv_block(2 * c, 2 * c)
        self.dec2 = conv_block(4 * c, c)
        self.dec1 = conv_block(2 * c, c)
        self.out_channels = c

    def forward(self, x):
        d, h, w = x.shape[2:]
        if d < LADDER:
            raise ValueError(f"input depth {d} is too small for the backbone (needs >= {LADDER})")
        pad = [(-s) % LADDER for s in (w, h, d)]
        if any(pad):
            x = F.pad(x, (0, pad[0], 0, pad[1], 0, pad[2]), mode="replicate")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool3d(e1, 2))
        b = self.bottom(F.max_pool3d(e2, 2))
        u2 = F.interpolate(b, size=e2.shape[2:], mode="trilinear", align_corners=False)
        d2 = self.dec2(torch.cat([u2, e2], dim=1))
        u1 = F.interpolate(d2, size=e1.shape[2:], mode="trilinear", align_corners=False)
        out = self.dec1(torch.cat([u1, e1], dim=1))
        return out[:, :, :d, :h, :w]


def linear_upsample_depth(x, r: int):
    """Linear interpolation along depth with HR sample i at LR coordinate i / r.

    Matches the offset-0 decimation grid (LR slice k sits on HR slice r * k);
    the last ``r - 1`` HR slices repeat the final LR slice.
    """
    nxt = torch.cat([x[:, :, 1:], x[:, :, -1:]], dim=2)
    t = torch.arange(r, dtype=x.dtype, device=x.device).view(1, 1, 1, r, 1, 1) / r
    out = x.unsqueeze(3) * (1 - t) + nxt.unsqueeze(3) * t  # (B, C, D, r, H, W)
    b, c, d, _, h, w = out.shape
    return out.reshape(b, c, d * r, h, w)


@dataclass
class UASROutput:
    branch_images: torch.Tensor  # (B, N, rD, H, W)
    branch_labels: torch.Tensor  # (B, N, K, rD, H, W) logits
    attention: torch.Tensor  # (B, N, rD, H, W), sums to one over N
    image: torch.Tensor  # (B, 1, rD, H, W)
    label_logits: torch.Tensor  # (B, K, rD, H, W)
    uncertainty: torch.Tensor  # (B, 1, rD, H, W) in (0, 1)


class UASRHead(nn.Module):
    """Multi-branch SR head producing HR image, HR label logits and an uncertainty map.

    The merge step folds a sliding window of ``window`` LR slices into channels
    (a 3D conv with depth extent ``window`` is exactly a 2D conv over the
    window's merged channels) and emits ``r * mid_channels`` maps per LR slice;
    these are split back into ``r`` HR slices per LR slice.

    With ``residual`` each branch image is a tanh correction added to the
    linearly upsampled LR image (pass it as ``lr_image``); otherwise the
    branch image is the tanh output alone.
    """

    def __init__(self, in_channels: int, r: int, branches: int = 4, num_classes: int = 2,
                 mid_channels: int = 8, window: int = 3, residual: bool = False):
        super().__init__()
        if branches < 2:
            raise ValueError("the UASR head needs at least two branches")
        self.r, self.branches, self.num_classes, self.mid = r, branches, num_classes, mid_channels
        self.residual = residual
        self.merge = nn.Conv3d(in_channels, r * mid_channels, (window, 3, 3), padding=(window // 2, 1, 1))
        self.image_conv = nn.Conv3d(mid_channels, branches, 3, padding=1)
        self.label_conv = nn.Conv3d(mid_channels, branches * num_classes, 3, padding=1)
        self.attn_conv = nn.Conv3d(mid_channels, branches, 3, padding=1)
        self.unc_conv = nn.Conv3d(branches, 1, 3, padding=1)

    def uncertainty_from(self, attention):
        return torch.sigmoid(self.unc_conv(attention))

    def split_depth(self, fm):
        b, _, d, h, w = fm.shape
        fm = fm.view(b, self.mid, self.r, d, h, w).permute(0, 1, 3, 2, 4, 5)
        return fm.reshape(b, self.mid, d * self.r, h, w)

    def forward(self, feats, lr_image=None) -> UASROutput:
        fm = self.split_depth(F.leaky_relu(self.merge(feats), 0.1))
        b, _, dd, h, w = fm.shape
        p_img = torch.tanh(self.image_conv(fm))
        if self.residual:
            if lr_image is None:
                raise ValueError("a residual head needs the LR image")
            p_img = p_img + linear_upsample_depth(lr_image, self.r)
        p_lab = self.label_conv(fm).view(b, self.branches, self.num_classes, dd, h, w)
        p_att = self.attn_conv(fm).softmax(dim=1)
        image = (p_att * p_img).sum(dim=1, keepdim=True)
        labels = (p_att.unsqueeze(2) * p_lab).sum(dim=1)
        unc = self.uncertainty_from(p_att)
        return UASROutput(p_img, p_lab, p_att, image, labels, unc)


class SelfSRNet(nn.Module):
    def __init__(self, r: int, channels: int = 16, branches: int = 4, num_classes: int = 2,
                 mid_channels: int = 8, residual: bool = True):
        super().__init__()
        self.num_classes = num_classes
        self.backbone = Backbone(1 + num_classes, channels)
        self.head = UASRHead(channels, r, branches, num_classes, mid_channels, residual=residual)

    def encode(self, image, labels):
        """Backbone features for an image batch (B, 1, D, H, W) and its label ids (B, D, H, W)."""
        onehot = F.one_hot(labels.long(), self.num_classes).movedim(-1, 1).to(image.dtype)
        return self.backbone(torch.cat([image, onehot], dim=1))

    def forward(self, image, labels):
        feats = self.encode(image, labels)
        return feats, self.head(feats, image)


def backbone_forward(model: SelfSRNet, image, labels):
    """Features (B, C, D, H, W) at the input's depth resolution."""
    return model.encode(image, labels)


def uasr_forward(feats, head: UASRHead, lr_image=None) -> UASROutput:
    if not torch.isfinite(feats).all():
        raise ValueError("backbone features contain non-finite values")
    if feats.shape[1] != head.merge.in_channels:
        raise ValueError(f"head expects {head.merge.in_channels} feature channels, got {feats.shape[1]}")
    return head(feats, lr_image)


def load_backbone_weights(model: SelfSRNet, path) -> None:
    """Initialise the backbone from an externally pretrained state dict."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.backbone.load_state_dict(state)
