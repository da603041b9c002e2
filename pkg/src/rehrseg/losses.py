"""Segmentation losses shared by the self-SR label branch and the HR segmentation head."""
import torch
import torch.nn.functional as F

DICE_SMOOTH = 1e-5


def check_targets(target: torch.Tensor, num_classes: int) -> None:
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes}), got [{int(target.min())}, {int(target.max())}]")


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - mean over classes of the soft Dice, pooled over batch and voxels."""
    num_classes = logits.shape[1]
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(target.long(), num_classes).movedim(-1, 1).to(probs.dtype)
    dims = (0, *range(2, logits.ndim))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2.0 * inter + smooth) / (denom + smooth)
    return 1.0 - dice.mean()


def ce_dice_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean voxelwise cross-entropy plus soft Dice loss.

    ``logits`` is (B, K, ...) and ``target`` (B, ...) holds integer class ids.
    """
    check_targets(target, logits.shape[1])
    return F.cross_entropy(logits, target.long()) + soft_dice_loss(logits, target)
