import torch

from ..losses import ce_dice_loss

U_EPS = 1e-4


def sr_uncertainty_loss(pred: torch.Tensor, target: torch.Tensor, unc: torch.Tensor,
                        eps: float = U_EPS) -> torch.Tensor:
    """Voxelwise L1 divided by the uncertainty plus log-uncertainty, averaged.

    Minimising over ``unc`` alone drives it to the voxel's L1 error, so the map
    learns to track reconstruction error. ``unc`` is clamped to
    ``[eps, 1 - eps]`` to keep the division and the log bounded.
    """
    if pred.shape != target.shape or pred.shape != unc.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)}, {tuple(target.shape)}, {tuple(unc.shape)}")
    if bool((unc < 0).any()) or bool((unc > 1).any()):
        raise ValueError("uncertainty must lie in (0, 1)")
    u = unc.clamp(eps, 1.0 - eps)
    return ((pred - target).abs() / u + torch.log(u)).mean()


def sr_label_loss(label_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    # uncertainty deliberately does not weight the label term
    return ce_dice_loss(label_logits, target)
