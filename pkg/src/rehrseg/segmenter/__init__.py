from .losses import (
    COMPONENTS,
    LossComponentError,
    hr_seg_loss,
    total_loss,
    uncertainty_weight_map,
    uncertainty_weighted_seg_loss,
    weighted_ce,
)
from .model import HRHead, SegNet, SegOutputs, seg_forward
from .training import (
    SegCheckpoint,
    SegConfig,
    SegSample,
    build_seg_dataset,
    infer_segmenter,
    shift_hr,
    train_segmenter,
)
