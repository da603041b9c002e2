from .losses import sr_label_loss, sr_uncertainty_loss
from .model import Backbone, SelfSRNet, UASRHead, UASROutput, backbone_forward, uasr_forward
from .training import (
    PseudoHRBundle,
    SelfSRCheckpoint,
    SelfSRConfig,
    TrainingDiverged,
    infer_selfsr,
    teacher_features,
    train_selfsr,
)
