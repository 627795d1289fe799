from .losses import supervised_loss
from .model import (
    ALL_TRAINABLE,
    HEAD_ONLY,
    STRIDE,
    DetectorModel,
    FreezePolicy,
    Predictions,
    apply_freeze_policy,
    build_detector,
    checkpoint_from_model,
    classifier_prior_bias,
    load_checkpoint,
    model_from_checkpoint,
    reinit_head,
    representation_digest,
    save_checkpoint,
    state_digest,
    validate_checkpoint,
)
from .postprocess import MAX_DETS_PER_IMAGE, Detection, decode_and_nms, greedy_nms
from .targets import TargetSet, assign_targets, center_region, stack_targets

__all__ = [
    "ALL_TRAINABLE", "HEAD_ONLY", "STRIDE", "DetectorModel", "FreezePolicy",
    "Predictions", "apply_freeze_policy", "build_detector",
    "checkpoint_from_model", "classifier_prior_bias", "load_checkpoint",
    "model_from_checkpoint", "reinit_head", "representation_digest",
    "save_checkpoint", "state_digest", "validate_checkpoint",
    "MAX_DETS_PER_IMAGE", "Detection", "decode_and_nms", "greedy_nms",
    "TargetSet", "assign_targets", "center_region", "stack_targets",
    "supervised_loss",
]
