"""Detection loss: per-class sigmoid BCE plus L1 box regression.

L_cls averages the per-location class-vector BCE over non-ignored locations
(optionally focal-modulated); L_reg averages the summed L1 of the four
center-to-edge deltas over positive locations and is exactly 0 when a batch
holds no positives.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import DetectorError
from .targets import TargetSet

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


def supervised_loss(logits: torch.Tensor, deltas: torch.Tensor,
                    targets: TargetSet,
                    focal: bool = False) -> tuple[torch.Tensor, dict]:
    """Total detection loss and its {cls, reg} breakdown.

    Accepts [L, ...] single-image or [B, L, ...] batched tensors.
    """
    if logits.ndim == 2:
        logits, deltas = logits.unsqueeze(0), deltas.unsqueeze(0)
        targets = TargetSet(cls=targets.cls.unsqueeze(0), reg=targets.reg.unsqueeze(0),
                            pos=targets.pos.unsqueeze(0), valid=targets.valid.unsqueeze(0))
    if not torch.isfinite(logits).all() or not torch.isfinite(deltas).all():
        raise DetectorError("non-finite predictions passed to the loss")
    if logits.shape[:2] != targets.cls.shape[:2] or logits.shape[2] != targets.cls.shape[2]:
        raise DetectorError(
            f"logits {tuple(logits.shape)} do not match class targets "
            f"{tuple(targets.cls.shape)}")

    cls_t = targets.cls.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, cls_t, reduction="none")
    if focal:
        p = torch.sigmoid(logits)
        p_t = p * cls_t + (1 - p) * (1 - cls_t)
        alpha_t = FOCAL_ALPHA * cls_t + (1 - FOCAL_ALPHA) * (1 - cls_t)
        bce = alpha_t * (1 - p_t) ** FOCAL_GAMMA * bce
    valid = targets.valid.to(logits.dtype)
    num_valid = valid.sum()
    cls_loss = (bce.sum(-1) * valid).sum() / num_valid.clamp(min=1.0)

    pos = targets.pos.to(logits.dtype)
    num_pos = pos.sum()
    l1 = (deltas - targets.reg.to(deltas.dtype)).abs().sum(-1)
    reg_loss = (l1 * pos).sum() / num_pos.clamp(min=1.0)

    total = cls_loss + reg_loss
    return total, {"cls": cls_loss, "reg": reg_loss}
