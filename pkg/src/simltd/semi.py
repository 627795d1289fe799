"""Student-teacher semi-supervised training.

The teacher is an exponential moving average of the student. It reads weak
views of unlabeled images and proposes pseudo targets above a confidence
threshold; the student learns from strong views against those targets through
the same loss functional as the supervised branch, weighted by alpha. The
teacher never receives gradients.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .augment import map_boxes_through_ops
from .detector.losses import supervised_loss
from .detector.model import DetectorModel
from .detector.postprocess import decode_and_nms
from .detector.targets import TargetSet, assign_targets, stack_targets
from .errors import DetectorError

DEFAULT_TAU = 0.7        # desk scale; higher thresholds starve tiny models
DEFAULT_MOMENTUM = 0.999
DEFAULT_ALPHA = 1.0


@dataclass(frozen=True)
class PseudoTarget:
    bbox: tuple[float, float, float, float]
    category_id: int
    score: float


@dataclass
class TeacherState:
    params: DetectorModel
    momentum: float

    def __post_init__(self):
        if not (0.0 <= self.momentum <= 1.0):
            raise DetectorError(f"EMA momentum must be in [0, 1], got {self.momentum}")


def make_teacher(student: DetectorModel, momentum: float = DEFAULT_MOMENTUM) -> TeacherState:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return TeacherState(params=teacher, momentum=momentum)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: DetectorModel) -> TeacherState:
    """theta_T <- m * theta_T + (1 - m) * theta_S over parameters and buffers."""
    t_state = teacher.params.state_dict()
    s_state = student.state_dict()
    if set(t_state) != set(s_state):
        raise DetectorError("teacher/student parameter structures differ")
    m = teacher.momentum
    for name, t_param in t_state.items():
        s_param = s_state[name]
        if t_param.shape != s_param.shape:
            raise DetectorError(f"shape mismatch for {name}: "
                                f"{tuple(t_param.shape)} vs {tuple(s_param.shape)}")
        if not t_param.dtype.is_floating_point:
            continue
        if m == 1.0:
            continue
        if m == 0.0:
            t_param.copy_(s_param)
        else:
            # delta form: exact identity when student == teacher
            t_param.add_(s_param.to(t_param.dtype) - t_param, alpha=1.0 - m)
    return teacher


def generate_pseudo_labels(teacher: TeacherState, weak_images: torch.Tensor,
                           image_sizes: list[tuple[int, int]], tau: float,
                           nms_iou: float = 0.6,
                           max_dets: int = 50) -> list[list[PseudoTarget]]:
    """Teacher detections on the weak view, thresholded at tau, per image."""
    if not (0.0 < tau < 1.0):
        raise DetectorError(f"pseudo threshold tau must be in (0, 1), got {tau}")
    with torch.inference_mode():
        preds = teacher.params(weak_images)
    batch = weak_images.shape[0]
    dets = decode_and_nms(preds, image_ids=list(range(batch)),
                          image_sizes=image_sizes,
                          class_ids=teacher.params.class_ids,
                          score_thresh=tau, iou_thresh=nms_iou,
                          max_dets_per_image=max_dets)
    out: list[list[PseudoTarget]] = [[] for _ in range(batch)]
    for d in dets:
        out[d.image_id].append(PseudoTarget(bbox=d.bbox, category_id=d.category_id,
                                            score=d.score))
    return out


def assign_pseudo_targets(pseudo: list[list[PseudoTarget]],
                          strong_tail_logs: list[list],
                          weak_sizes: list[tuple[int, int]],
                          locations: torch.Tensor,
                          class_index: dict[int, int],
                          num_classes: int) -> TargetSet:
    """Map pseudo boxes through each sample's strong-view op_log, then assign
    them to locations exactly like ground truth."""
    from .augment import op_sizes
    from .dataset import InstanceAnnotation

    per_image = []
    for targets, log, size in zip(pseudo, strong_tail_logs, weak_sizes):
        boxes = [t.bbox for t in targets]
        mapped = map_boxes_through_ops(boxes, log, op_sizes(size, log))
        anns = []
        for i, (t, box) in enumerate(zip(targets, mapped)):
            if box is None or box[2] <= 0 or box[3] <= 0:
                continue
            anns.append(InstanceAnnotation(
                id=i + 1, image_id=0, category_id=t.category_id,
                bbox=box, area=float(box[2] * box[3])))
        per_image.append(assign_targets(anns, locations, class_index=class_index,
                                        num_classes=num_classes))
    return stack_targets(per_image)


def combined_loss(labeled_logits: torch.Tensor, labeled_deltas: torch.Tensor,
                  labeled_targets: TargetSet,
                  unlabeled_logits: torch.Tensor | None,
                  unlabeled_deltas: torch.Tensor | None,
                  pseudo_targets: TargetSet | None,
                  alpha: float, focal: bool = False) -> tuple[torch.Tensor, dict]:
    """L = L_sup + alpha * L_pseudo, the pseudo term sharing the supervised
    functional form with teacher targets in place of ground truth."""
    if alpha < 0:
        raise DetectorError(f"alpha must be >= 0, got {alpha}")
    total, parts = supervised_loss(labeled_logits, labeled_deltas, labeled_targets,
                                   focal=focal)
    breakdown = {"sup": total, "sup_cls": parts["cls"], "sup_reg": parts["reg"]}
    if unlabeled_logits is not None and pseudo_targets is not None:
        pseudo_total, pseudo_parts = supervised_loss(
            unlabeled_logits, unlabeled_deltas, pseudo_targets, focal=focal)
        breakdown.update({"pseudo": pseudo_total, "pseudo_cls": pseudo_parts["cls"],
                          "pseudo_reg": pseudo_parts["reg"]})
        total = total + alpha * pseudo_total
    breakdown["total"] = total
    return total, breakdown


@dataclass
class UnlabeledBatch:
    weak_images: torch.Tensor           # teacher input [B, 3, H, W]
    strong_images: torch.Tensor         # student input [B, 3, H, W]
    strong_tail_logs: list[list]        # per-sample ops applied on top of the weak view
    weak_sizes: list[tuple[int, int]]   # weak-view (W, H) per sample


def semi_train_step(student: DetectorModel, teacher: TeacherState,
                    optimizer: torch.optim.Optimizer | None,
                    labeled_images: torch.Tensor, labeled_targets: TargetSet,
                    unlabeled: UnlabeledBatch | None,
                    tau: float = DEFAULT_TAU, alpha: float = DEFAULT_ALPHA,
                    focal: bool = False,
                    class_index: dict[int, int] | None = None) -> dict:
    """One student gradient step under the active freeze policy, then an EMA
    teacher update. Returns the loss breakdown plus pseudo-label counts."""
    student.train()
    pseudo_set = None
    unlabeled_preds = None
    pseudo_per_class: dict[int, int] = {}
    if unlabeled is not None and alpha > 0:
        pseudo = generate_pseudo_labels(teacher, unlabeled.weak_images,
                                        unlabeled.weak_sizes, tau)
        for targets in pseudo:
            for t in targets:
                pseudo_per_class[t.category_id] = pseudo_per_class.get(t.category_id, 0) + 1
        unlabeled_preds = student(unlabeled.strong_images)
        index = class_index or {cid: i for i, cid in enumerate(student.class_ids)}
        pseudo_set = assign_pseudo_targets(
            pseudo, unlabeled.strong_tail_logs, unlabeled.weak_sizes,
            unlabeled_preds.locations, index, student.num_classes)
    labeled_preds = student(labeled_images)
    total, breakdown = combined_loss(
        labeled_preds.logits, labeled_preds.deltas, labeled_targets,
        unlabeled_preds.logits if unlabeled_preds is not None else None,
        unlabeled_preds.deltas if unlabeled_preds is not None else None,
        pseudo_set, alpha=alpha, focal=focal)
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
    ema_update(teacher, student)
    out = {k: float(v.detach()) for k, v in breakdown.items()}
    out["pseudo_counts"] = pseudo_per_class
    return out
