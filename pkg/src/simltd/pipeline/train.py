"""Single-writer training loops: SGD with momentum and linear warm-up."""

from __future__ import annotations

import time

import torch

from ..config import SemiConfig, StageConfig
from ..detector.losses import supervised_loss
from ..detector.model import ALL_TRAINABLE, HEAD_ONLY, DetectorModel, apply_freeze_policy
from ..semi import TeacherState, make_teacher, semi_train_step
from .data import LabeledStream, UnlabeledStream

LOG_EVERY = 50


def freeze_policy_for(name: str):
    return {"all": ALL_TRAINABLE, "head_only": HEAD_ONLY}[name]


def build_optimizer(model: DetectorModel, lr: float, momentum: float):
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        return None
    return torch.optim.SGD(params, lr=lr, momentum=momentum)


def warmup_lr(base_lr: float, step: int, iterations: int, warmup_frac: float) -> float:
    warmup_steps = max(1, int(round(warmup_frac * iterations)))
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    return base_lr


def train_stage(model: DetectorModel, stage_cfg: StageConfig,
                labeled: LabeledStream,
                unlabeled: UnlabeledStream | None = None,
                semi_cfg: SemiConfig | None = None,
                focal: bool = False) -> dict:
    """Run one stage's iteration budget; returns the stage log fragment.

    When semi training is active the teacher starts as an EMA copy of the
    student and every step runs supervised + pseudo-label objectives; the
    returned fragment carries per-interval loss means and pseudo-label counts.
    """
    apply_freeze_policy(model, freeze_policy_for(stage_cfg.freeze_policy))
    lr = stage_cfg.effective_lr
    optimizer = build_optimizer(model, lr, stage_cfg.momentum)
    semi_active = (semi_cfg is not None and semi_cfg.enabled and unlabeled is not None
                   and stage_cfg.semi_enabled)
    teacher: TeacherState | None = None
    if semi_active:
        teacher = make_teacher(model, momentum=semi_cfg.momentum)

    metric_log: list[dict] = []
    pseudo_hist: list[dict] = []
    window: list[float] = []
    start = time.perf_counter()
    for step in range(stage_cfg.iterations):
        if optimizer is not None:
            current = warmup_lr(lr, step, stage_cfg.iterations, stage_cfg.warmup_frac)
            for group in optimizer.param_groups:
                group["lr"] = current
        images, targets = labeled.next_batch()
        if semi_active:
            batch = unlabeled.next_batch()
            breakdown = semi_train_step(model, teacher, optimizer, images, targets,
                                        batch, tau=semi_cfg.tau, alpha=semi_cfg.alpha,
                                        focal=focal)
            window.append(breakdown["total"])
            if breakdown["pseudo_counts"]:
                pseudo_hist.append({"step": step, "counts": breakdown["pseudo_counts"]})
        else:
            model.train()
            preds = model(images)
            loss, parts = supervised_loss(preds.logits, preds.deltas, targets,
                                          focal=focal)
            if optimizer is not None:
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
            window.append(float(loss.detach()))
        if (step + 1) % LOG_EVERY == 0 or step + 1 == stage_cfg.iterations:
            metric_log.append({"step": step + 1,
                               "loss": sum(window) / max(1, len(window))})
            window = []
    fragment = {
        "iterations": stage_cfg.iterations,
        "wall_clock_s": time.perf_counter() - start,
        "metric_log": metric_log,
        "pseudo_hist": pseudo_hist,
        "semi": semi_active,
    }
    if teacher is not None:
        fragment["teacher"] = teacher
    return fragment
