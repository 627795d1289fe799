"""Center-based target assignment for the anchor-free head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from ..dataset import InstanceAnnotation
from .model import STRIDE


@dataclass
class TargetSet:
    cls: torch.Tensor     # [L, C] multi-hot class targets
    reg: torch.Tensor     # [L, 4] (l, t, r, b) / stride, defined on positives
    pos: torch.Tensor     # [L] bool, positive locations
    valid: torch.Tensor   # [L] bool, locations contributing to the class loss


def center_region(bbox: tuple[float, float, float, float],
                  stride: int = STRIDE) -> tuple[float, float, float, float]:
    """The central half of the box, widened to at least one stride per axis so
    every box owns at least one feature location."""
    x, y, w, h = bbox
    cx, cy = x + w / 2.0, y + h / 2.0
    rw, rh = max(w / 2.0, float(stride)), max(h / 2.0, float(stride))
    return cx - rw / 2.0, cy - rh / 2.0, rw, rh


def assign_targets(annotations: Sequence[InstanceAnnotation],
                   locations: torch.Tensor,
                   ignore_regions: Sequence[tuple[float, float, float, float]] = (),
                   class_index: dict[int, int] | None = None,
                   num_classes: int = 1,
                   stride: int = STRIDE) -> TargetSet:
    """Assign each location to the smallest-area box whose center region
    contains it; locations inside ignore regions (and not positive) drop out
    of the loss; everything else is negative.

    ``class_index`` maps category ids to classifier rows; annotations of
    categories absent from it are treated as ignore regions.
    """
    loc = locations.detach().cpu().numpy()
    num_loc = loc.shape[0]
    cls = np.zeros((num_loc, num_classes), dtype=np.float32)
    reg = np.zeros((num_loc, 4), dtype=np.float32)
    pos = np.zeros(num_loc, dtype=bool)
    valid = np.ones(num_loc, dtype=bool)
    best_area = np.full(num_loc, np.inf)

    ignore_boxes = [tuple(b) for b in ignore_regions]
    real = []
    for ann in annotations:
        if ann.ignore or (class_index is not None and ann.category_id not in class_index):
            ignore_boxes.append(ann.bbox)
        else:
            real.append(ann)

    for ann in sorted(real, key=lambda a: a.id):
        x, y, w, h = ann.bbox
        rx, ry, rw, rh = center_region(ann.bbox, stride)
        inside = ((loc[:, 0] >= rx) & (loc[:, 0] <= rx + rw)
                  & (loc[:, 1] >= ry) & (loc[:, 1] <= ry + rh))
        area = w * h
        take = inside & (area < best_area)
        if not take.any():
            continue
        row = class_index[ann.category_id] if class_index is not None else 0
        cls[take] = 0.0
        cls[take, row] = 1.0
        reg[take, 0] = (loc[take, 0] - x) / stride
        reg[take, 1] = (loc[take, 1] - y) / stride
        reg[take, 2] = (x + w - loc[take, 0]) / stride
        reg[take, 3] = (y + h - loc[take, 1]) / stride
        pos[take] = True
        best_area[take] = area

    for bx, by, bw, bh in ignore_boxes:
        inside = ((loc[:, 0] >= bx) & (loc[:, 0] <= bx + bw)
                  & (loc[:, 1] >= by) & (loc[:, 1] <= by + bh))
        valid[inside & ~pos] = False

    return TargetSet(cls=torch.from_numpy(cls), reg=torch.from_numpy(reg),
                     pos=torch.from_numpy(pos), valid=torch.from_numpy(valid))


def stack_targets(targets: Sequence[TargetSet]) -> TargetSet:
    return TargetSet(cls=torch.stack([t.cls for t in targets]),
                     reg=torch.stack([t.reg for t in targets]),
                     pos=torch.stack([t.pos for t in targets]),
                     valid=torch.stack([t.valid for t in targets]))
