"""Score filtering, box decoding, and per-class greedy NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import Predictions

MAX_DETS_PER_IMAGE = 300


@dataclass(frozen=True)
class Detection:
    image_id: int
    bbox: tuple[float, float, float, float]
    category_id: int
    score: float


def box_iou_xyxy(a: np.ndarray, b: np.ndarray) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union if union > 0 else 0.0


def greedy_nms(boxes_xyxy: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Indices of survivors: keep highest score, suppress boxes above iou_thresh."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep: list[int] = []
    for idx in order:
        if all(box_iou_xyxy(boxes_xyxy[idx], boxes_xyxy[k]) <= iou_thresh for k in keep):
            keep.append(int(idx))
    return keep


def decode_and_nms(preds: Predictions, image_ids: list[int],
                   image_sizes: list[tuple[int, int]],
                   class_ids: tuple[int, ...],
                   score_thresh: float = 0.05,
                   iou_thresh: float = 0.6,
                   max_dets_per_image: int = MAX_DETS_PER_IMAGE,
                   stride: int | None = None) -> list[Detection]:
    """Detections for a batch: sigmoid scores, center-to-edge box decode,
    per-class greedy NMS, then a per-image cap sorted by descending score."""
    from .model import STRIDE
    stride = stride or STRIDE
    scores_all = torch.sigmoid(preds.logits.detach()).cpu().numpy()   # [B, L, C]
    deltas_all = preds.deltas.detach().cpu().numpy()                  # [B, L, 4]
    loc = preds.locations.detach().cpu().numpy()                      # [L, 2]
    out: list[Detection] = []
    for b, (image_id, (img_w, img_h)) in enumerate(zip(image_ids, image_sizes)):
        scores = scores_all[b]
        deltas = deltas_all[b]
        x0 = loc[:, 0] - np.maximum(deltas[:, 0], 0.0) * stride
        y0 = loc[:, 1] - np.maximum(deltas[:, 1], 0.0) * stride
        x1 = loc[:, 0] + np.maximum(deltas[:, 2], 0.0) * stride
        y1 = loc[:, 1] + np.maximum(deltas[:, 3], 0.0) * stride
        boxes = np.stack([np.clip(x0, 0, img_w), np.clip(y0, 0, img_h),
                          np.clip(x1, 0, img_w), np.clip(y1, 0, img_h)], axis=1)
        valid_box = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        survivors: list[tuple[float, int, int]] = []   # (score, loc, class col)
        for col in range(scores.shape[1]):
            mask = (scores[:, col] >= score_thresh) & valid_box
            idx = np.nonzero(mask)[0]
            if idx.size == 0:
                continue
            keep = greedy_nms(boxes[idx], scores[idx, col], iou_thresh)
            survivors.extend((float(scores[idx[k], col]), int(idx[k]), col) for k in keep)
        survivors.sort(key=lambda t: (-t[0], t[1], t[2]))
        for score, loc_i, col in survivors[:max_dets_per_image]:
            bx0, by0, bx1, by1 = boxes[loc_i]
            out.append(Detection(image_id=image_id,
                                 bbox=(float(bx0), float(by0),
                                       float(bx1 - bx0), float(by1 - by0)),
                                 category_id=int(class_ids[col]), score=score))
    return out
