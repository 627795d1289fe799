"""Detection evaluation: greedy IoU matching, 101-point interpolated AP
averaged over IoU thresholds 0.50:0.05:0.95, rare/common/frequent bins, the
fixed per-class-cap protocol variant, and multi-seed aggregation.

Rarity bins come from TRAIN-split category statistics: a class is "rare"
because it is scarce in training, regardless of how often it shows up in the
evaluated split.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetIndex
from .detector.postprocess import Detection
from .errors import EvaluationError
from .sampling import CategoryStats

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = 101
STANDARD_PER_IMAGE_CAP = 300
FIXED_PER_CLASS_CAP = 10_000


@dataclass
class EvalReport:
    map_box: float
    ap_rare: float | None
    ap_common: float | None
    ap_frequent: float | None
    per_class_ap: dict[int, float]
    protocol: str
    seeds: list[int] = field(default_factory=list)
    aggregate: dict[str, dict[str, float]] | None = None

    def metric(self, name: str) -> float | None:
        return {"map_box": self.map_box, "ap_rare": self.ap_rare,
                "ap_common": self.ap_common, "ap_frequent": self.ap_frequent}[name]

    def to_document(self) -> dict:
        return {
            "map_box": self.map_box,
            "ap_rare": self.ap_rare,
            "ap_common": self.ap_common,
            "ap_frequent": self.ap_frequent,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "protocol": self.protocol,
            "seeds": list(self.seeds),
            "aggregate": self.aggregate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        rows = [f"{'metric':<12}{'value':>10}"]
        for name in ("map_box", "ap_rare", "ap_common", "ap_frequent"):
            v = self.metric(name)
            rows.append(f"{name:<12}{v:>10.4f}" if v is not None else f"{name:<12}{'n/a':>10}")
        return "\n".join(rows)


def iou(a: tuple[float, float, float, float],
        b: tuple[float, float, float, float]) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def match_detections(dets: list[Detection], gts: list, ignore_regions: list,
                     iou_thresh: float) -> list[str]:
    """Label each detection TP / FP / ignored (dets must be sorted by
    descending score for one class of one image).

    Greedy: a detection takes the highest-IoU unmatched ground truth at or
    above the threshold; each ground truth matches at most once. An unmatched
    detection overlapping an ignore region at or above the threshold is
    ignored rather than counted as a false positive.
    """
    gt_boxes = [g.bbox if hasattr(g, "bbox") else tuple(g) for g in gts]
    ignore_boxes = [g.bbox if hasattr(g, "bbox") else tuple(g) for g in ignore_regions]
    matched = [False] * len(gt_boxes)
    labels: list[str] = []
    for det in dets:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes):
            if matched[j]:
                continue
            v = iou(det.bbox, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[best_j] = True
            labels.append("tp")
            continue
        if any(iou(det.bbox, ig) >= iou_thresh for ig in ignore_boxes):
            labels.append("ignored")
        else:
            labels.append("fp")
    return labels


def average_precision(tp_fp_sequence: list[bool], num_gt: int) -> float:
    """101-point interpolated AP of one TP/FP sequence ordered by descending
    score. Classes without ground truth are the caller's concern (excluded
    from means, never scored 0)."""
    if num_gt == 0:
        raise EvaluationError("AP undefined for num_gt = 0; exclude the class")
    if not tp_fp_sequence:
        return 0.0
    flags = np.asarray(tp_fp_sequence, dtype=bool)
    tp_cum = np.cumsum(flags)
    precision = tp_cum / np.arange(1, len(flags) + 1)
    recall = tp_cum / num_gt
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, RECALL_POINTS)
    idx = np.searchsorted(recall, points, side="left")
    sampled = np.where(idx < len(flags), envelope[np.minimum(idx, len(flags) - 1)], 0.0)
    return float(sampled.mean())


def _apply_protocol_caps(dets: list[Detection], protocol: str,
                         standard_cap: int, fixed_cap: int) -> list[Detection]:
    if protocol == "standard":
        per_image: dict[int, list[Detection]] = defaultdict(list)
        for d in dets:
            per_image[d.image_id].append(d)
        out: list[Detection] = []
        for image_id in sorted(per_image):
            ranked = sorted(per_image[image_id], key=lambda d: -d.score)
            out.extend(ranked[:standard_cap])
        return out
    if protocol == "fixed":
        per_class: dict[int, list[Detection]] = defaultdict(list)
        for d in dets:
            per_class[d.category_id].append(d)
        out = []
        for cid in sorted(per_class):
            ranked = sorted(per_class[cid], key=lambda d: -d.score)
            out.extend(ranked[:fixed_cap])
        return out
    raise EvaluationError(f"unknown protocol {protocol!r}")


def bins_from_stats(train_stats: list[CategoryStats]) -> dict[int, str]:
    return {s.category_id: s.frequency_bin for s in train_stats}


def evaluate(dets: list[Detection], val_ds: DatasetIndex,
             train_stats: list[CategoryStats], protocol: str = "standard",
             iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS,
             include_missing_classes: bool = False,
             standard_cap: int = STANDARD_PER_IMAGE_CAP,
             fixed_cap: int = FIXED_PER_CLASS_CAP,
             seed: int | None = None) -> EvalReport:
    """Score detections against a labeled split.

    Per class: detections are pooled across images, matched greedily per
    image at each IoU threshold, and the 101-point APs are averaged over the
    thresholds. mAP is the unweighted mean over classes with ground truth
    (``include_missing_classes`` scores absent classes 0 instead). The
    standard protocol caps detections at 300 per image; the fixed protocol
    removes that cap and keeps the top 10000 per class over the whole split.
    """
    known_images = {im.id for im in val_ds.images}
    for d in dets:
        if d.image_id not in known_images:
            raise EvaluationError(f"detection references unknown image {d.image_id}")
    dets = _apply_protocol_caps(dets, protocol, standard_cap, fixed_cap)

    gts_by_class_image: dict[tuple[int, int], list] = defaultdict(list)
    ignores_by_class_image: dict[tuple[int, int], list] = defaultdict(list)
    num_gt: dict[int, int] = defaultdict(int)
    for ann in val_ds.annotations:
        key = (ann.category_id, ann.image_id)
        if ann.ignore:
            ignores_by_class_image[key].append(ann)
        else:
            gts_by_class_image[key].append(ann)
            num_gt[ann.category_id] += 1

    dets_by_class: dict[int, list[Detection]] = defaultdict(list)
    for d in dets:
        dets_by_class[d.category_id].append(d)

    per_class_ap: dict[int, float] = {}
    for cid in val_ds.category_ids:
        if num_gt[cid] == 0:
            if include_missing_classes and dets_by_class.get(cid):
                per_class_ap[cid] = 0.0
            continue
        class_dets = sorted(dets_by_class.get(cid, ()),
                            key=lambda d: (-d.score, d.image_id))
        ap_per_thresh = []
        for thresh in iou_thresholds:
            by_image: dict[int, list[Detection]] = defaultdict(list)
            for d in class_dets:
                by_image[d.image_id].append(d)
            label_of: dict[int, str] = {}
            for image_id, img_dets in by_image.items():
                labels = match_detections(
                    img_dets, gts_by_class_image.get((cid, image_id), ()),
                    ignores_by_class_image.get((cid, image_id), ()), thresh)
                for d, lab in zip(img_dets, labels):
                    label_of[id(d)] = lab
            seq = [label_of[id(d)] == "tp" for d in class_dets
                   if label_of[id(d)] != "ignored"]
            ap_per_thresh.append(average_precision(seq, num_gt[cid]))
        per_class_ap[cid] = float(np.mean(ap_per_thresh))

    bins = bins_from_stats(train_stats)
    def bin_mean(name: str) -> float | None:
        values = [ap for cid, ap in per_class_ap.items() if bins.get(cid) == name]
        return float(np.mean(values)) if values else None

    map_box = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return EvalReport(
        map_box=map_box, ap_rare=bin_mean("rare"), ap_common=bin_mean("common"),
        ap_frequent=bin_mean("frequent"), per_class_ap=per_class_ap,
        protocol=protocol, seeds=[seed] if seed is not None else [])


def aggregate_seeds(reports: list[EvalReport]) -> EvalReport:
    """Mean / sample-std across seed runs (std 0 for a single report)."""
    if not reports:
        raise EvaluationError("nothing to aggregate")
    protocols = {r.protocol for r in reports}
    if len(protocols) != 1:
        raise EvaluationError(f"protocol mismatch across reports: {sorted(protocols)}")

    def stats(values: list[float]) -> tuple[float, float]:
        mean = float(np.mean(values))
        if len(values) < 2 or len(set(values)) == 1:
            return (values[0] if len(set(values)) == 1 else mean), 0.0
        return mean, float(np.std(values, ddof=1))

    aggregate: dict[str, dict[str, float]] = {}
    headline: dict[str, float | None] = {}
    for name in ("map_box", "ap_rare", "ap_common", "ap_frequent"):
        values = [r.metric(name) for r in reports if r.metric(name) is not None]
        if values:
            mean, std = stats(values)
            aggregate[name] = {"mean": mean, "std": std}
            headline[name] = mean
        else:
            headline[name] = None
    class_ids = sorted({cid for r in reports for cid in r.per_class_ap})
    per_class = {}
    for cid in class_ids:
        values = [r.per_class_ap[cid] for r in reports if cid in r.per_class_ap]
        per_class[cid] = float(np.mean(values))
    seeds = [s for r in reports for s in r.seeds]
    return EvalReport(map_box=headline["map_box"] if headline["map_box"] is not None else 0.0,
                      ap_rare=headline["ap_rare"], ap_common=headline["ap_common"],
                      ap_frequent=headline["ap_frequent"], per_class_ap=per_class,
                      protocol=reports[0].protocol, seeds=seeds, aggregate=aggregate)


# --- COCO-results documents -------------------------------------------------------


def detections_to_document(dets: list[Detection]) -> list[dict]:
    return [{"image_id": d.image_id, "category_id": d.category_id,
             "bbox": [float(v) for v in d.bbox], "score": float(d.score)}
            for d in dets]


def detections_from_document(doc: list[dict]) -> list[Detection]:
    try:
        return [Detection(image_id=int(r["image_id"]),
                          bbox=tuple(float(v) for v in r["bbox"]),
                          category_id=int(r["category_id"]),
                          score=float(r["score"])) for r in doc]
    except (KeyError, TypeError, ValueError) as exc:
        raise EvaluationError(f"bad detections document: {exc}") from exc


def save_detections(dets: list[Detection], path) -> None:
    with open(path, "w") as f:
        json.dump(detections_to_document(dets), f, separators=(",", ":"))
        f.write("\n")


def load_detections(path) -> list[Detection]:
    with open(path) as f:
        return detections_from_document(json.load(f))
