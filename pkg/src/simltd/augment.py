"""Weak/strong augmentation views, simple copy-paste, and rare-instance paste.

Every op is a pure function of recorded parameters, so an op_log replays the
augmented output bit-exactly. Weak views apply resize/flip plus photometric
ops (boxes touched only by resize/flip); strong views add an affine
(translate/shear/rotate about the image center) and cutout, mapping each box
to the axis-aligned hull of its transformed corners.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

from .dataset import InstanceAnnotation
from .errors import AugmentationError
from .sampling import BankEntry

MIN_IMAGE_SIDE = 8
SCP_OCCLUSION_THRESH = 0.7     # dst boxes covered beyond this become ignore regions
GEOMETRIC_DROP_VISIBILITY = 0.25  # boxes with less of their hull visible are dropped
PASTE_MAX_IOU = 0.3
CUTOUT_FILL = 127

PHOTOMETRIC_OPS = ("autocontrast", "equalize", "solarize", "color_jitter",
                   "contrast", "brightness", "sharpness", "posterize")

# desk-scale analog of the short-edge interval used on full-size benchmarks,
# rescaled proportionally to 128-px images
DESK_RESIZE_RANGE = (96, 160)


@dataclass(frozen=True)
class AugPolicy:
    view: str                                   # weak_supervised | strong_unlabeled
    resize_short_edge_range: tuple[int, int] = DESK_RESIZE_RANGE
    hflip_prob: float = 0.5
    photometric_ops: tuple[str, ...] = PHOTOMETRIC_OPS
    photometric_prob: float = 0.3
    translation_range: tuple[float, float] = (0.0, 0.0)
    shear_range: tuple[float, float] = (0.0, 0.0)       # degrees
    rotation_range: tuple[float, float] = (0.0, 0.0)    # degrees
    cutout_count_range: tuple[int, int] = (0, 0)
    cutout_size_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.view not in ("weak_supervised", "strong_unlabeled"):
            raise AugmentationError(f"unknown view {self.view!r}")
        unknown = set(self.photometric_ops) - set(PHOTOMETRIC_OPS)
        if unknown:
            raise AugmentationError(f"unknown photometric ops {sorted(unknown)}")
        if self.view == "weak_supervised":
            geo = (*self.translation_range, *self.shear_range, *self.rotation_range,
                   *self.cutout_count_range, *self.cutout_size_range)
            if any(v != 0 for v in geo):
                raise AugmentationError(
                    "weak view must keep translation/shear/rotation/cutout disabled")


def weak_policy(**overrides) -> AugPolicy:
    return AugPolicy(view="weak_supervised", **overrides)


def strong_policy(**overrides) -> AugPolicy:
    defaults = dict(
        translation_range=(-0.1, 0.1),
        shear_range=(-30.0, 30.0),
        rotation_range=(-30.0, 30.0),
        cutout_count_range=(1, 5),
        cutout_size_range=(0.0, 0.2),
    )
    defaults.update(overrides)
    return AugPolicy(view="strong_unlabeled", **defaults)


@dataclass
class AugmentedSample:
    pixels: np.ndarray
    annotations: tuple[InstanceAnnotation, ...]
    op_log: list = field(default_factory=list)

    @property
    def size(self) -> tuple[int, int]:          # (W, H)
        return self.pixels.shape[1], self.pixels.shape[0]


def make_sample(pixels: np.ndarray,
                annotations: Sequence[InstanceAnnotation] = ()) -> AugmentedSample:
    return AugmentedSample(pixels=np.asarray(pixels), annotations=tuple(annotations))


# --- primitive ops (pure functions of their recorded parameters) -------------


def _clip_box(x0, y0, x1, y1, w, h):
    return max(0.0, x0), max(0.0, y0), min(float(w), x1), min(float(h), y1)


def _op_resize(sample: AugmentedSample, width: int, height: int) -> AugmentedSample:
    w0, h0 = sample.size
    img = Image.fromarray(sample.pixels).resize((width, height), Image.BILINEAR)
    sx, sy = width / w0, height / h0
    anns = tuple(
        replace(a, bbox=(a.bbox[0] * sx, a.bbox[1] * sy, a.bbox[2] * sx, a.bbox[3] * sy),
                area=a.area * sx * sy)
        for a in sample.annotations)
    return AugmentedSample(np.asarray(img), anns, sample.op_log)


def _op_hflip(sample: AugmentedSample) -> AugmentedSample:
    w, _ = sample.size
    anns = tuple(
        replace(a, bbox=(w - a.bbox[0] - a.bbox[2], a.bbox[1], a.bbox[2], a.bbox[3]))
        for a in sample.annotations)
    return AugmentedSample(sample.pixels[:, ::-1].copy(), anns, sample.op_log)


def _op_photometric(sample: AugmentedSample, op: str, params: dict) -> AugmentedSample:
    img = Image.fromarray(sample.pixels)
    if op == "autocontrast":
        img = ImageOps.autocontrast(img)
    elif op == "equalize":
        img = ImageOps.equalize(img)
    elif op == "solarize":
        img = ImageOps.solarize(img, threshold=params["threshold"])
    elif op == "color_jitter":
        img = ImageEnhance.Color(img).enhance(params["factor"])
    elif op == "contrast":
        img = ImageEnhance.Contrast(img).enhance(params["factor"])
    elif op == "brightness":
        img = ImageEnhance.Brightness(img).enhance(params["factor"])
    elif op == "sharpness":
        img = ImageEnhance.Sharpness(img).enhance(params["factor"])
    elif op == "posterize":
        img = ImageOps.posterize(img, bits=params["bits"])
    else:
        raise AugmentationError(f"unknown photometric op {op!r}")
    return AugmentedSample(np.asarray(img), sample.annotations, sample.op_log)


def affine_matrix(width: int, height: int, tx: float, ty: float,
                  shear_x_deg: float, shear_y_deg: float,
                  rotation_deg: float) -> np.ndarray:
    """Forward 3x3 matrix: shear then rotate about the image center, then shift."""
    cx, cy = width / 2.0, height / 2.0
    th = math.radians(rotation_deg)
    rot = np.array([[math.cos(th), -math.sin(th), 0.0],
                    [math.sin(th), math.cos(th), 0.0],
                    [0.0, 0.0, 1.0]])
    shear = np.array([[1.0, math.tan(math.radians(shear_x_deg)), 0.0],
                      [math.tan(math.radians(shear_y_deg)), 1.0, 0.0],
                      [0.0, 0.0, 1.0]])
    to_center = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, cx + tx], [0.0, 1.0, cy + ty], [0.0, 0.0, 1.0]])
    return back @ rot @ shear @ to_center


def map_box_through_affine(bbox, matrix: np.ndarray, width: int, height: int):
    """Axis-aligned hull of the four transformed corners, clipped to the image.

    Returns (clipped bbox or None, visible fraction of the unclipped hull).
    """
    x, y, w, h = bbox
    corners = np.array([[x, y, 1.0], [x + w, y, 1.0],
                        [x, y + h, 1.0], [x + w, y + h, 1.0]])
    tc = corners @ np.asarray(matrix).T
    hx0, hy0 = tc[:, 0].min(), tc[:, 1].min()
    hx1, hy1 = tc[:, 0].max(), tc[:, 1].max()
    hull_area = (hx1 - hx0) * (hy1 - hy0)
    cx0, cy0, cx1, cy1 = _clip_box(hx0, hy0, hx1, hy1, width, height)
    if cx1 <= cx0 or cy1 <= cy0 or hull_area <= 0:
        return None, 0.0
    visible = ((cx1 - cx0) * (cy1 - cy0)) / hull_area
    return (cx0, cy0, cx1 - cx0, cy1 - cy0), visible


def _op_affine(sample: AugmentedSample, coeffs: list[float]) -> AugmentedSample:
    w, h = sample.size
    matrix = np.array([coeffs[0:3], coeffs[3:6], [0.0, 0.0, 1.0]])
    inv = np.linalg.inv(matrix)
    img = Image.fromarray(sample.pixels).transform(
        (w, h), Image.AFFINE,
        data=(inv[0, 0], inv[0, 1], inv[0, 2], inv[1, 0], inv[1, 1], inv[1, 2]),
        resample=Image.BILINEAR, fillcolor=(0, 0, 0))
    anns = []
    for a in sample.annotations:
        mapped, visible = map_box_through_affine(a.bbox, matrix, w, h)
        if mapped is None or visible < GEOMETRIC_DROP_VISIBILITY:
            continue
        anns.append(replace(a, bbox=mapped))
    return AugmentedSample(np.asarray(img), tuple(anns), sample.op_log)


def _op_cutout(sample: AugmentedSample, rects: list[list[int]]) -> AugmentedSample:
    pixels = sample.pixels.copy()
    for x, y, w, h in rects:
        pixels[y:y + h, x:x + w] = CUTOUT_FILL
    return AugmentedSample(pixels, sample.annotations, sample.op_log)


def _next_ann_id(annotations) -> int:
    return max((a.id for a in annotations), default=0) + 1


def _rect_cover_fraction(bbox, rects) -> float:
    """Fraction of an axis-aligned box covered by a union of rectangles."""
    x, y, w, h = bbox
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = int(math.ceil(x + w)), int(math.ceil(y + h))
    if x1 <= x0 or y1 <= y0:
        return 1.0
    grid = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    for rx, ry, rw, rh in rects:
        ix0, iy0 = max(x0, rx), max(y0, ry)
        ix1, iy1 = min(x1, rx + rw), min(y1, ry + rh)
        if ix1 > ix0 and iy1 > iy0:
            grid[iy0 - y0:iy1 - y0, ix0 - x0:ix1 - x0] = True
    return float(grid.mean())


def _op_copy_paste(dst: AugmentedSample, events: list[dict],
                   src: AugmentedSample) -> AugmentedSample:
    pixels = dst.pixels.copy()
    src_by_id = {a.id: a for a in src.annotations}
    annotations = list(dst.annotations)
    paste_order: list[tuple[int, tuple[int, int, int, int]]] = []  # (ann_count_before, rect)
    for ev in events:
        ann = src_by_id[ev["src_annotation_id"]]
        sx, sy = int(round(ann.bbox[0])), int(round(ann.bbox[1]))
        sw, sh = int(round(ann.bbox[2])), int(round(ann.bbox[3]))
        patch = src.pixels[sy:sy + sh, sx:sx + sw]
        x, y = ev["x"], ev["y"]
        ph, pw = patch.shape[:2]
        pixels[y:y + ph, x:x + pw] = patch
        paste_order.append((len(annotations), (x, y, pw, ph)))
        annotations.append(InstanceAnnotation(
            id=_next_ann_id(annotations), image_id=ann.image_id,
            category_id=ann.category_id, bbox=(float(x), float(y), float(pw), float(ph)),
            area=float(pw * ph), source="pasted"))
    out = []
    for idx, ann in enumerate(annotations):
        later = [rect for born, rect in paste_order if born > idx]
        if (not ann.ignore and later
                and _rect_cover_fraction(ann.bbox, later) > SCP_OCCLUSION_THRESH):
            ann = replace(ann, ignore=True)
        out.append(ann)
    return AugmentedSample(pixels, tuple(out), dst.op_log)


def _op_paste_rare(sample: AugmentedSample, events: list[dict],
                   bank: list[BankEntry]) -> AugmentedSample:
    pixels = sample.pixels.copy()
    for ev in events:
        patch = bank[ev["bank_index"]].patch
        if ev.get("resized_to"):
            pw, ph = ev["resized_to"]
            patch = np.asarray(Image.fromarray(patch).resize((pw, ph), Image.BILINEAR))
        x, y = ev["x"], ev["y"]
        pixels[y:y + patch.shape[0], x:x + patch.shape[1]] = patch
    return AugmentedSample(pixels, sample.annotations, sample.op_log)


_OP_TABLE = {
    "resize": lambda s, p, **k: _op_resize(s, p["width"], p["height"]),
    "hflip": lambda s, p, **k: _op_hflip(s),
    "affine": lambda s, p, **k: _op_affine(s, p["coeffs"]),
    "cutout": lambda s, p, **k: _op_cutout(s, p["rects"]),
    "copy_paste": lambda s, p, src=None, **k: _op_copy_paste(s, p["events"], src),
    "paste_rare": lambda s, p, bank=None, **k: _op_paste_rare(s, p["events"], bank),
}


def _apply(sample: AugmentedSample, name: str, params: dict, **ctx) -> AugmentedSample:
    if name in _OP_TABLE:
        out = _OP_TABLE[name](sample, params, **ctx)
    elif name in PHOTOMETRIC_OPS:
        out = _op_photometric(sample, name, params)
    else:
        raise AugmentationError(f"unknown op {name!r}")
    out.op_log = sample.op_log + [(name, params)]
    return out


def replay(sample: AugmentedSample, op_log: list, src: AugmentedSample | None = None,
           bank: list[BankEntry] | None = None) -> AugmentedSample:
    """Re-apply a recorded op_log to the original sample (bit-exact)."""
    out = AugmentedSample(sample.pixels, sample.annotations, [])
    for name, params in op_log:
        out = _apply(out, name, params, src=src, bank=bank)
    return out


# --- policy-driven pipelines ---------------------------------------------------


def _check_image(sample: AugmentedSample):
    w, h = sample.size
    if w < MIN_IMAGE_SIDE or h < MIN_IMAGE_SIDE:
        raise AugmentationError(f"degenerate image {w}x{h} (min side {MIN_IMAGE_SIDE})")


def apply_weak(sample: AugmentedSample, policy: AugPolicy,
               rng: np.random.Generator,
               resize_target: int | None = None) -> AugmentedSample:
    """Short-edge resize, horizontal flip, and per-op-probability photometrics.

    ``resize_target`` overrides the sampled short edge so that every image in
    a batch can share one resolution.
    """
    _check_image(sample)
    out = AugmentedSample(sample.pixels, sample.annotations, list(sample.op_log))
    lo, hi = policy.resize_short_edge_range
    target = resize_target if resize_target is not None else int(rng.integers(lo, hi + 1))
    w, h = out.size
    short = min(w, h)
    if target != short:
        scale = target / short
        new_w, new_h = int(round(w * scale)), int(round(h * scale))
        out = _apply(out, "resize", {"width": new_w, "height": new_h})
    if rng.random() < policy.hflip_prob:
        out = _apply(out, "hflip", {})
    for op in policy.photometric_ops:
        if rng.random() >= policy.photometric_prob:
            continue
        if op == "solarize":
            params = {"threshold": int(rng.integers(64, 193))}
        elif op in ("color_jitter", "contrast", "brightness", "sharpness"):
            params = {"factor": float(rng.uniform(0.6, 1.4))}
        elif op == "posterize":
            params = {"bits": int(rng.integers(4, 8))}
        else:
            params = {}
        out = _apply(out, op, params)
    return out


def strengthen(sample: AugmentedSample, policy: AugPolicy,
               rng: np.random.Generator) -> AugmentedSample:
    """The strong-view tail: affine (translate/shear/rotate) plus cutout."""
    if policy.view != "strong_unlabeled":
        raise AugmentationError("strong ops require a strong_unlabeled policy")
    _check_image(sample)
    out = AugmentedSample(sample.pixels, sample.annotations, list(sample.op_log))
    w, h = out.size
    tx = float(rng.uniform(*policy.translation_range)) * w
    ty = float(rng.uniform(*policy.translation_range)) * h
    shear_x = float(rng.uniform(*policy.shear_range))
    shear_y = float(rng.uniform(*policy.shear_range))
    rot = float(rng.uniform(*policy.rotation_range))
    if any(v != 0.0 for v in (tx, ty, shear_x, shear_y, rot)):
        m = affine_matrix(w, h, tx, ty, shear_x, shear_y, rot)
        out = _apply(out, "affine", {"coeffs": [*m[0].tolist(), *m[1].tolist()]})
    n = int(rng.integers(policy.cutout_count_range[0],
                         policy.cutout_count_range[1] + 1))
    rects = []
    for _ in range(n):
        cw = int(rng.uniform(*policy.cutout_size_range) * w)
        ch = int(rng.uniform(*policy.cutout_size_range) * h)
        if cw < 1 or ch < 1:
            continue
        x = int(rng.integers(0, max(1, w - cw)))
        y = int(rng.integers(0, max(1, h - ch)))
        rects.append([x, y, cw, ch])
    if rects:
        out = _apply(out, "cutout", {"rects": rects})
    return out


def apply_strong(sample: AugmentedSample, policy: AugPolicy,
                 rng: np.random.Generator,
                 resize_target: int | None = None) -> AugmentedSample:
    """Weak pipeline followed by the strong geometric tail."""
    return strengthen(apply_weak(sample, policy, rng, resize_target), policy, rng)


def simple_copy_paste(dst: AugmentedSample, src: AugmentedSample,
                      rng: np.random.Generator,
                      select_prob: float = 0.5) -> AugmentedSample:
    """Paste a random subset of src instances into dst at random positions.

    Pasted pixels replace dst pixels exactly (no blending). dst annotations
    occluded beyond the 70% threshold by pastes become ignore regions.
    """
    w, h = dst.size
    events = []
    for ann in src.annotations:
        if ann.ignore or rng.random() >= select_prob:
            continue
        pw, ph = int(round(ann.bbox[2])), int(round(ann.bbox[3]))
        if pw < 1 or ph < 1 or pw >= w or ph >= h:
            continue
        events.append({
            "src_annotation_id": ann.id,
            "x": int(rng.integers(0, w - pw + 1)),
            "y": int(rng.integers(0, h - ph + 1)),
        })
    if not events:
        return AugmentedSample(dst.pixels, dst.annotations, list(dst.op_log))
    out = AugmentedSample(dst.pixels, dst.annotations, list(dst.op_log))
    return _apply(out, "copy_paste", {"events": events}, src=src)


def paste_rare_instances(pixels: np.ndarray, bank: list[BankEntry],
                         rng: np.random.Generator,
                         count_range: tuple[int, int]) -> AugmentedSample:
    """Paste sampled bank crops onto an unlabeled image at scattered positions.

    The true paste boxes live only in the op_log (diagnostics); no annotations
    are exported, so supervision can flow exclusively through teacher
    pseudo-labels.
    """
    if not bank:
        raise AugmentationError("rare-instance bank is empty")
    sample = make_sample(pixels)
    _check_image(sample)
    w, h = sample.size
    n = int(rng.integers(count_range[0], count_range[1] + 1))
    if n == 0:
        return AugmentedSample(sample.pixels, (), [])
    indices = rng.choice(len(bank), size=n, replace=n > len(bank))
    events = []
    placed: list[tuple[float, float, float, float]] = []

    def iou(a, b):
        ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
        iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
        inter = ix * iy
        union = a[2] * a[3] + b[2] * b[3] - inter
        return inter / union if union else 0.0

    for idx in indices:
        patch = bank[int(idx)].patch
        ph, pw = patch.shape[:2]
        resized_to = None
        if pw >= w or ph >= h:  # oversized crops are scaled down to fit
            scale = min((w - 1) / pw, (h - 1) / ph)
            pw, ph = max(1, int(pw * scale)), max(1, int(ph * scale))
            resized_to = [pw, ph]
        best = None
        for _ in range(30):
            x = int(rng.integers(0, w - pw + 1))
            y = int(rng.integers(0, h - ph + 1))
            rect = (float(x), float(y), float(pw), float(ph))
            worst = max((iou(rect, p) for p in placed), default=0.0)
            if best is None or worst < best[0]:
                best = (worst, x, y)
            if worst <= PASTE_MAX_IOU:
                break
        _, x, y = best
        placed.append((float(x), float(y), float(pw), float(ph)))
        ev = {"bank_index": int(idx), "x": x, "y": y,
              "category_id": bank[int(idx)].category_id,
              "w": pw, "h": ph}
        if resized_to:
            ev["resized_to"] = resized_to
        events.append(ev)
    out = AugmentedSample(sample.pixels, (), [])
    return _apply(out, "paste_rare", {"events": events}, bank=bank)


# --- box geometry through recorded logs ----------------------------------------


GEOMETRIC_OPS = ("resize", "hflip", "affine")


def map_boxes_through_ops(boxes: Sequence[tuple[float, float, float, float]],
                          op_log: list,
                          sizes: list[tuple[int, int]]) -> list[tuple | None]:
    """Map raw (x, y, w, h) boxes through the geometric entries of an op_log.

    ``sizes`` must list the (W, H) the sample had *before* each op (as recorded
    by :func:`op_sizes`). Boxes dropped by the visibility rule map to None.
    """
    out: list[tuple | None] = [tuple(b) for b in boxes]
    for (name, params), (w, h) in zip(op_log, sizes):
        for i, box in enumerate(out):
            if box is None:
                continue
            if name == "resize":
                sx, sy = params["width"] / w, params["height"] / h
                out[i] = (box[0] * sx, box[1] * sy, box[2] * sx, box[3] * sy)
            elif name == "hflip":
                out[i] = (w - box[0] - box[2], box[1], box[2], box[3])
            elif name == "affine":
                matrix = np.array([params["coeffs"][0:3], params["coeffs"][3:6],
                                   [0.0, 0.0, 1.0]])
                mapped, visible = map_box_through_affine(box, matrix, w, h)
                out[i] = (mapped if mapped is not None
                          and visible >= GEOMETRIC_DROP_VISIBILITY else None)
    return out


def op_sizes(initial_size: tuple[int, int], op_log: list) -> list[tuple[int, int]]:
    """(W, H) before each logged op (only resize changes it)."""
    sizes = []
    w, h = initial_size
    for name, params in op_log:
        sizes.append((w, h))
        if name == "resize":
            w, h = params["width"], params["height"]
    return sizes


def invert_boxes_through_ops(boxes: Sequence[tuple[float, float, float, float]],
                             op_log: list,
                             sizes: list[tuple[int, int]]) -> list[tuple]:
    """Inverse mapping for rigid logs (resize/hflip only); affine logs raise."""
    out = [tuple(b) for b in boxes]
    for (name, params), (w, h) in reversed(list(zip(op_log, sizes))):
        for i, box in enumerate(out):
            if name == "resize":
                sx, sy = params["width"] / w, params["height"] / h
                out[i] = (box[0] / sx, box[1] / sy, box[2] / sx, box[3] / sy)
            elif name == "hflip":
                out[i] = (w - box[0] - box[2], box[1], box[2], box[3])
            elif name == "affine":
                raise AugmentationError("affine logs are not invertible")
    return out
