"""LT-Shapes: a desk-scale synthetic long-tailed detection benchmark.

Each class is a distinct (shape, hue) combination; class frequencies follow a
Zipf law p(c) proportional to c**(-s). Images render a handful of crisp
shapes on a noisy dark background, annotated with analytically computed tight
boxes, so the whole training pipeline runs in minutes.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset import DatasetIndex, ImageRecord, InstanceAnnotation, save_dataset
from .errors import DatasetError

SHAPES = ("circle", "square", "triangle", "cross", "ring")
MAX_HUES = 10          # beyond this, hues stop being visually distinct
RING_INNER_RATIO = 0.55
MAX_PLACEMENT_IOU = 0.3
PLACEMENT_ATTEMPTS = 30
BACKGROUND = (40, 40, 40)
BACKGROUND_NOISE = 12

# Desk benchmark defaults: a head/tail split resembling the LVIS shape while
# training in minutes.
DESK_NUM_CLASSES = 20
DESK_ZIPF_S = 1.5
DESK_TRAIN_IMAGES = 1200
DESK_VAL_IMAGES = 300
DESK_UNLABELED = 2000
DESK_IMAGE_SIZE = (128, 128)


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = DESK_NUM_CLASSES
    zipf_s: float = DESK_ZIPF_S
    num_images: int = DESK_TRAIN_IMAGES
    val_images: int = DESK_VAL_IMAGES
    image_size: tuple[int, int] = DESK_IMAGE_SIZE   # (H, W)
    objects_per_image: tuple[int, int] = (1, 6)
    object_size_range: tuple[int, int] = (24, 56)
    unlabeled_count: int = DESK_UNLABELED
    seed: int = 7

    def __post_init__(self):
        if self.num_classes < 2:
            raise DatasetError("need at least 2 classes")
        if self.num_images < 1:
            raise DatasetError("need at least 1 training image")
        if self.zipf_s < 0:
            raise DatasetError("Zipf exponent must be >= 0")
        num_hues = math.ceil(self.num_classes / len(SHAPES))
        if num_hues > MAX_HUES:
            raise DatasetError(
                f"{self.num_classes} classes exceed the {len(SHAPES) * MAX_HUES} "
                "distinct shape x hue combinations")
        h, w = self.image_size
        if self.object_size_range[1] + 4 > min(h, w):
            raise DatasetError(
                f"object size range {self.object_size_range} does not fit in "
                f"image size {self.image_size}")
        lo, hi = self.objects_per_image
        if not (0 <= lo <= hi):
            raise DatasetError(f"bad objects_per_image range {self.objects_per_image}")


def zipf_pmf(num_classes: int, s: float) -> np.ndarray:
    """p(c) = c**(-s) / sum over classes, for ranks c = 1..num_classes."""
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    weights = ranks ** (-s)
    return weights / weights.sum()


def class_palette(num_classes: int) -> list[tuple[str, tuple[int, int, int]]]:
    """Class id c (1-based) -> (shape, RGB color). Adjacent ids differ in shape."""
    num_hues = math.ceil(num_classes / len(SHAPES))
    colors = []
    for i in range(num_hues):
        r, g, b = colorsys.hsv_to_rgb(i / num_hues, 0.85, 0.95)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    combos = []
    for c in range(num_classes):
        combos.append((SHAPES[c % len(SHAPES)], colors[c // len(SHAPES)]))
    return combos


def _rotate(points: np.ndarray, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return points @ np.array([[c, -s], [s, c]]).T


def _shape_polygons(shape: str, size: float, theta: float) -> list[np.ndarray]:
    """Vertex lists (centered at the origin) for the polygon-based shapes."""
    half = size / 2.0
    if shape == "square":
        pts = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
        return [_rotate(pts, theta)]
    if shape == "triangle":
        pts = np.array([[0.0, -half],
                        [half * math.sin(math.radians(120)),
                         -half * math.cos(math.radians(120))],
                        [half * math.sin(math.radians(240)),
                         -half * math.cos(math.radians(240))]])
        return [_rotate(pts, theta)]
    if shape == "cross":
        arm = size / 3.0
        horiz = np.array([[-half, -arm / 2], [half, -arm / 2],
                          [half, arm / 2], [-half, arm / 2]])
        vert = np.array([[-arm / 2, -half], [arm / 2, -half],
                         [arm / 2, half], [-arm / 2, half]])
        return [_rotate(horiz, theta), _rotate(vert, theta)]
    raise ValueError(f"not a polygon shape: {shape}")


def _render_object(mask_draw: ImageDraw.ImageDraw, shape: str, cx: int, cy: int,
                   size: int, theta: float) -> tuple[int, int, int, int]:
    """Draw the shape on a binary mask; return the analytic tight box (x, y, w, h).

    PIL fills include the boundary pixel, so a primitive spanning columns
    x0..x1 is x1 - x0 + 1 pixels wide.
    """
    if shape in ("circle", "ring"):
        r = size // 2
        mask_draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
        if shape == "ring":
            ri = max(2, int(r * RING_INNER_RATIO))
            mask_draw.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=0)
        return (cx - r, cy - r, 2 * r + 1, 2 * r + 1)
    polys = _shape_polygons(shape, size, theta)
    all_pts = []
    for poly in polys:
        pts = [(int(round(cx + px)), int(round(cy + py))) for px, py in poly]
        mask_draw.polygon(pts, fill=255)
        all_pts.extend(pts)
    xs = [p[0] for p in all_pts]
    ys = [p[1] for p in all_pts]
    return (min(xs), min(ys), max(xs) - min(xs) + 1, max(ys) - min(ys) + 1)


def _boxes_iou(a: tuple[float, float, float, float],
               b: tuple[float, float, float, float]) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def _render_image(spec: SynthSpec, rng: np.random.Generator,
                  collect_masks: bool) -> tuple[np.ndarray, list[dict], list[np.ndarray]]:
    """One image: noisy background plus Zipf-sampled, non-crowded shapes."""
    h, w = spec.image_size
    pmf = zipf_pmf(spec.num_classes, spec.zipf_s)
    palette = class_palette(spec.num_classes)
    canvas = np.clip(
        np.array(BACKGROUND, dtype=np.int16)
        + rng.integers(-BACKGROUND_NOISE, BACKGROUND_NOISE + 1, size=(h, w, 3)),
        0, 255).astype(np.uint8)
    count = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    objects: list[dict] = []
    masks: list[np.ndarray] = []
    placed: list[tuple[float, float, float, float]] = []
    for _ in range(count):
        class_id = int(rng.choice(spec.num_classes, p=pmf)) + 1
        shape, color = palette[class_id - 1]
        size = int(rng.integers(spec.object_size_range[0], spec.object_size_range[1] + 1))
        theta = float(rng.uniform(0, 2 * math.pi)) if shape in ("square", "triangle", "cross") else 0.0
        # The analytic box of a rotated shape never exceeds its diagonal.
        reach = int(math.ceil(size * math.sqrt(2) / 2)) + 2
        if w - reach <= reach or h - reach <= reach:
            continue
        bbox = None
        for _attempt in range(PLACEMENT_ATTEMPTS):
            cx = int(rng.integers(reach, w - reach))
            cy = int(rng.integers(reach, h - reach))
            mask = Image.new("L", (w, h), 0)
            candidate = _render_object(ImageDraw.Draw(mask), shape, cx, cy, size, theta)
            if all(_boxes_iou(candidate, p) <= MAX_PLACEMENT_IOU for p in placed):
                bbox = candidate
                break
        if bbox is None:
            continue
        m = np.asarray(mask) > 0
        canvas[m] = color
        placed.append(bbox)
        objects.append({"category_id": class_id, "bbox": bbox, "area": int(m.sum())})
        if collect_masks:
            masks.append(m)
    return canvas, objects, masks


def _image_rng(spec: SynthSpec, split_code: int, image_id: int) -> np.random.Generator:
    # Per-image seeding keeps generation independent of worker count.
    return np.random.default_rng([spec.seed, split_code, image_id])


def _generate_split(spec: SynthSpec, split_code: int, first_id: int, count: int,
                    keep_annotations: bool, collect_masks: bool = False):
    images, annotations = [], []
    masks_by_ann: dict[int, np.ndarray] = {}
    hidden_counts = np.zeros(spec.num_classes, dtype=np.int64)
    h, w = spec.image_size
    next_ann_id = first_id * 100
    for offset in range(count):
        image_id = first_id + offset
        rng = _image_rng(spec, split_code, image_id)
        canvas, objects, masks = _render_image(spec, rng, collect_masks)
        images.append(ImageRecord(id=image_id, width=w, height=h,
                                  file_name=f"{image_id:08d}.png", pixels=canvas))
        for obj, mask in zip(objects, masks if collect_masks else [None] * len(objects)):
            hidden_counts[obj["category_id"] - 1] += 1
            if keep_annotations:
                ann = InstanceAnnotation(
                    id=next_ann_id, image_id=image_id,
                    category_id=obj["category_id"],
                    bbox=tuple(float(v) for v in obj["bbox"]),
                    area=float(obj["area"]))
                annotations.append(ann)
                if collect_masks:
                    masks_by_ann[next_ann_id] = mask
                next_ann_id += 1
    return images, annotations, hidden_counts, masks_by_ann


def _categories(spec: SynthSpec) -> tuple[tuple[int, str], ...]:
    palette = class_palette(spec.num_classes)
    return tuple((c + 1, f"{palette[c][0]}_{c + 1}") for c in range(spec.num_classes))


def generate_longtail_dataset(
    spec: SynthSpec, with_masks: bool = False
) -> tuple[DatasetIndex, DatasetIndex] | tuple[DatasetIndex, DatasetIndex, dict[int, np.ndarray]]:
    """Render the labeled train and val splits with embedded pixel payloads.

    With ``with_masks`` the per-annotation binary masks of the train split are
    also returned (testing hook for the mask-to-box oracle).
    """
    cats = _categories(spec)
    tr_images, tr_anns, _, tr_masks = _generate_split(
        spec, split_code=0, first_id=1, count=spec.num_images,
        keep_annotations=True, collect_masks=with_masks)
    va_images, va_anns, _, _ = _generate_split(
        spec, split_code=1, first_id=spec.num_images + 1, count=spec.val_images,
        keep_annotations=True)
    train = DatasetIndex(images=tuple(tr_images), annotations=tuple(tr_anns),
                         categories=cats, role="labeled")
    val = DatasetIndex(images=tuple(va_images), annotations=tuple(va_anns),
                       categories=cats, role="labeled")
    if with_masks:
        return train, val, tr_masks
    return train, val


def generate_unlabeled_pool(
    spec: SynthSpec, with_hidden_stats: bool = False
) -> DatasetIndex | tuple[DatasetIndex, np.ndarray]:
    """Render the unlabeled pool: same generative process, no annotations kept.

    The hidden per-class object counts are available as a testing hook; they
    are never serialized with the dataset.
    """
    first_id = 10_000_000
    images, _, hidden, _ = _generate_split(
        spec, split_code=2, first_id=first_id, count=spec.unlabeled_count,
        keep_annotations=False)
    pool = DatasetIndex(images=tuple(images), annotations=(),
                        categories=_categories(spec), role="unlabeled")
    if with_hidden_stats:
        return pool, hidden
    return pool


def write_benchmark(spec: SynthSpec, out_dir: str | Path) -> dict[str, Path]:
    """Generate and persist the full benchmark: images/, three annotation
    documents, and a manifest recording the spec for reproducibility."""
    out = Path(out_dir)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    train, val = generate_longtail_dataset(spec)
    pool = generate_unlabeled_pool(spec)
    for ds in (train, val, pool):
        for rec in ds.images:
            Image.fromarray(rec.pixels).save(images_dir / rec.file_name)
    paths = {}
    for name, ds in (("train", train), ("val", val), ("unlabeled", pool)):
        # Persisted indexes reference files, not embedded arrays.
        stripped = DatasetIndex(
            images=tuple(ImageRecord(id=r.id, width=r.width, height=r.height,
                                     file_name=r.file_name) for r in ds.images),
            annotations=ds.annotations, categories=ds.categories, role=ds.role,
            images_root=images_dir)
        path = out / f"{name}.json"
        save_dataset(stripped, path)
        paths[name] = path
    manifest = {"spec": asdict(spec), "images_dir": str(images_dir)}
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    paths["manifest"] = manifest_path
    paths["images_dir"] = images_dir
    return paths


def make_lvis_shaped_fixture(num_head: int = 866, num_tail: int = 337,
                             m: int = 10) -> DatasetIndex:
    """Annotation-only fixture whose category counts mirror the LVIS split:
    ``num_tail`` classes in at most ``m`` images, ``num_head`` in more."""
    images, annotations = [], []
    next_image, next_ann = 1, 1
    cats = []
    for c in range(1, num_head + num_tail + 1):
        tail = c > num_head
        count = (1 + (c % m)) if tail else (m + 1 + (c % 20))
        cats.append((c, f"class_{c}"))
        for _ in range(count):
            images.append(ImageRecord(id=next_image, width=64, height=64,
                                      file_name=None))
            annotations.append(InstanceAnnotation(
                id=next_ann, image_id=next_image, category_id=c,
                bbox=(1.0, 1.0, 8.0, 8.0), area=64.0))
            next_image += 1
            next_ann += 1
    return DatasetIndex(images=tuple(images), annotations=tuple(annotations),
                        categories=tuple(cats), role="labeled")
