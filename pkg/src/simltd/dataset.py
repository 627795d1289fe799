"""Detection dataset model: images, instance annotations, category vocabulary.

A :class:`DatasetIndex` is immutable after construction and safe to share
across threads. Annotation documents use the COCO layout (``images``,
``annotations``, ``categories``); the writer emits a canonical key order so
load/save round-trips are byte-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

from .errors import (
    DanglingReferenceError,
    DatasetError,
    MalformedDatasetError,
    MissingDatasetFileError,
)

Role = Literal["labeled", "unlabeled"]
Source = Literal["original", "pasted"]


@dataclass(frozen=True)
class InstanceAnnotation:
    """One object instance: axis-aligned box in (x, y, w, h) pixels, top-left origin."""

    id: int
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float]
    area: float
    source: Source = "original"
    ignore: bool = False

    def __post_init__(self):
        x, y, w, h = self.bbox
        if not (w > 0 and h > 0):
            raise DatasetError(
                f"annotation {self.id}: degenerate bbox w={w}, h={h} (must be > 0)"
            )

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        x, y, w, h = self.bbox
        return (x, y, x + w, y + h)


@dataclass(frozen=True)
class ImageRecord:
    """An image with its payload reference (file name under a root, or an embedded array)."""

    id: int
    width: int
    height: int
    file_name: str | None = None
    pixels: np.ndarray | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DatasetError(f"image {self.id}: non-positive dimensions "
                               f"{self.width}x{self.height}")
        if self.pixels is not None:
            h, w = self.pixels.shape[:2]
            if (h, w) != (self.height, self.width):
                raise DatasetError(
                    f"image {self.id}: embedded payload is {w}x{h}, "
                    f"declared {self.width}x{self.height}")


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable index over images, annotations, and the category vocabulary."""

    images: tuple[ImageRecord, ...]
    annotations: tuple[InstanceAnnotation, ...]
    categories: tuple[tuple[int, str], ...]
    role: Role = "labeled"
    images_root: Path | None = None

    def __post_init__(self):
        cat_ids = [cid for cid, _ in self.categories]
        if len(set(cat_ids)) != len(cat_ids):
            raise DatasetError("duplicate category ids in vocabulary")
        image_ids = [im.id for im in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise DatasetError("duplicate image ids")
        if self.role == "unlabeled" and self.annotations:
            raise DatasetError("unlabeled index must carry zero annotations")
        known_images = set(image_ids)
        known_cats = set(cat_ids)
        ann_ids = set()
        for ann in self.annotations:
            if ann.id in ann_ids:
                raise DatasetError(f"duplicate annotation id {ann.id}")
            ann_ids.add(ann.id)
            if ann.image_id not in known_images:
                raise DanglingReferenceError(
                    f"annotation {ann.id} references missing image id {ann.image_id}")
            if ann.category_id not in known_cats:
                raise DanglingReferenceError(
                    f"annotation {ann.id} references unknown category id {ann.category_id}")

    @cached_property
    def image_by_id(self) -> dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    @cached_property
    def annotations_by_image(self) -> dict[int, tuple[InstanceAnnotation, ...]]:
        out: dict[int, list[InstanceAnnotation]] = {im.id: [] for im in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def category_ids(self) -> tuple[int, ...]:
        return tuple(sorted(cid for cid, _ in self.categories))

    @property
    def counts(self) -> tuple[int, int, int]:
        return (len(self.images), len(self.annotations), len(self.categories))

    def with_role(self, role: Role) -> "DatasetIndex":
        return replace(self, role=role)


def load_pixels(ds: DatasetIndex, image_id: int) -> np.ndarray:
    """Return the HxWx3 uint8 pixel array for an image (embedded or from disk)."""
    rec = ds.image_by_id[image_id]
    if rec.pixels is not None:
        return rec.pixels
    if rec.file_name is None:
        raise DatasetError(f"image {image_id} has no payload reference")
    root = ds.images_root or Path(".")
    path = Path(root) / rec.file_name
    if not path.exists():
        raise MissingDatasetFileError(f"image payload missing: {path}")
    arr = np.asarray(Image.open(path).convert("RGB"))
    if arr.shape[:2] != (rec.height, rec.width):
        raise DatasetError(
            f"image {image_id}: payload is {arr.shape[1]}x{arr.shape[0]}, "
            f"declared {rec.width}x{rec.height}")
    return arr


# --- COCO-format annotation documents ---------------------------------------


def load_dataset(path: str | Path, role: Role = "labeled",
                 images_root: str | Path | None = None) -> DatasetIndex:
    """Load a COCO-format annotation document into a validated DatasetIndex.

    Raises a distinct error for a missing file, a malformed document, and a
    dangling image reference.
    """
    path = Path(path)
    if not path.exists():
        raise MissingDatasetFileError(f"annotation file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedDatasetError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedDatasetError(f"{path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if key not in doc or not isinstance(doc[key], list):
            raise MalformedDatasetError(f"{path}: missing or non-list key {key!r}")

    if images_root is None and path.parent.name:
        candidate = path.parent / "images"
        images_root = candidate if candidate.is_dir() else path.parent

    try:
        images = tuple(
            ImageRecord(id=int(im["id"]), width=int(im["width"]),
                        height=int(im["height"]), file_name=im.get("file_name"))
            for im in doc["images"])
        annotations = tuple(
            InstanceAnnotation(
                id=int(a["id"]), image_id=int(a["image_id"]),
                category_id=int(a["category_id"]),
                bbox=tuple(float(v) for v in a["bbox"]),
                area=float(a["area"]), ignore=bool(a.get("ignore", False)))
            for a in doc["annotations"])
        categories = tuple((int(c["id"]), str(c["name"])) for c in doc["categories"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedDatasetError(f"{path}: bad record: {exc}") from exc

    return DatasetIndex(images=images, annotations=annotations, categories=categories,
                        role=role, images_root=Path(images_root) if images_root else None)


def _num(v: float) -> float | int:
    """Canonical JSON number: integral floats are written as ints."""
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def dataset_to_document(ds: DatasetIndex) -> dict:
    """Canonical COCO document: records sorted by id, fixed key order."""
    images = [
        {"id": im.id, "width": im.width, "height": im.height,
         **({"file_name": im.file_name} if im.file_name is not None else {})}
        for im in sorted(ds.images, key=lambda im: im.id)]
    annotations = []
    for a in sorted(ds.annotations, key=lambda a: a.id):
        rec = {"id": a.id, "image_id": a.image_id, "category_id": a.category_id,
               "bbox": [_num(v) for v in a.bbox], "area": _num(a.area)}
        if a.ignore:
            rec["ignore"] = True
        annotations.append(rec)
    categories = [{"id": cid, "name": name}
                  for cid, name in sorted(ds.categories, key=lambda c: c[0])]
    return {"images": images, "annotations": annotations, "categories": categories}


def save_dataset(ds: DatasetIndex, path: str | Path) -> None:
    """Write the canonicalized annotation document (byte-stable round trips)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(dataset_to_document(ds), separators=(",", ":")) + "\n"
    path.write_text(text)
