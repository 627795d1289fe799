"""Class-frequency statistics, head/tail partitioning, repeat-factor sampling,
k-shot sampling, and the rare-instance crop bank."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .dataset import DatasetIndex, InstanceAnnotation, load_pixels
from .errors import DatasetError

FrequencyBin = Literal["rare", "common", "frequent"]

# LVIS-convention reporting bins: rare <= 10 images, common 11..100, frequent > 100.
LVIS_BIN_THRESHOLDS = (10, 100)


@dataclass(frozen=True)
class CategoryStats:
    category_id: int
    image_count: int      # number of distinct images containing the class
    instance_count: int
    frequency_bin: FrequencyBin


@dataclass(frozen=True)
class PartitionSpec:
    """Head/tail split at threshold M; both id lists sorted ascending."""

    threshold_m: int
    head_ids: tuple[int, ...]
    tail_ids: tuple[int, ...]
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class KShotSample:
    k: int
    seed: int
    selected: dict[int, tuple[int, ...]] = field(default_factory=dict)


def compute_category_stats(
    ds: DatasetIndex,
    bin_thresholds: tuple[int, int] = LVIS_BIN_THRESHOLDS,
) -> list[CategoryStats]:
    """Per-class image/instance counts with frequency bins.

    Bins assign by image count: ``<= rare_max`` rare, ``<= common_max`` common,
    else frequent. Classes with zero annotations are reported with count 0.
    """
    if ds.role != "labeled":
        raise DatasetError("category stats require a labeled dataset")
    rare_max, common_max = bin_thresholds
    if rare_max > common_max:
        raise DatasetError(f"bin thresholds out of order: {bin_thresholds}")
    images_seen: dict[int, set[int]] = {cid: set() for cid in ds.category_ids}
    instances: dict[int, int] = {cid: 0 for cid in ds.category_ids}
    for ann in ds.annotations:
        images_seen[ann.category_id].add(ann.image_id)
        instances[ann.category_id] += 1
    out = []
    for cid in ds.category_ids:
        m = len(images_seen[cid])
        fbin: FrequencyBin = ("rare" if m <= rare_max
                              else "common" if m <= common_max else "frequent")
        out.append(CategoryStats(category_id=cid, image_count=m,
                                 instance_count=instances[cid], frequency_bin=fbin))
    return out


def _filter_to_classes(ds: DatasetIndex, keep: set[int]) -> DatasetIndex:
    anns = tuple(a for a in ds.annotations if a.category_id in keep)
    keep_images = {a.image_id for a in anns}
    images = tuple(im for im in ds.images if im.id in keep_images)
    return DatasetIndex(images=images, annotations=anns, categories=ds.categories,
                        role=ds.role, images_root=ds.images_root)


def partition_head_tail(
    ds: DatasetIndex, m: int
) -> tuple[DatasetIndex, DatasetIndex, PartitionSpec]:
    """Split the vocabulary at image-count threshold M.

    Tail classes appear in at most M images; head classes in more. An image
    holding both head and tail objects appears in both subsets with
    class-filtered annotations, so instance-level supervision never leaks
    across the split. A split that empties one side is legal and reported via
    a warning on the returned spec.
    """
    if ds.role != "labeled":
        raise DatasetError("partition requires a labeled dataset")
    if m < 0:
        raise DatasetError(f"threshold M must be >= 0, got {m}")
    stats = compute_category_stats(ds)
    tail_ids = tuple(sorted(s.category_id for s in stats if s.image_count <= m))
    head_ids = tuple(sorted(s.category_id for s in stats if s.image_count > m))
    notes = []
    if not head_ids:
        notes.append(f"M={m} leaves the head empty: every class has <= {m} images")
    if not tail_ids:
        notes.append(f"M={m} leaves the tail empty: every class has > {m} images")
    for note in notes:
        warnings.warn(note, stacklevel=2)
    spec = PartitionSpec(threshold_m=m, head_ids=head_ids, tail_ids=tail_ids,
                         warnings=tuple(notes))
    head = _filter_to_classes(ds, set(head_ids))
    tail = _filter_to_classes(ds, set(tail_ids))
    return head, tail, spec


def compute_repeat_factors(ds: DatasetIndex, t: float) -> dict[int, float]:
    """Image-level repeat factors r_i for oversampling rare-class images.

    Category level: r_c = max(1, sqrt(t / f_c)) with f_c the fraction of images
    containing class c. Image level: max over the classes present; images with
    no annotations get 1.
    """
    if ds.role != "labeled":
        raise DatasetError("repeat factors require a labeled dataset")
    if not ds.images:
        raise DatasetError("repeat factors undefined for an empty dataset")
    if not (0.0 < t < 1.0):
        raise DatasetError(f"sample threshold t must be in (0, 1), got {t}")
    num_images = len(ds.images)
    stats = compute_category_stats(ds)
    r_c: dict[int, float] = {}
    for s in stats:
        if s.image_count == 0:
            continue
        f_c = s.image_count / num_images
        r_c[s.category_id] = max(1.0, math.sqrt(t / f_c))
    factors: dict[int, float] = {}
    for im in ds.images:
        anns = ds.annotations_by_image.get(im.id, ())
        if anns:
            factors[im.id] = max(r_c[a.category_id] for a in anns)
        else:
            factors[im.id] = 1.0
    return factors


def expand_epoch_indices(factors: dict[int, float], seed: int) -> list[int]:
    """Realize repeat factors as one epoch's image-id list.

    Each image appears floor(r_i) times plus one more with probability
    frac(r_i); the list is then shuffled. Deterministic given the seed and
    independent of dict iteration order.
    """
    for image_id, r in factors.items():
        if r < 1.0:
            raise DatasetError(f"repeat factor {r} < 1 for image {image_id}")
    rng = np.random.default_rng(seed)
    expanded: list[int] = []
    for image_id in sorted(factors):
        r = factors[image_id]
        count = int(math.floor(r))
        if rng.random() < r - count:
            count += 1
        expanded.extend([image_id] * count)
    rng.shuffle(expanded)
    return expanded


def sample_k_shot(
    ds: DatasetIndex, k: int, seed: int
) -> tuple[DatasetIndex, KShotSample]:
    """Sample up to k instances per class, uniformly without replacement.

    The returned index contains the images owning selected instances.
    Unselected instances in those images are retained but flagged as ignore
    regions, so they are excluded from both positive and negative loss
    assignment instead of being treated as background.
    """
    if ds.role != "labeled":
        raise DatasetError("k-shot sampling requires a labeled dataset")
    if k < 0:
        raise DatasetError(f"k must be >= 0, got {k}")
    by_class: dict[int, list[int]] = {cid: [] for cid in ds.category_ids}
    ann_by_id = {a.id: a for a in ds.annotations}
    for ann in ds.annotations:
        by_class[ann.category_id].append(ann.id)
    selected: dict[int, tuple[int, ...]] = {}
    for cid in ds.category_ids:
        ids = sorted(by_class[cid])
        if not ids or k == 0:
            selected[cid] = ()
            continue
        rng = np.random.default_rng([seed, cid])
        perm = rng.permutation(len(ids))
        chosen = sorted(ids[i] for i in perm[: min(k, len(ids))])
        selected[cid] = tuple(chosen)
    chosen_ids = {aid for ids in selected.values() for aid in ids}
    keep_images = {ann_by_id[aid].image_id for aid in chosen_ids}
    annotations = tuple(
        a if a.id in chosen_ids else replace(a, ignore=True)
        for a in ds.annotations if a.image_id in keep_images)
    images = tuple(im for im in ds.images if im.id in keep_images)
    d_k = DatasetIndex(images=images, annotations=annotations,
                       categories=ds.categories, role="labeled",
                       images_root=ds.images_root)
    return d_k, KShotSample(k=k, seed=seed, selected=selected)


@dataclass(frozen=True)
class BankEntry:
    category_id: int
    patch: np.ndarray              # HxWx3 uint8 crop of the instance bbox
    bbox_size: tuple[float, float]  # original (w, h)
    annotation_id: int


def build_rare_instance_bank(tail: DatasetIndex) -> list[BankEntry]:
    """Crop every tail-class instance into a paste bank (one entry per instance)."""
    if tail.role != "labeled":
        raise DatasetError("instance bank requires a labeled dataset")
    if not tail.annotations:
        raise DatasetError("cannot build an instance bank from an empty tail dataset")
    bank: list[BankEntry] = []
    for ann in sorted(tail.annotations, key=lambda a: a.id):
        pixels = load_pixels(tail, ann.image_id)
        x, y, w, h = ann.bbox
        x0, y0 = int(round(x)), int(round(y))
        x1, y1 = int(round(x + w)), int(round(y + h))
        x0, y0 = max(0, x0), max(0, y0)
        x1 = min(pixels.shape[1], max(x0 + 1, x1))
        y1 = min(pixels.shape[0], max(y0 + 1, y1))
        patch = pixels[y0:y1, x0:x1].copy()
        bank.append(BankEntry(category_id=ann.category_id, patch=patch,
                              bbox_size=(w, h), annotation_id=ann.id))
    return bank
