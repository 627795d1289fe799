"""Batch streams feeding the training loops.

Labeled batches: repeat-factor epoch expansion, optional copy-paste, weak
views, center-based target assignment. Unlabeled batches: optional
rare-instance paste, then a weak view for the teacher and a strong view
(derived from the same weak view) for the student.

One resize target is sampled per batch so every image in a batch shares one
resolution.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from ..augment import (
    AugPolicy,
    apply_weak,
    make_sample,
    paste_rare_instances,
    simple_copy_paste,
    strengthen,
    strong_policy,
    weak_policy,
)
from ..dataset import DatasetIndex, load_pixels
from ..detector.model import STRIDE
from ..detector.targets import TargetSet, assign_targets, stack_targets
from ..sampling import BankEntry, compute_repeat_factors, expand_epoch_indices
from ..semi import UnlabeledBatch

SCP_PROB = 0.5


class PixelCache:
    """In-memory uint8 payload cache keyed by image id."""

    def __init__(self, ds: DatasetIndex):
        self.ds = ds
        self._cache: dict[int, np.ndarray] = {}

    def __getitem__(self, image_id: int) -> np.ndarray:
        arr = self._cache.get(image_id)
        if arr is None:
            arr = load_pixels(self.ds, image_id)
            self._cache[image_id] = arr
        return arr


def images_to_tensor(arrays: list[np.ndarray]) -> torch.Tensor:
    stacked = np.stack(arrays).astype(np.float32) / 255.0
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


def feature_locations(height: int, width: int, stride: int = STRIDE) -> torch.Tensor:
    """Location grid matching the conv arithmetic (ceil division per block)."""
    fh, fw = math.ceil(height / stride), math.ceil(width / stride)
    ys, xs = np.meshgrid(np.arange(fh), np.arange(fw), indexing="ij")
    loc = np.stack([(xs + 0.5) * stride, (ys + 0.5) * stride], axis=-1)
    return torch.from_numpy(loc.reshape(-1, 2).astype(np.float32))


class LabeledStream:
    """Infinite batch iterator over a labeled dataset."""

    def __init__(self, ds: DatasetIndex, *, batch_size: int,
                 class_index: dict[int, int], num_classes: int,
                 policy: AugPolicy | None = None, rfs_t: float | None = None,
                 scp: bool = False, seed: int = 0,
                 cache: PixelCache | None = None):
        if not ds.images:
            raise ValueError("cannot stream an empty dataset")
        self.ds = ds
        self.batch_size = batch_size
        self.class_index = class_index
        self.num_classes = num_classes
        self.policy = policy or weak_policy()
        self.scp = scp
        self.rng = np.random.default_rng([seed, 101])
        self.cache = cache or PixelCache(ds)
        self.seed = seed
        self.factors = (compute_repeat_factors(ds, rfs_t) if rfs_t is not None
                        else {im.id: 1.0 for im in ds.images})
        self.epoch = 0
        self.queue: list[int] = []

    def _refill(self):
        self.queue = expand_epoch_indices(self.factors, seed=hash((self.seed, self.epoch)) % (2 ** 31))
        self.epoch += 1

    def _next_ids(self, n: int) -> list[int]:
        out = []
        while len(out) < n:
            if not self.queue:
                self._refill()
            out.append(self.queue.pop())
        return out

    def _raw_sample(self, image_id: int):
        return make_sample(self.cache[image_id], self.ds.annotations_by_image[image_id])

    def next_batch(self) -> tuple[torch.Tensor, TargetSet]:
        ids = self._next_ids(self.batch_size)
        lo, hi = self.policy.resize_short_edge_range
        resize_target = int(self.rng.integers(lo, hi + 1))
        arrays, targets = [], []
        for image_id in ids:
            sample = self._raw_sample(image_id)
            if self.scp and self.rng.random() < SCP_PROB:
                src = self._raw_sample(self._next_ids(1)[0])
                sample = simple_copy_paste(sample, src, self.rng)
            sample = apply_weak(sample, self.policy, self.rng, resize_target=resize_target)
            h, w = sample.pixels.shape[:2]
            locations = feature_locations(h, w)
            targets.append(assign_targets(sample.annotations, locations,
                                          class_index=self.class_index,
                                          num_classes=self.num_classes))
            arrays.append(sample.pixels)
        return images_to_tensor(arrays), stack_targets(targets)


class UnlabeledStream:
    """Infinite weak/strong view pairs over the unlabeled pool."""

    def __init__(self, ds: DatasetIndex, *, batch_size: int, seed: int = 0,
                 bank: list[BankEntry] | None = None,
                 paste_count: tuple[int, int] = (1, 3),
                 weak: AugPolicy | None = None, strong: AugPolicy | None = None,
                 cache: PixelCache | None = None):
        if not ds.images:
            raise ValueError("cannot stream an empty unlabeled pool")
        self.ds = ds
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 202])
        self.bank = bank
        self.paste_count = paste_count
        self.weak = weak or weak_policy()
        self.strong = strong or strong_policy(
            resize_short_edge_range=self.weak.resize_short_edge_range)
        self.cache = cache or PixelCache(ds)
        self.ids = sorted(im.id for im in ds.images)
        self.queue: list[int] = []

    def _next_ids(self, n: int) -> list[int]:
        out = []
        while len(out) < n:
            if not self.queue:
                self.queue = list(self.rng.permutation(self.ids))
            out.append(int(self.queue.pop()))
        return out

    def next_batch(self) -> UnlabeledBatch:
        ids = self._next_ids(self.batch_size)
        lo, hi = self.weak.resize_short_edge_range
        resize_target = int(self.rng.integers(lo, hi + 1))
        weak_arrays, strong_arrays, tail_logs, weak_sizes = [], [], [], []
        for image_id in ids:
            pixels = self.cache[image_id]
            if self.bank is not None:
                sample = paste_rare_instances(pixels, self.bank, self.rng,
                                              self.paste_count)
            else:
                sample = make_sample(pixels)
            weak_view = apply_weak(sample, self.weak, self.rng,
                                   resize_target=resize_target)
            strong_view = strengthen(weak_view, self.strong, self.rng)
            weak_arrays.append(weak_view.pixels)
            strong_arrays.append(strong_view.pixels)
            tail_logs.append(strong_view.op_log[len(weak_view.op_log):])
            h, w = weak_view.pixels.shape[:2]
            weak_sizes.append((w, h))
        return UnlabeledBatch(weak_images=images_to_tensor(weak_arrays),
                              strong_images=images_to_tensor(strong_arrays),
                              strong_tail_logs=tail_logs, weak_sizes=weak_sizes)


def val_batches(ds: DatasetIndex, batch_size: int = 16,
                cache: PixelCache | None = None):
    """Native-resolution batches for evaluation (no augmentation)."""
    cache = cache or PixelCache(ds)
    ids = sorted(im.id for im in ds.images)
    for i in range(0, len(ids), batch_size):
        chunk = ids[i:i + batch_size]
        arrays = [cache[image_id] for image_id in chunk]
        sizes = [(a.shape[1], a.shape[0]) for a in arrays]
        yield chunk, sizes, images_to_tensor(arrays)
