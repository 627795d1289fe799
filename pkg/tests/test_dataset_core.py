import json
import warnings

import numpy as np
import pytest

from simltd.dataset import (
    DatasetIndex,
    ImageRecord,
    InstanceAnnotation,
    load_dataset,
    load_pixels,
    save_dataset,
)
from simltd.errors import (
    DanglingReferenceError,
    DatasetError,
    MalformedDatasetError,
    MissingDatasetFileError,
)
from simltd.sampling import (
    build_rare_instance_bank,
    compute_category_stats,
    compute_repeat_factors,
    expand_epoch_indices,
    partition_head_tail,
    sample_k_shot,
)
from simltd.synth import SynthSpec, write_benchmark

from conftest import make_index

MINIMAL_DOC = {
    "images": [{"id": 1, "width": 32, "height": 32, "file_name": "a.png"}],
    "annotations": [{"id": 1, "image_id": 1, "category_id": 1,
                     "bbox": [2, 3, 10, 8], "area": 80}],
    "categories": [{"id": 1, "name": "thing"}],
}


def test_load_minimal(tmp_path):
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(MINIMAL_DOC))
    ds = load_dataset(path)
    assert ds.counts == (1, 1, 1)
    assert ds.annotations[0].bbox == (2.0, 3.0, 10.0, 8.0)


def test_load_missing_file(tmp_path):
    with pytest.raises(MissingDatasetFileError):
        load_dataset(tmp_path / "nope.json")


def test_load_malformed(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(MalformedDatasetError):
        load_dataset(path)
    path.write_text(json.dumps({"images": []}))
    with pytest.raises(MalformedDatasetError):
        load_dataset(path)


def test_load_dangling_image_reference(tmp_path):
    doc = json.loads(json.dumps(MINIMAL_DOC))
    doc["annotations"][0]["image_id"] = 99
    path = tmp_path / "dangling.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(DanglingReferenceError):
        load_dataset(path)


def test_invariants_rejected():
    with pytest.raises(DatasetError):
        InstanceAnnotation(id=1, image_id=1, category_id=1,
                           bbox=(0, 0, 0, 5), area=0)
    with pytest.raises(DatasetError):
        ImageRecord(id=1, width=0, height=4)
    with pytest.raises(DatasetError):
        DatasetIndex(images=(ImageRecord(id=1, width=8, height=8),),
                     annotations=(InstanceAnnotation(
                         id=1, image_id=1, category_id=1,
                         bbox=(0, 0, 2, 2), area=4),),
                     categories=((1, "a"),), role="unlabeled")


def test_roundtrip_byte_stable(tmp_path):
    spec = SynthSpec(num_images=12, val_images=4, unlabeled_count=2, seed=5)
    paths = write_benchmark(spec, tmp_path)
    for name in ("train", "val", "unlabeled"):
        original = paths[name].read_bytes()
        role = "unlabeled" if name == "unlabeled" else "labeled"
        ds = load_dataset(paths[name], role=role)
        out = tmp_path / f"again_{name}.json"
        save_dataset(ds, out)
        assert out.read_bytes() == original


# --- category stats ----------------------------------------------------------


def test_stats_lvis_thresholds():
    # 1 class in exactly 10 images -> rare under the (10, 100) convention.
    ds = make_index([(64, 64)] * 10,
                    [(i + 1, 1, (0, 0, 4, 4)) for i in range(10)],
                    num_classes=2)
    stats = {s.category_id: s for s in compute_category_stats(ds, (10, 100))}
    assert stats[1].frequency_bin == "rare"
    assert stats[1].image_count == 10
    assert stats[2].frequency_bin == "rare"
    assert stats[2].image_count == 0 and stats[2].instance_count == 0


def test_stats_against_bruteforce(desk_benchmark):
    train, _ = desk_benchmark
    stats = {s.category_id: s for s in compute_category_stats(train, (30, 100))}
    # Independent oracle: exhaustive counting over raw annotations.
    for cid, _name in train.categories:
        images = set()
        instances = 0
        for a in train.annotations:
            if a.category_id == cid:
                images.add(a.image_id)
                instances += 1
        assert stats[cid].image_count == len(images)
        assert stats[cid].instance_count == instances
        expected = ("rare" if len(images) <= 30
                    else "common" if len(images) <= 100 else "frequent")
        assert stats[cid].frequency_bin == expected


# --- head/tail partition ------------------------------------------------------


def test_partition_m0_all_head():
    ds = make_index([(64, 64)] * 3,
                    [(1, 1, (0, 0, 4, 4)), (2, 2, (0, 0, 4, 4)), (3, 2, (1, 1, 4, 4))],
                    num_classes=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        head, tail, spec = partition_head_tail(ds, 0)
    assert spec.tail_ids == () and spec.head_ids == (1, 2)
    assert tail.counts[0] == 0
    assert spec.warnings


def test_partition_completeness_and_monotonicity(desk_benchmark):
    train, _ = desk_benchmark
    vocab = set(train.category_ids)
    prev_tail: set[int] = set()
    for m in (0, 5, 20, 30, 60, 200, 2000):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, _, spec = partition_head_tail(train, m)
        assert set(spec.head_ids) | set(spec.tail_ids) == vocab
        assert set(spec.head_ids) & set(spec.tail_ids) == set()
        assert list(spec.head_ids) == sorted(spec.head_ids)
        assert prev_tail <= set(spec.tail_ids)
        prev_tail = set(spec.tail_ids)


def test_partition_median_against_bruteforce(desk_benchmark):
    train, _ = desk_benchmark
    counts = {}
    for cid, _ in train.categories:
        counts[cid] = len({a.image_id for a in train.annotations
                           if a.category_id == cid})
    m = int(np.median(sorted(counts.values())))
    head, tail, spec = partition_head_tail(train, m)
    assert set(spec.tail_ids) == {c for c, n in counts.items() if n <= m}
    # class-filtered annotations, shared images allowed
    assert all(a.category_id in spec.head_ids for a in head.annotations)
    assert all(a.category_id in spec.tail_ids for a in tail.annotations)
    head_images_with_tail_objs = {
        a.image_id for a in train.annotations if a.category_id in spec.tail_ids
    } & {im.id for im in head.images}
    assert head_images_with_tail_objs, "mixed images should appear in both subsets"


# --- repeat factor sampling ---------------------------------------------------


def test_repeat_factor_formula():
    # 10000 images; class 1 in one image -> f=1e-4; with t=1e-3, r=sqrt(10).
    ds = make_index([(64, 64)] * 10000,
                    [(1, 1, (0, 0, 4, 4))]
                    + [(i + 1, 2, (0, 0, 4, 4)) for i in range(1, 10000)],
                    num_classes=2)
    factors = compute_repeat_factors(ds, 0.001)
    assert factors[1] == pytest.approx(np.sqrt(10.0), abs=1e-9)
    assert factors[2] == 1.0  # f_c >= t clamps to exactly 1


def test_repeat_factor_image_max_rule():
    # image 1 holds classes with r_c = 1.0 and r_c = 2.5 -> r_i = 2.5.
    # 25 images total; class 2 appears in 4 images: f = 4/25 = 0.16,
    # r = sqrt(0.4/0.16) = sqrt(2.5) ... build exact 2.5 instead:
    # f_c = t / 6.25 gives r_c = 2.5.
    t = 0.25
    n_images = 100
    # class 2 in 4 images -> f = 0.04, r = sqrt(0.25/0.04) = 2.5
    anns = [(1, 1, (0, 0, 4, 4)), (1, 2, (8, 8, 4, 4))]
    anns += [(i, 2, (0, 0, 4, 4)) for i in (2, 3, 4)]
    anns += [(i, 1, (0, 0, 4, 4)) for i in range(5, n_images + 1)]
    ds = make_index([(64, 64)] * n_images, anns, num_classes=2)
    factors = compute_repeat_factors(ds, t)
    assert factors[1] == pytest.approx(2.5, abs=1e-12)
    assert factors[5] == 1.0


def test_repeat_factor_empty_dataset():
    ds = make_index([], [], num_classes=1)
    with pytest.raises(DatasetError):
        compute_repeat_factors(ds, 0.001)


def test_expand_integer_factors():
    factors = {1: 1.0, 2: 1.0, 3: 2.0}
    out = expand_epoch_indices(factors, seed=0)
    assert sorted(out) == [1, 2, 3, 3]
    out1 = expand_epoch_indices({1: 1.0, 2: 1.0, 3: 1.0}, seed=9)
    assert sorted(out1) == [1, 2, 3]


def test_expand_fractional_expectation():
    total = 0
    trials = 10_000
    for seed in range(trials):
        total += expand_epoch_indices({7: 1.5}, seed).count(7)
    mean = total / trials
    assert abs(mean - 1.5) <= 0.02 * 1.5


def test_expand_deterministic():
    factors = {i: 1.0 + (i % 5) / 3.0 for i in range(50)}
    assert expand_epoch_indices(factors, 42) == expand_epoch_indices(factors, 42)


# --- k-shot sampling -----------------------------------------------------------


def test_k_shot_cap_and_full_selection():
    ds = make_index([(64, 64)] * 5,
                    [(i + 1, 1, (0, 0, 4, 4)) for i in range(5)]
                    + [(i + 1, 2, (8, 8, 4, 4)) for i in range(5)],
                    num_classes=2)
    d_k, sample = sample_k_shot(ds, 30, seed=3)
    assert len(sample.selected[1]) == 5  # only 5 available, all selected
    d_k2, sample2 = sample_k_shot(ds, 2, seed=3)
    assert len(sample2.selected[1]) == 2


def test_k_shot_zero():
    ds = make_index([(64, 64)], [(1, 1, (0, 0, 4, 4))], num_classes=1)
    d_k, sample = sample_k_shot(ds, 0, seed=1)
    assert sample.selected[1] == ()
    assert d_k.counts[0] == 0


def test_k_shot_deterministic(desk_benchmark):
    train, _ = desk_benchmark
    _, s1 = sample_k_shot(train, 30, seed=11)
    _, s2 = sample_k_shot(train, 30, seed=11)
    assert s1 == s2
    _, s3 = sample_k_shot(train, 30, seed=12)
    assert s1 != s3


def test_k_shot_ignore_regions(desk_benchmark):
    train, _ = desk_benchmark
    d_k, sample = sample_k_shot(train, 5, seed=2)
    chosen = {aid for ids in sample.selected.values() for aid in ids}
    for ann in d_k.annotations:
        assert ann.ignore == (ann.id not in chosen)
    counts = {}
    for ann in d_k.annotations:
        if not ann.ignore:
            counts[ann.category_id] = counts.get(ann.category_id, 0) + 1
    assert all(v <= 5 for v in counts.values())


# --- rare instance bank ---------------------------------------------------------


def _embedded_ds():
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 255, size=(64, 64, 3), dtype=np.uint8)
    images = (ImageRecord(id=1, width=64, height=64, pixels=pixels),)
    anns = (
        InstanceAnnotation(id=1, image_id=1, category_id=1, bbox=(4, 6, 20, 10), area=200),
        InstanceAnnotation(id=2, image_id=1, category_id=1, bbox=(30, 30, 8, 16), area=128),
        InstanceAnnotation(id=3, image_id=1, category_id=2, bbox=(0, 0, 5, 5), area=25),
    )
    return DatasetIndex(images=images, annotations=anns,
                        categories=((1, "a"), (2, "b")), role="labeled")


def test_bank_one_entry_per_instance():
    ds = _embedded_ds()
    bank = build_rare_instance_bank(ds)
    assert len(bank) == 3
    for entry, ann in zip(bank, ds.annotations):
        w, h = ann.bbox[2], ann.bbox[3]
        assert entry.patch.shape == (int(h), int(w), 3)


def test_bank_empty_tail_errors():
    ds = make_index([(64, 64)], [], num_classes=1)
    with pytest.raises(DatasetError):
        build_rare_instance_bank(ds)


def test_bank_repaste_roundtrip():
    ds = _embedded_ds()
    bank = build_rare_instance_bank(ds)
    pixels = load_pixels(ds, 1)
    for entry, ann in zip(bank, ds.annotations):
        x, y = int(round(ann.bbox[0])), int(round(ann.bbox[1]))
        canvas = pixels.copy()
        canvas[y:y + entry.patch.shape[0], x:x + entry.patch.shape[1]] = entry.patch
        assert np.array_equal(canvas, pixels)
