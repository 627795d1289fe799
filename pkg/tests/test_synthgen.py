import numpy as np
import pytest
from scipy import stats as scipy_stats

from simltd.errors import DatasetError
from simltd.synth import (
    SynthSpec,
    generate_longtail_dataset,
    generate_unlabeled_pool,
    write_benchmark,
    zipf_pmf,
)

SMALL = dict(num_images=60, val_images=20, unlabeled_count=10,
             image_size=(64, 64), object_size_range=(16, 28), seed=3)


def test_zipf_share_normalization():
    # Independently evaluated normalization sum for 20 classes at s = 1.5:
    # sum_{c=1..20} c**-1.5 = 2.170681..., so the class-1 share is 0.460685.
    pmf = zipf_pmf(20, 1.5)
    expected = 1.0 / sum(c ** -1.5 for c in range(1, 21))
    assert pmf[0] == pytest.approx(expected, rel=1e-12)
    assert pmf[0] == pytest.approx(0.4606847, abs=1e-6)


def test_zero_exponent_uniform_chisquare():
    spec = SynthSpec(num_classes=10, zipf_s=0.0, num_images=1900, val_images=1,
                     image_size=(64, 64), object_size_range=(16, 24),
                     objects_per_image=(5, 7), unlabeled_count=0, seed=11)
    train, _ = generate_longtail_dataset(spec)
    counts = np.zeros(10)
    for a in train.annotations:
        counts[a.category_id - 1] += 1
    assert counts.sum() >= 10_000
    # placement rejection can drop objects class-independently; uniformity holds
    result = scipy_stats.chisquare(counts)
    assert result.pvalue > 0.01


def test_bbox_matches_mask_oracle():
    spec = SynthSpec(**SMALL)
    train, _, masks = generate_longtail_dataset(spec, with_masks=True)
    assert len(masks) == len(train.annotations)
    for ann in train.annotations:
        mask = masks[ann.id]
        ys, xs = np.nonzero(mask)
        tight = (xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
        x, y, w, h = ann.bbox
        assert abs(tight[0] - x) <= 1 and abs(tight[1] - y) <= 1
        assert abs((tight[0] + tight[2]) - (x + w)) <= 1
        assert abs((tight[1] + tight[3]) - (y + h)) <= 1


def test_area_matches_mask_and_bounds():
    spec = SynthSpec(**SMALL)
    train, val, masks = generate_longtail_dataset(spec, with_masks=True)
    h, w = spec.image_size
    for ds in (train, val):
        for ann in ds.annotations:
            x, y, bw, bh = ann.bbox
            assert x >= 0 and y >= 0 and x + bw <= w and y + bh <= h
    for ann in train.annotations:
        assert ann.area == pytest.approx(masks[ann.id].sum(), rel=0.05)


def test_determinism_bit_identical():
    spec = SynthSpec(**SMALL)
    t1, v1 = generate_longtail_dataset(spec)
    t2, v2 = generate_longtail_dataset(spec)
    assert t1.annotations == t2.annotations
    for a, b in zip(t1.images, t2.images):
        assert np.array_equal(a.pixels, b.pixels)
    assert v1.annotations == v2.annotations


def test_train_val_disjoint_ids():
    spec = SynthSpec(**SMALL)
    train, val = generate_longtail_dataset(spec)
    assert not ({im.id for im in train.images} & {im.id for im in val.images})


def test_benchmark_write_deterministic(tmp_path):
    spec = SynthSpec(num_images=6, val_images=2, unlabeled_count=2,
                     image_size=(64, 64), object_size_range=(16, 24), seed=9)
    p1 = write_benchmark(spec, tmp_path / "a")
    p2 = write_benchmark(spec, tmp_path / "b")
    assert p1["train"].read_bytes() == p2["train"].read_bytes()
    img1 = sorted((tmp_path / "a" / "images").iterdir())
    img2 = sorted((tmp_path / "b" / "images").iterdir())
    assert [p.name for p in img1] == [p.name for p in img2]
    for a, b in zip(img1, img2):
        assert a.read_bytes() == b.read_bytes()


def test_unlabeled_pool_contract():
    spec = SynthSpec(**{**SMALL, "unlabeled_count": 0})
    pool = generate_unlabeled_pool(spec)
    assert pool.role == "unlabeled"
    assert pool.counts == (0, 0, 20)
    spec2 = SynthSpec(**{**SMALL, "unlabeled_count": 15})
    pool2 = generate_unlabeled_pool(spec2)
    assert pool2.counts[0] == 15 and pool2.counts[1] == 0


def test_unlabeled_hidden_mix_matches_zipf():
    spec = SynthSpec(num_classes=20, zipf_s=1.5, num_images=1, val_images=1,
                     image_size=(64, 64), object_size_range=(16, 24),
                     objects_per_image=(5, 7), unlabeled_count=2000, seed=21)
    pool, hidden = generate_unlabeled_pool(spec, with_hidden_stats=True)
    assert hidden.sum() >= 10_000
    shares = hidden / hidden.sum()
    pmf = zipf_pmf(20, 1.5)
    assert np.all(np.abs(shares - pmf) <= 0.02)


def test_too_many_classes_rejected():
    with pytest.raises(DatasetError):
        SynthSpec(num_classes=51, image_size=(64, 64), object_size_range=(16, 24))
