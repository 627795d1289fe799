import numpy as np
import pytest
from PIL import Image

from simltd.augment import (
    AugPolicy,
    affine_matrix,
    apply_strong,
    apply_weak,
    invert_boxes_through_ops,
    make_sample,
    map_box_through_affine,
    map_boxes_through_ops,
    op_sizes,
    paste_rare_instances,
    replay,
    simple_copy_paste,
    strengthen,
    strong_policy,
    weak_policy,
)
from simltd.dataset import InstanceAnnotation
from simltd.errors import AugmentationError
from simltd.sampling import BankEntry


def ann(i, bbox, cat=1, **kw):
    return InstanceAnnotation(id=i, image_id=1, category_id=cat,
                              bbox=tuple(float(v) for v in bbox),
                              area=float(bbox[2] * bbox[3]), **kw)


def checker(w=64, h=64):
    rng = np.random.default_rng(99)
    return rng.integers(0, 255, size=(h, w, 3), dtype=np.uint8)


COLLAPSED = dict(translation_range=(0.0, 0.0), shear_range=(0.0, 0.0),
                 rotation_range=(0.0, 0.0), cutout_count_range=(0, 0),
                 cutout_size_range=(0.0, 0.0))


def test_identity_policy_is_noop(rng):
    sample = make_sample(checker(), [ann(1, (4, 4, 10, 12))])
    policy = weak_policy(resize_short_edge_range=(64, 64), hflip_prob=0.0,
                         photometric_prob=0.0)
    out = apply_weak(sample, policy, rng)
    assert np.array_equal(out.pixels, sample.pixels)
    assert out.annotations == sample.annotations
    assert out.op_log == []


def test_hflip_formula(rng):
    sample = make_sample(checker(80, 40), [ann(1, (10, 5, 20, 8))])
    policy = weak_policy(resize_short_edge_range=(40, 40), hflip_prob=1.0,
                         photometric_prob=0.0)
    out = apply_weak(sample, policy, rng)
    assert out.annotations[0].bbox == (80 - 10 - 20, 5, 20, 8)
    assert np.array_equal(out.pixels, sample.pixels[:, ::-1])


def test_resize_scales_boxes_exactly(rng):
    sample = make_sample(checker(128, 128), [ann(1, (16, 32, 40, 24))])
    policy = weak_policy(resize_short_edge_range=(96, 96), hflip_prob=0.0,
                         photometric_prob=0.0)
    out = apply_weak(sample, policy, rng)
    assert out.pixels.shape[:2] == (96, 96)
    assert out.annotations[0].bbox == (16 * 0.75, 32 * 0.75, 40 * 0.75, 24 * 0.75)


def test_weak_rejects_degenerate_image(rng):
    with pytest.raises(AugmentationError):
        apply_weak(make_sample(np.zeros((4, 4, 3), np.uint8)), weak_policy(), rng)


def test_photometric_never_touches_boxes():
    sample = make_sample(checker(), [ann(1, (4, 4, 10, 12))])
    policy = weak_policy(resize_short_edge_range=(64, 64), hflip_prob=0.0,
                         photometric_prob=1.0)
    out = apply_weak(sample, policy, np.random.default_rng(5))
    assert [a.bbox for a in out.annotations] == [a.bbox for a in sample.annotations]
    assert len(out.op_log) == 8


def test_strong_collapsed_equals_weak():
    sample = make_sample(checker(), [ann(1, (4, 4, 10, 12))])
    policy = strong_policy(**COLLAPSED)
    strong = apply_strong(sample, policy, np.random.default_rng(7))
    weak = apply_weak(sample, policy, np.random.default_rng(7))
    assert np.array_equal(strong.pixels, weak.pixels)
    assert strong.annotations == weak.annotations
    assert strong.op_log == weak.op_log


def test_rotation_90_corner_hull():
    # Hand-computed: rotating (10,10,20,10) by 90 deg about the center of a
    # 100x100 image maps corners to x in [80,90], y in [10,30].
    m = affine_matrix(100, 100, 0, 0, 0, 0, 90.0)
    mapped, visible = map_box_through_affine((10, 10, 20, 10), m, 100, 100)
    assert mapped == pytest.approx((80.0, 10.0, 10.0, 20.0), abs=1e-9)
    assert visible == pytest.approx(1.0)


def test_cutout_count_and_size():
    sample = make_sample(checker(128, 128))
    policy = strong_policy(translation_range=(0.0, 0.0), shear_range=(0.0, 0.0),
                           rotation_range=(0.0, 0.0), cutout_count_range=(5, 5),
                           cutout_size_range=(0.2, 0.2))
    out = strengthen(sample, policy, np.random.default_rng(3))
    (name, params), = out.op_log
    assert name == "cutout" and len(params["rects"]) == 5
    for x, y, w, h in params["rects"]:
        assert w <= 0.2 * 128 and h <= 0.2 * 128
        assert np.all(out.pixels[y:y + h, x:x + w] == 127)


def test_weak_policy_rejects_geometric_ops():
    with pytest.raises(AugmentationError):
        AugPolicy(view="weak_supervised", rotation_range=(-30.0, 30.0))


def test_box_hull_against_dense_mask_oracle():
    rng = np.random.default_rng(17)
    w = h = 96
    for _ in range(25):
        bbox = (float(rng.integers(8, 48)), float(rng.integers(8, 48)),
                float(rng.integers(8, 32)), float(rng.integers(8, 32)))
        m = affine_matrix(w, h, float(rng.uniform(-9, 9)), float(rng.uniform(-9, 9)),
                          float(rng.uniform(-30, 30)), float(rng.uniform(-30, 30)),
                          float(rng.uniform(-30, 30)))
        mapped, visible = map_box_through_affine(bbox, m, w, h)
        mask = np.zeros((h, w), np.uint8)
        x, y, bw, bh = (int(v) for v in bbox)
        mask[y:y + bh, x:x + bw] = 255
        inv = np.linalg.inv(m)
        warped = Image.fromarray(mask).transform(
            (w, h), Image.AFFINE,
            data=(inv[0, 0], inv[0, 1], inv[0, 2], inv[1, 0], inv[1, 1], inv[1, 2]),
            resample=Image.NEAREST, fillcolor=0)
        ys, xs = np.nonzero(np.asarray(warped))
        if mapped is None:
            assert len(xs) == 0 or visible < 0.25
            continue
        mx, my, mw, mh = mapped
        if len(xs):
            # hull contains the transformed mask
            assert xs.min() >= mx - 1 and ys.min() >= my - 1
            assert xs.max() <= mx + mw + 1 and ys.max() <= my + mh + 1
            # and is tight to within 2 px per side
            assert xs.min() - mx <= 2 and ys.min() - my <= 2
            assert (mx + mw) - (xs.max() + 1) <= 2 and (my + mh) - (ys.max() + 1) <= 2


def test_strong_boxes_stay_valid():
    rng = np.random.default_rng(23)
    for seed in range(10):
        sample = make_sample(checker(128, 128),
                             [ann(i + 1, (8 + 10 * i, 8 + 9 * i, 14, 18))
                              for i in range(5)])
        out = apply_strong(sample, strong_policy(), np.random.default_rng(seed))
        w, h = out.size
        for a in out.annotations:
            x, y, bw, bh = a.bbox
            assert bw > 0 and bh > 0
            assert x >= 0 and y >= 0 and x + bw <= w + 1e-6 and y + bh <= h + 1e-6


# --- simple copy paste ---------------------------------------------------------


def test_scp_empty_subset_noop(rng):
    dst = make_sample(checker(), [ann(1, (4, 4, 10, 12))])
    src = make_sample(checker(), [ann(1, (2, 2, 20, 20))])
    out = simple_copy_paste(dst, src, rng, select_prob=0.0)
    assert np.array_equal(out.pixels, dst.pixels)
    assert out.annotations == dst.annotations


def test_scp_pastes_exact_pixels():
    dst = make_sample(checker(64, 64), [ann(1, (4, 4, 10, 12))])
    src = make_sample(checker(64, 64), [ann(7, (2, 2, 20, 20), cat=3)])
    out = simple_copy_paste(dst, src, np.random.default_rng(0), select_prob=1.0)
    pasted = [a for a in out.annotations if a.source == "pasted"]
    assert len(pasted) == 1
    p = pasted[0]
    assert p.bbox[2] == 20 and p.bbox[3] == 20 and p.category_id == 3
    x, y = int(p.bbox[0]), int(p.bbox[1])
    assert np.array_equal(out.pixels[y:y + 20, x:x + 20],
                          src.pixels[2:22, 2:22])


def test_scp_occlusion_becomes_ignore():
    dst = make_sample(checker(64, 64), [ann(1, (0, 0, 10, 10))])
    src = make_sample(checker(64, 64), [ann(2, (0, 0, 63, 63), cat=2)])
    out = simple_copy_paste(dst, src, np.random.default_rng(1), select_prob=1.0)
    original = next(a for a in out.annotations if a.id == 1)
    assert original.ignore  # a 63x63 paste always covers >70% of the corner box


# --- rare instance paste --------------------------------------------------------


def _bank():
    rng = np.random.default_rng(2)
    return [BankEntry(category_id=5, annotation_id=i,
                      patch=rng.integers(0, 255, size=(12, 16, 3), dtype=np.uint8),
                      bbox_size=(16.0, 12.0))
            for i in range(4)]


def test_paste_rare_zero_count(rng):
    pixels = checker(128, 128)
    out = paste_rare_instances(pixels, _bank(), rng, (0, 0))
    assert np.array_equal(out.pixels, pixels)
    assert out.op_log == []
    assert out.annotations == ()


def test_paste_rare_exact_event_count(rng):
    out = paste_rare_instances(checker(128, 128), _bank(), rng, (3, 3))
    (name, params), = out.op_log
    assert name == "paste_rare" and len(params["events"]) == 3
    assert out.annotations == ()  # true boxes are diagnostics only


def test_paste_rare_empty_bank(rng):
    with pytest.raises(AugmentationError):
        paste_rare_instances(checker(), [], rng, (1, 1))


# --- replay and box mapping -----------------------------------------------------


def test_replay_weak_and_strong_bit_exact():
    sample = make_sample(checker(128, 128),
                         [ann(1, (10, 10, 30, 20)), ann(2, (60, 70, 25, 25), cat=2)])
    for seed in range(5):
        out = apply_strong(sample, strong_policy(), np.random.default_rng(seed))
        again = replay(sample, out.op_log)
        assert np.array_equal(out.pixels, again.pixels)
        assert out.annotations == again.annotations


def test_replay_copy_paste_and_rare():
    dst = make_sample(checker(64, 64), [ann(1, (4, 4, 10, 12))])
    src = make_sample(checker(64, 64), [ann(9, (2, 2, 20, 20), cat=3)])
    out = simple_copy_paste(dst, src, np.random.default_rng(4), select_prob=1.0)
    again = replay(dst, out.op_log, src=src)
    assert np.array_equal(out.pixels, again.pixels)
    assert out.annotations == again.annotations

    bank = _bank()
    pasted = paste_rare_instances(checker(128, 128), bank, np.random.default_rng(5), (2, 4))
    again = replay(make_sample(checker(128, 128)), pasted.op_log, bank=bank)
    assert np.array_equal(pasted.pixels, again.pixels)


def test_flip_mapping_roundtrip():
    sample = make_sample(checker(128, 128))
    policy = weak_policy(resize_short_edge_range=(96, 96), hflip_prob=1.0,
                         photometric_prob=0.0)
    out = apply_weak(sample, policy, np.random.default_rng(0))
    boxes = [(10.0, 20.0, 30.0, 15.0), (50.0, 50.0, 8.0, 8.0)]
    sizes = op_sizes((128, 128), out.op_log)
    mapped = map_boxes_through_ops(boxes, out.op_log, sizes)
    back = invert_boxes_through_ops(mapped, out.op_log, sizes)
    for orig, rt in zip(boxes, back):
        assert rt == pytest.approx(orig, abs=1e-9)
