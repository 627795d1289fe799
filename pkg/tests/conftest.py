import numpy as np
import pytest

from simltd.dataset import DatasetIndex, ImageRecord, InstanceAnnotation
from simltd.synth import SynthSpec, generate_longtail_dataset, generate_unlabeled_pool


@pytest.fixture(scope="session")
def desk_spec():
    return SynthSpec()


@pytest.fixture(scope="session")
def desk_benchmark(desk_spec):
    """The LT-Shapes desk benchmark with embedded pixels, generated once."""
    train, val = generate_longtail_dataset(desk_spec)
    return train, val


@pytest.fixture(scope="session")
def desk_unlabeled(desk_spec):
    return generate_unlabeled_pool(desk_spec)


def make_index(image_sizes, ann_specs, num_classes, role="labeled"):
    """Small hand-built index: ann_specs are (image_id, category_id, bbox)."""
    images = tuple(
        ImageRecord(id=i + 1, width=w, height=h)
        for i, (w, h) in enumerate(image_sizes))
    annotations = tuple(
        InstanceAnnotation(id=j + 1, image_id=img, category_id=cat,
                           bbox=tuple(float(v) for v in bbox),
                           area=float(bbox[2] * bbox[3]))
        for j, (img, cat, bbox) in enumerate(ann_specs))
    categories = tuple((c + 1, f"c{c + 1}") for c in range(num_classes))
    return DatasetIndex(images=images, annotations=annotations,
                        categories=categories, role=role)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
