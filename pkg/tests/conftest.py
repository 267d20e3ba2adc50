import json

import numpy as np
import pytest

from fracal.annotations import Dataset, ObjectInstance


@pytest.fixture
def tiny_annotation_file(tmp_path):
    """Writes a small COCO-style annotation file and returns its path."""

    def _write(images=None, annotations=None, categories=None, name="ann.json"):
        doc = {
            "images": images
            if images is not None
            else [{"id": 1, "width": 100, "height": 200}],
            "annotations": annotations if annotations is not None else [],
            "categories": categories
            if categories is not None
            else [{"id": 1, "name": "thing"}, {"id": 2, "name": "stuff"}],
        }
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return path

    return _write


def make_dataset(centers_by_class, images=None):
    """Dataset from {class_id: [(cx, cy), ...]}, one shared image unless given."""
    images = images or {1: (100, 100)}
    image_ids = list(images)
    instances = []
    for class_id, centers in centers_by_class.items():
        for k, (cx, cy) in enumerate(centers):
            instances.append(
                ObjectInstance(
                    class_id=class_id,
                    image_id=image_ids[k % len(image_ids)],
                    center=(cx, cy),
                    box=(cx, cy, 0.1, 0.1),
                )
            )
    categories = {c: f"c{c}" for c in centers_by_class}
    return Dataset(instances=instances, categories=categories, images=images)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
