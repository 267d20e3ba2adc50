"""Parsing of COCO/LVIS-style annotation files and per-class location statistics."""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

RARE_MAX_IMAGES = 10      # rare: image count strictly below
FREQUENT_MIN_IMAGES = 100  # frequent: image count strictly above

GROUPS = ("rare", "common", "frequent")


class AnnotationError(ValueError):
    """Raised when an annotation file is malformed or internally inconsistent."""


@dataclass(frozen=True, slots=True)
class ObjectInstance:
    """One annotated object, with its box center normalized by image size."""

    class_id: int
    image_id: int
    center: tuple[float, float]
    # normalized (cx, cy, w, h); kept so detections can be IoU-matched later
    box: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        ux, uy = self.center
        if not (0.0 <= ux <= 1.0 and 0.0 <= uy <= 1.0):
            raise ValueError(f"normalized center out of range: {self.center}")


@dataclass
class Dataset:
    instances: list[ObjectInstance]
    categories: dict[int, str]
    images: dict[int, tuple[int, int]]  # image_id -> (width, height)


@dataclass(frozen=True)
class ClassFrequency:
    class_id: int
    instance_count: int
    image_count: int
    group: str


@dataclass
class SpatialHistogram:
    """Occurrence counts on the normalized G x G grid; counts[j][i] is cell (i, j)."""

    grid_size: int
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def group_for_image_count(image_count: int) -> str:
    if image_count < RARE_MAX_IMAGES:
        return "rare"
    if image_count > FREQUENT_MIN_IMAGES:
        return "frequent"
    return "common"


def load_annotations(path: str | Path, include_crowd: bool = False) -> Dataset:
    """Parse a COCO/LVIS-style JSON annotation file into a Dataset.

    Box centers are normalized by image width/height onto the unit square.
    Crowd-flagged annotations are skipped unless ``include_crowd`` is set;
    degenerate boxes (w <= 0 or h <= 0) are always skipped and counted.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise AnnotationError(f"{path}: expected a JSON object at top level")

    images: dict[int, tuple[int, int]] = {}
    for rec in raw.get("images", []):
        try:
            img_id, w, h = int(rec["id"]), int(rec["width"]), int(rec["height"])
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"{path}: bad image record {rec!r}") from exc
        if w <= 0 or h <= 0:
            raise AnnotationError(f"{path}: image {img_id} has non-positive size {w}x{h}")
        images[img_id] = (w, h)

    categories: dict[int, str] = {}
    for rec in raw.get("categories", []):
        try:
            categories[int(rec["id"])] = str(rec.get("name", rec["id"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"{path}: bad category record {rec!r}") from exc

    instances: list[ObjectInstance] = []
    n_degenerate = 0
    n_crowd = 0
    for rec in raw.get("annotations", []):
        ann_id = rec.get("id", "?")
        try:
            image_id = int(rec["image_id"])
            class_id = int(rec["category_id"])
            x, y, w, h = (float(v) for v in rec["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"{path}: malformed annotation {ann_id}") from exc
        if image_id not in images:
            raise AnnotationError(f"{path}: annotation {ann_id} references unknown image {image_id}")
        if class_id not in categories:
            raise AnnotationError(f"{path}: annotation {ann_id} references unknown category {class_id}")
        if rec.get("iscrowd", 0) and not include_crowd:
            n_crowd += 1
            continue
        if w <= 0 or h <= 0:
            n_degenerate += 1
            continue
        img_w, img_h = images[image_id]
        # boxes may poke past the image border; the center is clamped in-square
        cx = min(max((x + w / 2.0) / img_w, 0.0), 1.0)
        cy = min(max((y + h / 2.0) / img_h, 0.0), 1.0)
        instances.append(
            ObjectInstance(
                class_id=class_id,
                image_id=image_id,
                center=(cx, cy),
                box=(cx, cy, w / img_w, h / img_h),
            )
        )

    if n_degenerate:
        logger.info("%s: skipped %d degenerate boxes", path.name, n_degenerate)
    if n_crowd:
        logger.info("%s: skipped %d crowd annotations", path.name, n_crowd)
    return Dataset(instances=instances, categories=categories, images=images)


def write_annotations(ds: Dataset, path: str | Path) -> None:
    """Serialize a Dataset back to the COCO-style JSON schema."""
    out = {
        "images": [
            {"id": i, "width": w, "height": h} for i, (w, h) in sorted(ds.images.items())
        ],
        "categories": [{"id": i, "name": n} for i, n in sorted(ds.categories.items())],
        "annotations": [],
    }
    for k, inst in enumerate(ds.instances):
        if inst.box is None:
            raise ValueError(f"instance {k} has no box; cannot serialize")
        img_w, img_h = ds.images[inst.image_id]
        cx, cy, bw, bh = inst.box
        out["annotations"].append(
            {
                "id": k + 1,
                "image_id": inst.image_id,
                "category_id": inst.class_id,
                "bbox": [
                    (cx - bw / 2.0) * img_w,
                    (cy - bh / 2.0) * img_h,
                    bw * img_w,
                    bh * img_h,
                ],
                "iscrowd": 0,
            }
        )
    with open(path, "w") as fh:
        json.dump(out, fh)


def compute_class_frequencies(ds: Dataset) -> dict[int, ClassFrequency]:
    """Instance and distinct-image counts per category, with the rare/common/frequent group.

    Categories with no instances are retained with zero counts (group rare).
    """
    inst_counts: dict[int, int] = defaultdict(int)
    image_sets: dict[int, set[int]] = defaultdict(set)
    for inst in ds.instances:
        inst_counts[inst.class_id] += 1
        image_sets[inst.class_id].add(inst.image_id)

    freqs: dict[int, ClassFrequency] = {}
    for class_id in sorted(set(ds.categories) | set(inst_counts)):
        n_img = len(image_sets.get(class_id, ()))
        freqs[class_id] = ClassFrequency(
            class_id=class_id,
            instance_count=inst_counts.get(class_id, 0),
            image_count=n_img,
            group=group_for_image_count(n_img),
        )
    return freqs


def collect_centers(ds: Dataset, class_filter: int | None = None) -> np.ndarray:
    """Normalized centers as an (n, 2) array, optionally restricted to one class."""
    pts = [
        inst.center
        for inst in ds.instances
        if class_filter is None or inst.class_id == class_filter
    ]
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def cell_indices(points: np.ndarray, grid_size: int) -> np.ndarray:
    """Grid cell (i, j) per point; the closed top edge u = 1 clamps into the last cell."""
    if grid_size < 1:
        raise ValueError(f"grid size must be >= 1, got {grid_size}")
    idx = np.floor(points * grid_size).astype(np.int64)
    return np.minimum(idx, grid_size - 1)


def spatial_histogram(
    ds: Dataset, class_filter: int | None = None, grid_size: int = 64
) -> SpatialHistogram:
    """Count object centers per cell of the normalized square grid.

    With no class filter all classes aggregate into the generic-object
    location distribution.
    """
    pts = collect_centers(ds, class_filter)
    counts = np.zeros((grid_size, grid_size), dtype=np.int64)
    if len(pts):
        idx = cell_indices(pts, grid_size)
        np.add.at(counts, (idx[:, 1], idx[:, 0]), 1)
    return SpatialHistogram(grid_size=grid_size, counts=counts)


def save_class_stats_csv(
    freqs: dict[int, ClassFrequency], categories: dict[int, str], path: str | Path
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "name", "instance_count", "image_count", "group"])
        for class_id in sorted(freqs):
            f = freqs[class_id]
            writer.writerow(
                [class_id, categories.get(class_id, ""), f.instance_count, f.image_count, f.group]
            )


def save_histogram_csv(hist: SpatialHistogram, path: str | Path) -> None:
    """Write the G x G count matrix, one grid row (fixed j) per CSV row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in hist.counts:
            writer.writerow([int(v) for v in row])


def save_histogram_json(hist: SpatialHistogram, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(
            {"grid_size": hist.grid_size, "counts": hist.counts.tolist()},
            fh,
        )
