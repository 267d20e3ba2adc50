"""Class-wise NMS and per-class / grouped average precision."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .annotations import ClassFrequency, Dataset, GROUPS

DEFAULT_NMS_IOU = 0.3
DEFAULT_MATCH_IOU = 0.5
DEFAULT_MAX_PER_IMAGE = 300


@dataclass(frozen=True, slots=True)
class Detection:
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]  # normalized (cx, cy, w, h)
    score: float


@dataclass
class EvalReport:
    ap_overall: float
    ap_rare: float
    ap_common: float
    ap_frequent: float
    per_class: dict[int, float]
    counts: dict[str, int]


def iou(a, b) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes; 0 when the union is empty."""
    ax1, ay1 = a[0] - a[2] / 2.0, a[1] - a[3] / 2.0
    ax2, ay2 = a[0] + a[2] / 2.0, a[1] + a[3] / 2.0
    bx1, by1 = b[0] - b[2] / 2.0, b[1] - b[3] / 2.0
    bx2, by2 = b[0] + b[2] / 2.0, b[1] + b[3] / 2.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        inter = 0.0
    else:
        inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _ranked(dets: list[Detection]) -> list[int]:
    # score descending; ties broken by lower class_id, then input order
    return sorted(range(len(dets)), key=lambda k: (-dets[k].score, dets[k].class_id, k))


def nms(dets: list[Detection], iou_threshold: float = DEFAULT_NMS_IOU, classwise: bool = True) -> list[Detection]:
    """Greedy score-descending suppression, per image (and per class when classwise)."""
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    buckets: dict[tuple, list[int]] = defaultdict(list)
    for k in _ranked(dets):
        d = dets[k]
        key = (d.image_id, d.class_id) if classwise else (d.image_id,)
        buckets[key].append(k)

    keep: list[int] = []
    for order in buckets.values():
        kept_boxes: list[tuple] = []
        for k in order:
            box = dets[k].box
            if all(iou(box, kb) <= iou_threshold for kb in kept_boxes):
                keep.append(k)
                kept_boxes.append(box)
    keep.sort()
    return [dets[k] for k in keep]


def detections_from_scores(records, class_ids, score_threshold: float = 0.0) -> list[Detection]:
    """Expand scored proposal records into one candidate detection per foreground class.

    ``class_ids`` maps vector positions to catalog category ids; background
    entries past the foreground block are ignored.
    """
    class_ids = [int(c) for c in class_ids]
    dets = []
    for rec in records:
        for k, cid in enumerate(class_ids):
            s = float(rec.scores[k])
            if s >= score_threshold:
                dets.append(Detection(image_id=rec.image_id, class_id=cid, box=rec.box, score=s))
    return dets


def cap_per_image(dets: list[Detection], max_per_image: int = DEFAULT_MAX_PER_IMAGE) -> list[Detection]:
    """Keep the top-scoring detections per image."""
    by_image: dict[int, list[int]] = defaultdict(list)
    for k in _ranked(dets):
        by_image[dets[k].image_id].append(k)
    keep: list[int] = []
    for order in by_image.values():
        keep.extend(order[:max_per_image])
    keep.sort()
    return [dets[k] for k in keep]


def average_precision(
    dets: list[Detection],
    gts: Dataset,
    class_id: int,
    iou_match: float = DEFAULT_MATCH_IOU,
) -> float | None:
    """101-point interpolated AP at a single IoU threshold for one class.

    Detections are matched greedily in score order to the best unmatched
    ground truth of the class in the same image. Returns None when the class
    has no ground truth.
    """
    if not (0.0 < iou_match <= 1.0):
        raise ValueError(f"iou_match must be in (0, 1], got {iou_match}")
    gt_boxes: dict[int, list] = defaultdict(list)
    npos = 0
    for inst in gts.instances:
        if inst.class_id != class_id:
            continue
        if inst.box is None:
            raise ValueError(f"ground-truth instance of class {class_id} carries no box")
        gt_boxes[inst.image_id].append(inst.box)
        npos += 1
    if npos == 0:
        return None

    cls_dets = [d for d in dets if d.class_id == class_id]
    order = _ranked(cls_dets)
    matched: dict[int, list[bool]] = {i: [False] * len(b) for i, b in gt_boxes.items()}
    tp = np.zeros(len(order))
    for rank, k in enumerate(order):
        d = cls_dets[k]
        best, best_j = 0.0, -1
        for j, gb in enumerate(gt_boxes.get(d.image_id, ())):
            if matched[d.image_id][j]:
                continue
            v = iou(d.box, gb)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_match:
            matched[d.image_id][best_j] = True
            tp[rank] = 1.0

    if len(order) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / npos
    precision = cum_tp / np.arange(1, len(order) + 1)
    return _ap_101(recall, precision)


def _ap_101(recall: np.ndarray, precision: np.ndarray) -> float:
    # precision envelope from the right, sampled at 101 recall thresholds
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    thresholds = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, thresholds, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def evaluate(
    dets: list[Detection],
    gts: Dataset,
    groups: dict[int, ClassFrequency],
    iou_match: float = DEFAULT_MATCH_IOU,
    counts: dict[str, int] | None = None,
) -> EvalReport:
    """Per-class AP plus unweighted means overall and per frequency group.

    Classes without ground truth are excluded from every mean. Groups come
    from the train-split frequencies used for the calibration weights.
    """
    per_class: dict[int, float] = {}
    for class_id in sorted(gts.categories):
        ap = average_precision(dets, gts, class_id, iou_match=iou_match)
        if ap is not None:
            per_class[class_id] = ap

    def mean_over(ids) -> float:
        vals = [per_class[c] for c in ids]
        return float(np.mean(vals)) if vals else 0.0

    by_group = {g: [] for g in GROUPS}
    for class_id in per_class:
        freq = groups.get(class_id)
        if freq is not None:
            by_group[freq.group].append(class_id)
    return EvalReport(
        ap_overall=mean_over(per_class),
        ap_rare=mean_over(by_group["rare"]),
        ap_common=mean_over(by_group["common"]),
        ap_frequent=mean_over(by_group["frequent"]),
        per_class=per_class,
        counts=counts or {},
    )


def run_pipeline(
    dets: list[Detection],
    gts: Dataset,
    groups: dict[int, ClassFrequency],
    nms_iou: float = DEFAULT_NMS_IOU,
    iou_match: float = DEFAULT_MATCH_IOU,
    score_threshold: float = 0.0,
    max_per_image: int = DEFAULT_MAX_PER_IMAGE,
) -> EvalReport:
    """Score filter, class-wise NMS, per-image cap, then evaluation."""
    candidates = [d for d in dets if d.score >= score_threshold]
    kept = cap_per_image(nms(candidates, iou_threshold=nms_iou, classwise=True), max_per_image)
    counts = {"input": len(dets), "kept": len(kept), "suppressed": len(candidates) - len(kept)}
    return evaluate(kept, gts, groups, iou_match=iou_match, counts=counts)


# --- detections file (JSON Lines) --------------------------------------------


def write_detections(path, dets: list[Detection]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(
                json.dumps(
                    {
                        "image_id": d.image_id,
                        "class_id": d.class_id,
                        "box": [float(v) for v in d.box],
                        "score": float(d.score),
                    }
                )
                + "\n"
            )


def read_detections(path) -> list[Detection]:
    dets = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                dets.append(
                    Detection(
                        image_id=int(row["image_id"]),
                        class_id=int(row["class_id"]),
                        box=tuple(float(v) for v in row["box"]),
                        score=float(row["score"]),
                    )
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}: bad detection record on line {i + 1}") from exc
    return dets


def report_to_dict(report: EvalReport) -> dict:
    return {
        "ap_overall": report.ap_overall,
        "ap_rare": report.ap_rare,
        "ap_common": report.ap_common,
        "ap_frequent": report.ap_frequent,
        "per_class": {str(c): v for c, v in sorted(report.per_class.items())},
        "counts": report.counts,
    }


def format_report_table(report: EvalReport) -> str:
    lines = [
        f"{'metric':<12}{'AP':>8}",
        f"{'overall':<12}{report.ap_overall:>8.4f}",
        f"{'rare':<12}{report.ap_rare:>8.4f}",
        f"{'common':<12}{report.ap_common:>8.4f}",
        f"{'frequent':<12}{report.ap_frequent:>8.4f}",
    ]
    if report.counts:
        lines.append(
            "detections: "
            + ", ".join(f"{k}={v}" for k, v in sorted(report.counts.items()))
        )
    return "\n".join(lines)
