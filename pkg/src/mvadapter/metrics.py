"""Instance-segmentation evaluation: mask IoU, matching, AP and mAP.

Everything the original full-scale benchmarks leave unstated is pinned to
the COCO conventions here, because that is the only reading compatible with
the evaluators the reference numbers were produced by:

* predictions are matched greedily in descending score order (ties broken
  by input order) to the unmatched same-category ground truth of highest
  IoU at or above the threshold;
* AP uses 101-point interpolation over the recall grid 0.00, 0.01, ..., 1.00;
* the default threshold set is 0.50, 0.55, ..., 0.95;
* per-threshold AP is averaged over categories that have a defined AP.

A category's AP is defined when the evaluated set contains at least one of
its ground truths or predictions; with ground truths it is the interpolated
AP (0.0 when there are no predictions), without ground truths it is 0.0
when spurious predictions exist, and it is skipped entirely when the
category appears nowhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BinaryMask",
    "Instance",
    "APReport",
    "COCO_THRESHOLDS",
    "mask_iou",
    "match_instances",
    "average_precision",
    "evaluate",
    "mask_to_rle",
    "rle_to_mask",
    "AnnotationFormatError",
    "write_annotations",
    "read_annotations",
    "group_by_image",
]

COCO_THRESHOLDS: tuple[float, ...] = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Row-major boolean pixel grid."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.dtype != np.bool_:
            bits = bits.astype(bool)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValueError(f"mask must be a non-empty 2-D grid, got shape {bits.shape}")
        bits = np.ascontiguousarray(bits)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True, eq=False)
class Instance:
    """One segmentation instance; ``score`` is present iff it is a prediction."""

    mask: BinaryMask
    category: int
    score: float | None = None

    def __post_init__(self):
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; 0.0 when both masks are empty."""
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"mask extents differ: {(a.height, a.width)} vs {(b.height, b.width)}"
        )
    inter = int(np.logical_and(a.bits, b.bits).sum())
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 0.0
    return inter / union


def match_instances(
    preds: Sequence[Instance],
    gts: Sequence[Instance],
    iou_threshold: float,
) -> list[tuple[int, int | None]]:
    """Greedy score-descending matching within equal category ids.

    Predictions are visited in descending score order (ties broken by input
    order); each takes the unmatched same-category ground truth of highest
    IoU provided that IoU reaches the threshold (IoU ties go to the lowest
    ground-truth index). Ground truths match at most once, so duplicates
    become false positives. Returns ``(pred index, gt index or None)``
    pairs in visiting order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    for inst in preds:
        if inst.score is None:
            raise ValueError("predictions must carry a score")
    extents = {(inst.mask.height, inst.mask.width) for inst in list(preds) + list(gts)}
    if len(extents) > 1:
        raise ValueError(f"all masks must share extents, got {sorted(extents)}")

    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(gts)
    result: list[tuple[int, int | None]] = []
    for pi in order:
        pred = preds[pi]
        best: int | None = None
        best_iou = 0.0
        for gi, gt in enumerate(gts):
            if taken[gi] or gt.category != pred.category:
                continue
            iou = mask_iou(pred.mask, gt.mask)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = gi, iou
        if best is not None:
            taken[best] = True
        result.append((pi, best))
    return result


def _interpolated_ap(hits: list[tuple[float, int, int, bool]], n_gt: int) -> float:
    """101-point interpolated AP for one category.

    ``hits`` holds ``(score, image index, input index, is_tp)`` per
    prediction; the global ranking sorts by descending score with ties
    broken by image then input order.
    """
    hits = sorted(hits, key=lambda h: (-h[0], h[1], h[2]))
    tp = np.cumsum([1 if h[3] else 0 for h in hits])
    ranks = np.arange(1, len(hits) + 1)
    precision = tp / ranks
    recall = tp / n_gt
    # Running max of precision from the right: best precision at >= recall.
    best_from = np.maximum.accumulate(precision[::-1])[::-1]
    points: list[float] = []
    for step in range(101):
        r = step / 100.0
        j = int(np.searchsorted(recall, r, side="left"))
        points.append(float(best_from[j]) if j < len(hits) else 0.0)
    return math.fsum(points) / 101.0


def average_precision(
    preds_by_image: Sequence[Sequence[Instance]],
    gts_by_image: Sequence[Sequence[Instance]],
    iou_threshold: float,
) -> float | None:
    """AP at one IoU threshold over an image set.

    Computes per-category AP across all images (predictions ranked by
    score globally) and averages over the categories with a defined AP.
    Returns ``None`` only when no category appears in either list.
    """
    if len(preds_by_image) != len(gts_by_image):
        raise ValueError(
            f"prediction and ground-truth lists cover {len(preds_by_image)} vs "
            f"{len(gts_by_image)} images"
        )
    categories = sorted(
        {inst.category for image in preds_by_image for inst in image}
        | {inst.category for image in gts_by_image for inst in image}
    )
    if not categories:
        return None

    hits: dict[int, list[tuple[float, int, int, bool]]] = {c: [] for c in categories}
    n_gt = {c: 0 for c in categories}
    for img_idx, (preds, gts) in enumerate(zip(preds_by_image, gts_by_image)):
        for gt in gts:
            n_gt[gt.category] += 1
        matched = dict(match_instances(preds, gts, iou_threshold))
        for pi, pred in enumerate(preds):
            hits[pred.category].append((pred.score, img_idx, pi, matched[pi] is not None))

    per_category: list[float] = []
    for cat in categories:
        if n_gt[cat] == 0:
            per_category.append(0.0)  # spurious-only category
        elif not hits[cat]:
            per_category.append(0.0)  # no predictions at all
        else:
            per_category.append(_interpolated_ap(hits[cat], n_gt[cat]))
    return math.fsum(per_category) / len(per_category)


@dataclass(frozen=True)
class APReport:
    """AP per IoU threshold plus the aggregate mean and the 0.50/0.75 cuts."""

    thresholds: tuple[float, ...]
    ap_per_threshold: tuple[float, ...]
    map: float = field(init=False)
    ap50: float | None = field(init=False)
    ap75: float | None = field(init=False)

    def __post_init__(self):
        if len(self.thresholds) != len(self.ap_per_threshold):
            raise ValueError("one AP value per threshold required")
        object.__setattr__(self, "map", math.fsum(self.ap_per_threshold) / len(self.thresholds))
        object.__setattr__(self, "ap50", self._at(0.50))
        object.__setattr__(self, "ap75", self._at(0.75))

    def _at(self, threshold: float) -> float | None:
        for t, ap in zip(self.thresholds, self.ap_per_threshold):
            if abs(t - threshold) < 1e-9:
                return ap
        return None

    def as_dict(self) -> dict:
        return {
            "map": self.map,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "per_threshold": {f"{t:.2f}": ap for t, ap in zip(self.thresholds, self.ap_per_threshold)},
        }


def evaluate(
    preds_by_image: Sequence[Sequence[Instance]],
    gts_by_image: Sequence[Sequence[Instance]],
    thresholds: Sequence[float] | None = None,
) -> APReport:
    """AP across a threshold set, aggregated into an :class:`APReport`.

    ``thresholds`` defaults to 0.50:0.05:0.95 and must be non-empty,
    strictly increasing and within (0, 1]. Degenerate inputs with no
    instances at all evaluate to 0 everywhere.
    """
    ts = COCO_THRESHOLDS if thresholds is None else tuple(thresholds)
    if not ts:
        raise ValueError("threshold list must be non-empty")
    if any(not 0.0 < t <= 1.0 for t in ts):
        raise ValueError(f"thresholds must lie in (0, 1], got {ts}")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError(f"thresholds must be strictly increasing, got {ts}")
    aps = []
    for t in ts:
        ap = average_precision(preds_by_image, gts_by_image, t)
        aps.append(0.0 if ap is None else ap)
    return APReport(thresholds=ts, ap_per_threshold=tuple(aps))


# ---------------------------------------------------------------------------
# interchange format: run-length masks in JSON lines


def mask_to_rle(mask: BinaryMask) -> list[int]:
    """Row-major run lengths, starting with the count of leading zeros."""
    flat = mask.bits.reshape(-1).astype(np.int8)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_to_mask(counts: Sequence[int], height: int, width: int) -> BinaryMask:
    if height < 1 or width < 1:
        raise ValueError(f"mask extents must be >= 1, got {height}x{width}")
    counts = list(counts)
    if not counts:
        raise ValueError("empty run-length list")
    if any((not isinstance(c, int)) or isinstance(c, bool) or c < 0 for c in counts):
        raise ValueError(f"run lengths must be non-negative integers, got {counts}")
    total = sum(counts)
    if total != height * width:
        raise ValueError(f"run lengths sum to {total}, expected {height * width}")
    values = np.arange(len(counts)) % 2
    flat = np.repeat(values, counts).astype(bool)
    return BinaryMask(flat.reshape(height, width))


class AnnotationFormatError(ValueError):
    """A JSON-lines annotation file failed validation at a specific line."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


def write_annotations(path, records: Iterable[tuple[object, Instance]]) -> None:
    """Write ``(image_id, instance)`` records, one canonical JSON per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, inst in records:
            obj: dict = {"image_id": image_id, "category": inst.category}
            if inst.score is not None:
                obj["score"] = float(inst.score)
            obj["mask"] = {
                "h": inst.mask.height,
                "w": inst.mask.width,
                "rle": mask_to_rle(inst.mask),
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def read_annotations(path) -> list[tuple[object, Instance]]:
    records: list[tuple[object, Instance]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationFormatError(line_number, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise AnnotationFormatError(line_number, "expected a JSON object")
            try:
                image_id = obj["image_id"]
                category = obj["category"]
                mask_obj = obj["mask"]
                h, w, counts = mask_obj["h"], mask_obj["w"], mask_obj["rle"]
            except (KeyError, TypeError) as exc:
                raise AnnotationFormatError(line_number, f"missing field {exc}") from exc
            if not isinstance(category, int) or isinstance(category, bool):
                raise AnnotationFormatError(line_number, f"category must be an integer, got {category!r}")
            score = obj.get("score")
            if score is not None:
                if isinstance(score, bool) or not isinstance(score, (int, float)):
                    raise AnnotationFormatError(line_number, f"score must be a number, got {score!r}")
                score = float(score)
                if not 0.0 <= score <= 1.0:
                    raise AnnotationFormatError(line_number, f"score {score} outside [0, 1]")
            try:
                mask = rle_to_mask(counts, h, w)
            except (ValueError, TypeError) as exc:
                raise AnnotationFormatError(line_number, f"malformed RLE mask: {exc}") from exc
            records.append((image_id, Instance(mask=mask, category=category, score=score)))
    return records


def group_by_image(
    records: Sequence[tuple[object, Instance]],
    image_ids: Sequence[object],
) -> list[list[Instance]]:
    """Bucket records into per-image lists following ``image_ids`` order."""
    index = {image_id: i for i, image_id in enumerate(image_ids)}
    grouped: list[list[Instance]] = [[] for _ in image_ids]
    for image_id, inst in records:
        if image_id not in index:
            raise ValueError(f"record references unknown image id {image_id!r}")
        grouped[index[image_id]].append(inst)
    return grouped
