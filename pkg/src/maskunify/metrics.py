"""Segmentation, grounding, detection, classification and counting metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

from .mask_core import BBox, MaskLike, intersection_union

PR_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def pr_key(tau: float) -> str:
    return f"Pr@{tau:g}"


@dataclass
class EvalReport:
    metrics: dict[str, float | None]
    samples: int
    details: list[dict] | None = None

    def __getitem__(self, name: str) -> float | None:
        return self.metrics[name]

    def to_json(self) -> dict:
        out: dict[str, Any] = {"samples": self.samples, "metrics": dict(self.metrics)}
        if self.details is not None:
            out["details"] = self.details
        return out

    def table(self, title: str = "") -> str:
        """Two-row text table, ratios shown as percentages."""
        cols = list(self.metrics)
        cells = ["-" if self.metrics[c] is None else f"{100.0 * self.metrics[c]:.2f}" for c in cols]
        heads = [c if c.startswith("Pr@") else f"{c} (%)" for c in cols]
        widths = [max(len(h), len(v)) for h, v in zip(heads, cells)]
        head = " | ".join(h.rjust(w) for h, w in zip(heads, widths))
        row = " | ".join(v.rjust(w) for v, w in zip(cells, widths))
        lines = [title] if title else []
        lines += [head, "-" * len(head), row, f"samples: {self.samples}"]
        return "\n".join(lines) + "\n"


@dataclass
class SegAccumulator:
    """Mergeable running totals for mask metrics.

    Intersections, unions and threshold hits are integers and the per-pair
    IoUs are summed with ``math.fsum``, so splitting the data, accumulating
    the parts separately and merging gives exactly the sequential result.
    """

    thresholds: tuple[float, ...] = PR_THRESHOLDS
    strict: bool = True
    intersection: int = 0
    union: int = 0
    ious: list[float] = field(default_factory=list)
    hits: dict[float, int] = field(default_factory=dict)

    def add(self, pred: MaskLike, gt: MaskLike) -> float:
        inter, union = intersection_union(pred, gt)
        iou = 1.0 if union == 0 else inter / union
        self.intersection += inter
        self.union += union
        self.ious.append(iou)
        for tau in self.thresholds:
            if iou > tau or (not self.strict and iou == tau):
                self.hits[tau] = self.hits.get(tau, 0) + 1
        return iou

    def merge(self, other: "SegAccumulator") -> "SegAccumulator":
        if other.thresholds != self.thresholds or other.strict != self.strict:
            raise ValueError("cannot merge accumulators with different threshold settings")
        merged = SegAccumulator(self.thresholds, self.strict)
        merged.intersection = self.intersection + other.intersection
        merged.union = self.union + other.union
        merged.ious = self.ious + other.ious
        merged.hits = {t: self.hits.get(t, 0) + other.hits.get(t, 0) for t in self.thresholds}
        return merged

    def report(self, keep_details: bool = False) -> EvalReport:
        n = len(self.ious)
        metrics: dict[str, float | None] = {}
        for tau in self.thresholds:
            metrics[pr_key(tau)] = self.hits.get(tau, 0) / n if n else None
        if n == 0:
            metrics["oIoU"] = metrics["mIoU"] = None
        else:
            metrics["oIoU"] = 1.0 if self.union == 0 else self.intersection / self.union
            metrics["mIoU"] = math.fsum(self.ious) / n
        details = [{"iou": v} for v in self.ious] if keep_details else None
        return EvalReport(metrics, n, details)


def seg_metrics(
    pairs: Iterable[tuple[MaskLike, MaskLike]],
    thresholds: Sequence[float] = PR_THRESHOLDS,
    strict: bool = True,
    keep_details: bool = False,
) -> EvalReport:
    """Pr@tau, oIoU and mIoU over (prediction, ground truth) mask pairs.

    Pr@tau counts pairs with IoU strictly above tau unless ``strict`` is off.
    """
    acc = SegAccumulator(tuple(thresholds), strict)
    for pred, gt in pairs:
        acc.add(pred, gt)
    return acc.report(keep_details)


def bbox_iou(a: BBox, b: BBox) -> float:
    """IoU of two inclusive-pixel boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a.x_max - a.x_min + 1) * (a.y_max - a.y_min + 1)
    area_b = (b.x_max - b.x_min + 1) * (b.y_max - b.y_min + 1)
    return inter / (area_a + area_b - inter)


def grounding_metrics(pairs: Iterable[tuple[BBox | None, BBox]], threshold: float = 0.5) -> EvalReport:
    """AP50 and mIoU with one predicted box per expression; a missing box scores IoU 0."""
    ious = [0.0 if pred is None else bbox_iou(pred, gt) for pred, gt in pairs]
    n = len(ious)
    if n == 0:
        return EvalReport({"AP50": None, "mIoU": None}, 0)
    return EvalReport({"AP50": sum(1 for v in ious if v > threshold) / n, "mIoU": math.fsum(ious) / n}, n)


def _as_gt(obj) -> tuple[str, BBox]:
    if hasattr(obj, "category") and hasattr(obj, "bbox"):
        return obj.category, BBox(*obj.bbox)
    category, box = obj
    return category, BBox(*box)


def average_precision(recalls: Sequence, precisions: Sequence):
    """Area under the precision envelope (all-point interpolation).

    Works on floats or ``Fraction`` values and returns the same kind.
    """
    envelope = list(precisions)
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    ap = 0
    prev = 0
    for r, p in zip(recalls, envelope):
        ap += (r - prev) * p
        prev = r
    return ap


def _exact_ap(preds: Sequence[Sequence], gts: Sequence[Sequence], iou_threshold: float) -> dict[str, Fraction]:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists but {len(gts)} ground-truth lists")
    gt_by_cat: dict[str, dict[int, list[BBox]]] = {}
    for img, boxes in enumerate(gts):
        for obj in boxes:
            category, box = _as_gt(obj)
            gt_by_cat.setdefault(category, {}).setdefault(img, []).append(box)

    result = {}
    for category in sorted(gt_by_cat):
        per_image = gt_by_cat[category]
        n_gt = sum(len(v) for v in per_image.values())
        ranked = [
            (-float(d.score), img, k, BBox(*d.bbox))
            for img, dets in enumerate(preds)
            for k, d in enumerate(dets)
            if d.category == category
        ]
        ranked.sort(key=lambda item: item[:3])
        used = {img: [False] * len(v) for img, v in per_image.items()}
        tp = fp = 0
        recalls, precisions = [], []
        for pos, (neg_score, img, _, box) in enumerate(ranked):
            best, best_iou = -1, iou_threshold
            for j, g in enumerate(per_image.get(img, ())):
                if used[img][j]:
                    continue
                iou = bbox_iou(box, g)
                if iou > best_iou:
                    best, best_iou = j, iou
            if best >= 0:
                used[img][best] = True
                tp += 1
            else:
                fp += 1
            # equal scores form one operating point
            if pos + 1 < len(ranked) and ranked[pos + 1][0] == neg_score:
                continue
            recalls.append(Fraction(tp, n_gt))
            precisions.append(Fraction(tp, tp + fp))
        result[category] = Fraction(average_precision(recalls, precisions))
    return result


def detection_ap(preds: Sequence[Sequence], gts: Sequence[Sequence], iou_threshold: float = 0.5) -> dict[str, float]:
    """Per-category AP over images.

    ``preds[i]`` holds the detections of image ``i`` (objects with
    ``bbox``, ``category``, ``score``); ``gts[i]`` holds its ground truth as
    ``(category, bbox)`` pairs or detection-like objects. Predictions are
    visited by descending score and each is matched to the unmatched
    same-image box of its category with the highest IoU above the threshold.
    Precision and recall are integer ratios, so the curve area is summed
    exactly and rounded once.
    """
    return {c: float(v) for c, v in _exact_ap(preds, gts, iou_threshold).items()}


def detection_ap50(preds: Sequence[Sequence], gts: Sequence[Sequence]) -> float | None:
    """Mean AP at IoU 0.5 over categories present in the ground truth; None without ground truth."""
    per_cat = _exact_ap(preds, gts, 0.5)
    if not per_cat:
        return None
    return float(sum(per_cat.values(), Fraction(0)) / len(per_cat))


def multilabel_accuracy(
    pairs: Iterable[tuple[Iterable[str], Iterable[str]]],
    universe: Iterable[str],
    exact_match: bool = False,
) -> float | None:
    """Mean per-sample fraction of correct per-class decisions.

    With ``exact_match`` a sample scores 1 only when the sets are equal.
    """
    universe = set(universe)
    scores = []
    for pred, gt in pairs:
        pred, gt = set(pred), set(gt)
        extra = (pred | gt) - universe
        if extra:
            raise ValueError(f"labels outside the universe: {sorted(extra)}")
        if exact_match:
            scores.append(1.0 if pred == gt else 0.0)
        elif not universe:
            scores.append(1.0)
        else:
            scores.append((len(universe) - len(pred ^ gt)) / len(universe))
    if not scores:
        return None
    return math.fsum(scores) / len(scores)


def counting_accuracy(pairs: Iterable[tuple[int, int]], tolerance: bool = False) -> float | None:
    """Fraction of exact counts, or with ``tolerance`` of counts within ceil(10%) of the truth.

    Undefined (None) for no samples.
    """
    hits = n = 0
    for pred, gt in pairs:
        n += 1
        if tolerance:
            # ceil(gt / 10) without touching floats
            hits += abs(pred - gt) <= -(-gt // 10)
        else:
            hits += pred == gt
    return hits / n if n else None


def scene_accuracy(pairs: Iterable[tuple[str, str]]) -> float | None:
    n = hits = 0
    for pred, gt in pairs:
        n += 1
        hits += pred == gt
    return hits / n if n else None

