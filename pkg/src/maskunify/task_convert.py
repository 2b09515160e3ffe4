"""Turn per-class probability maps into outputs for downstream vision tasks.

Every converter here consumes the maps a referring-segmentation model emits
for expressions such as ``"All {c} in the image"`` and derives semantic
segmentation, boxes, labels, counts or a caption from them without any
task-specific model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np
from scipy import ndimage
from skimage.morphology import h_maxima

from .mask_core import (
    EIGHT_WAY,
    BBox,
    BinaryMask,
    ProbMap,
    ShapeMismatchError,
    binarize,
    label_components,
    mask_to_bbox,
)

__all__ = [
    "ConversionConfig",
    "Detection",
    "SemSegMap",
    "aggregate_confidence",
    "semantic_segmentation",
    "mask_to_bbox",
    "ground_expression",
    "detect_objects",
    "multilabel_classify",
    "scene_classify",
    "count_objects",
    "generate_caption",
    "grid_position",
]

Strategy = Literal["prob-level", "mask-level"]
ClassMaps = Sequence[tuple[str, ProbMap]]

NO_OBJECTS_CAPTION = "No salient objects detected."


@dataclass(frozen=True)
class ConversionConfig:
    tau_seg: float = 0.5
    tau_cls: float = 0.5
    # weight of mean vs max pooling for the gate/multi-label and for scene choice
    lambda_multilabel: float = 0.5
    lambda_scene: float = 1.0
    classification_strategy: Strategy = "prob-level"
    area_threshold_masklevel: int = 0
    refine: bool = True
    refine_radius: float = 5.0
    # marker surface smoothing (px) and minimum peak prominence
    refine_sigma: float = 1.0
    refine_prominence: float = 0.5
    connectivity: int = EIGHT_WAY

    def __post_init__(self):
        for name in ("tau_seg", "tau_cls", "lambda_multilabel", "lambda_scene"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.classification_strategy not in ("prob-level", "mask-level"):
            raise ValueError(f"unknown classification strategy {self.classification_strategy!r}")
        if self.area_threshold_masklevel < 0:
            raise ValueError("area_threshold_masklevel must be >= 0")
        for name in ("refine_radius", "refine_sigma", "refine_prominence"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    category: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if not self.bbox.is_valid():
            raise ValueError(f"invalid box {self.bbox}")

    def to_json(self) -> dict:
        return {"bbox": list(self.bbox), "category": self.category, "score": self.score}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Detection":
        return cls(BBox(*(int(v) for v in obj["bbox"])), str(obj["category"]), float(obj.get("score", 1.0)))


@dataclass(frozen=True, eq=False)
class SemSegMap:
    """Label raster: 0 is background, ``k`` means ``categories[k - 1]``."""

    labels: np.ndarray
    categories: tuple[str, ...]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def label_at(self, row: int, col: int) -> str | None:
        k = int(self.labels[row, col])
        return None if k == 0 else self.categories[k - 1]

    def mask_for(self, category: str) -> BinaryMask:
        k = self.categories.index(category) + 1
        return BinaryMask(self.labels == k)


def aggregate_confidence(prob: ProbMap, lam: float) -> float:
    """Blend of average and max pooling: ``lam * mean + (1 - lam) * max``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    values = prob.values
    score = lam * float(values.mean()) + (1.0 - lam) * float(values.max())
    # rounding can push a uniform map a hair outside [min, max]
    return min(max(score, float(values.min())), float(values.max()))


def _check_maps(per_class: ClassMaps) -> list[tuple[str, ProbMap]]:
    seen = set()
    shape = None
    for category, prob in per_class:
        if category in seen:
            raise ValueError(f"duplicate category {category!r}")
        seen.add(category)
        if shape is None:
            shape = prob.shape
        elif prob.shape != shape:
            raise ShapeMismatchError(f"map for {category!r} has shape {prob.shape}, expected {shape}")
    return sorted(per_class, key=lambda item: item[0])


def _passes_gate(prob: ProbMap, config: ConversionConfig) -> bool:
    return aggregate_confidence(prob, config.lambda_multilabel) >= config.tau_seg


def semantic_segmentation(per_class: ClassMaps, config: ConversionConfig = ConversionConfig()) -> SemSegMap:
    """Merge gated class masks into one label map.

    A class whose image-level confidence falls below ``tau_seg`` contributes
    nothing. Pixels claimed by several classes go to the class with the
    highest probability there; exact ties go to the smallest identifier.
    """
    maps = _check_maps(per_class)
    if not maps:
        raise ValueError("at least one class map is required")
    categories = tuple(c for c, _ in maps)
    height, width = maps[0][1].shape
    best = np.full((height, width), -1.0)
    labels = np.zeros((height, width), dtype=np.int32)
    for k, (_, prob) in enumerate(maps, start=1):
        if not _passes_gate(prob, config):
            continue
        values = prob.values
        claim = (values >= config.tau_seg) & (values > best)
        best[claim] = values[claim]
        labels[claim] = k
    labels.setflags(write=False)
    return SemSegMap(labels, categories)


def ground_expression(prob: ProbMap, config: ConversionConfig = ConversionConfig()) -> BBox | None:
    """One box per referring expression: the extent of the whole binarized mask."""
    return mask_to_bbox(binarize(prob, config.tau_seg))


def _split_markers(surface: np.ndarray, component: np.ndarray, radius: float, prominence: float) -> list[np.ndarray]:
    """Marker regions for one component after suppression within ``radius``.

    Markers are the maxima of ``surface`` inside the component that rise at
    least ``prominence`` above the saddle to any higher peak (plateaus count
    once), visited by descending peak value; a marker within ``radius`` of
    an already kept one is dropped.
    """
    masked = np.where(component, surface, 0.0)
    if prominence > 0:
        peaks = h_maxima(masked, prominence).astype(bool)
    else:
        peaks = masked == ndimage.maximum_filter(masked, size=3)
    peaks &= component
    plateau, n = ndimage.label(peaks, structure=np.ones((3, 3), dtype=bool))
    if n <= 1:
        return []
    ids = np.arange(1, n + 1)
    heights = ndimage.maximum(surface, plateau, ids)
    centers = ndimage.center_of_mass(peaks, plateau, ids)
    order = sorted(range(n), key=lambda i: (-heights[i], centers[i][0], centers[i][1]))
    kept: list[int] = []
    for i in order:
        cy, cx = centers[i]
        if all(math.hypot(cy - centers[j][0], cx - centers[j][1]) > radius for j in kept):
            kept.append(i)
    if len(kept) < 2:
        return []
    return [plateau == ids[i] for i in kept]


def _refined_instances(prob: ProbMap, mask: np.ndarray, config: ConversionConfig) -> list[np.ndarray]:
    """Instance pixel sets for one class, in canonical component order.

    With refinement on, each connected component that holds several
    well-separated markers is cut into a nearest-marker partition. The marker
    surface is the (lightly smoothed) probability weighted by the distance to
    the mask boundary, so flat, saturated maps still peak at object centres.
    """
    labels, order = label_components(mask, config.connectivity)
    if not order:
        return []
    if not config.refine:
        return _ordered_parts([labels == lab for lab in order], config)

    slices = ndimage.find_objects(labels)
    parts: list[np.ndarray] = []
    for lab in order:
        sl = slices[lab - 1]
        comp = labels[sl] == lab
        values = prob.values[sl]
        if config.refine_sigma > 0:
            values = ndimage.gaussian_filter(values, config.refine_sigma, mode="nearest")
        surface = values * ndimage.distance_transform_edt(np.pad(comp, 1))[1:-1, 1:-1]
        markers = _split_markers(surface, comp, config.refine_radius, config.refine_prominence)
        if not markers:
            full = np.zeros(mask.shape, dtype=bool)
            full[sl] = comp
            parts.append(full)
            continue
        seeds = np.zeros(comp.shape, dtype=np.int32)
        for k, m in enumerate(markers, start=1):
            seeds[m] = k
        _, (iy, ix) = ndimage.distance_transform_edt(seeds == 0, return_indices=True)
        owner = seeds[iy, ix]
        for k in range(1, len(markers) + 1):
            piece = comp & (owner == k)
            if piece.any():
                full = np.zeros(mask.shape, dtype=bool)
                full[sl] = piece
                parts.append(full)
    return _ordered_parts(parts, config)


def _ordered_parts(parts: list[np.ndarray], config: ConversionConfig) -> list[np.ndarray]:
    def key(bits: np.ndarray):
        rows = np.flatnonzero(bits.any(axis=1))
        cols = np.flatnonzero(bits.any(axis=0))
        return (int(rows[0]), int(cols[0]), int(np.flatnonzero(bits.ravel())[0]))

    return sorted(parts, key=key)


def detect_objects(per_class: ClassMaps, config: ConversionConfig = ConversionConfig()) -> list[Detection]:
    """Boxes for every object instance of every confident class.

    Ordered by category identifier, then by instance position. Each score is
    the mean probability over the instance's pixels.
    """
    detections = []
    for category, prob in _check_maps(per_class):
        if not _passes_gate(prob, config):
            continue
        mask = binarize(prob, config.tau_seg).bits
        for part in _refined_instances(prob, mask, config):
            score = float(prob.values[part].mean())
            detections.append(Detection(mask_to_bbox(part), category, min(max(score, 0.0), 1.0)))
    return detections


def multilabel_classify(per_class: ClassMaps, config: ConversionConfig = ConversionConfig()) -> set[str]:
    if config.classification_strategy == "mask-level":
        return {
            c
            for c, prob in per_class
            if binarize(prob, config.tau_seg).area > config.area_threshold_masklevel
        }
    return {c for c, prob in per_class if aggregate_confidence(prob, config.lambda_multilabel) >= config.tau_cls}


def scene_classify(per_class: ClassMaps, config: ConversionConfig = ConversionConfig()) -> str:
    """Category with the highest pooled confidence; ties go to the smallest identifier."""
    if not per_class:
        raise ValueError("scene classification needs at least one class")
    scored = [(aggregate_confidence(prob, config.lambda_scene), c) for c, prob in per_class]
    return min(scored, key=lambda sc: (-sc[0], sc[1]))[1]


def count_objects(detections: Iterable[Detection], target: str) -> int:
    return sum(1 for d in detections if d.category == target)


_ROWS = ("top", "middle", "bottom")
_COLS = ("left", "center", "right")


def grid_position(box: BBox, width: int, height: int) -> tuple[int, int]:
    """(row, col) cell of the box centre in a 3x3 partition of the image."""
    cx = (box.x_min + box.x_max + 1) / 2.0
    cy = (box.y_min + box.y_max + 1) / 2.0
    col = min(int(3 * cx / width), 2)
    row = min(int(3 * cy / height), 2)
    return row, col


def _cell_name(row: int, col: int) -> str:
    if row == 1 and col == 1:
        return "center"
    return f"{_ROWS[row]} {_COLS[col]}"


def _plural(word: str) -> str:
    if word.endswith(("s", "x", "z", "ch", "sh")):
        return word + "es"
    if len(word) > 1 and word.endswith("y") and word[-2] not in "aeiou":
        return word[:-1] + "ies"
    return word + "s"


def _join(items: list[str]) -> str:
    if len(items) == 1:
        return items[0]
    return ", ".join(items[:-1]) + " and " + items[-1]


def generate_caption(
    labels: Iterable[str],
    counts: Mapping[str, int],
    boxes: Iterable[Detection],
    image_size: tuple[int, int],
) -> str:
    """Template caption, one sentence per label.

    ``image_size`` is ``(width, height)``. Sentences are ordered by
    descending count, then identifier; positions within a sentence follow
    reading order of the 3x3 grid.
    """
    labels = set(labels)
    if not labels:
        return NO_OBJECTS_CAPTION
    width, height = image_size
    cells: dict[str, set[tuple[int, int]]] = {c: set() for c in labels}
    for det in boxes:
        if det.category in cells:
            cells[det.category].add(grid_position(det.bbox, width, height))
    sentences = []
    for category in sorted(labels, key=lambda c: (-counts.get(c, 0), c)):
        n = counts.get(category, 0)
        where = _join([_cell_name(r, c) for r, c in sorted(cells[category])]) if cells[category] else ""
        if n == 0:
            sentences.append(f"The image contains {category}.")
        elif n == 1:
            sentences.append(f"There is 1 {category}" + (f" at the {where}." if where else "."))
        else:
            sentences.append(f"There are {n} {_plural(category)}" + (f" at the {where}." if where else "."))
    return " ".join(sentences)


def convert_image(
    per_class: ClassMaps, config: ConversionConfig = ConversionConfig()
) -> dict:
    """All task outputs for one image as plain data (no image id)."""
    maps = _check_maps(per_class)
    height, width = maps[0][1].shape
    semseg = semantic_segmentation(maps, config)
    detections = detect_objects(maps, config)
    labels = multilabel_classify(maps, config)
    counts = {c: count_objects(detections, c) for c, _ in maps}
    return {
        "width": width,
        "height": height,
        "semseg": semseg,
        "detections": detections,
        "labels": sorted(labels),
        "scene": scene_classify(maps, config),
        "counts": counts,
        "caption": generate_caption(labels, counts, detections, (width, height)),
    }
