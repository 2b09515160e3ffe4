"""Raster and mask primitives: probability maps, binary masks, RLE, components, IoU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy import ndimage


class ShapeMismatchError(ValueError):
    """Two rasters that must share dimensions do not."""


class RleError(ValueError):
    """Run-length data is inconsistent with the declared mask size."""


class ProbMap:
    """Per-pixel probability raster answering for one class or expression.

    Values are stored as a read-only float64 ``(height, width)`` array.
    """

    __slots__ = ("values", "key")

    def __init__(self, values, key: str = ""):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"probability map must be a non-empty 2-D raster, got shape {arr.shape}")
        lo, hi = arr.min(), arr.max()
        if not (lo >= 0.0 and hi <= 1.0):
            raise ValueError(f"probabilities must lie in [0, 1], got range [{lo}, {hi}]")
        arr.setflags(write=False)
        self.values = arr
        self.key = key

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __repr__(self) -> str:
        return f"ProbMap(key={self.key!r}, width={self.width}, height={self.height})"


class BinaryMask:
    """A {0,1} raster, stored as a read-only boolean ``(height, width)`` array."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        arr = np.asarray(bits)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"mask must be a non-empty 2-D raster, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            arr = arr.astype(bool)
        elif arr.flags.writeable:
            arr = arr.copy()
        arr.setflags(write=False)
        self.bits = arr

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def any(self) -> bool:
        return bool(self.bits.any())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"BinaryMask(width={self.width}, height={self.height}, area={self.area})"


class BBox(NamedTuple):
    """Axis-aligned box, inclusive pixel coordinates."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def is_valid(self, width: int | None = None, height: int | None = None) -> bool:
        if self.x_min > self.x_max or self.y_min > self.y_max or self.x_min < 0 or self.y_min < 0:
            return False
        if width is not None and self.x_max >= width:
            return False
        if height is not None and self.y_max >= height:
            return False
        return True


@dataclass(frozen=True)
class InstanceMask:
    component_id: int
    mask: BinaryMask
    pixel_count: int


MaskLike = Union[BinaryMask, np.ndarray]

FOUR_WAY = 4
EIGHT_WAY = 8

_STRUCTURES = {
    FOUR_WAY: ndimage.generate_binary_structure(2, 1),
    EIGHT_WAY: ndimage.generate_binary_structure(2, 2),
}


def as_bits(mask: MaskLike) -> np.ndarray:
    """Boolean view of a mask or array-like."""
    if isinstance(mask, BinaryMask):
        return mask.bits
    return BinaryMask(mask).bits


def binarize(prob: ProbMap, threshold: float) -> BinaryMask:
    """Foreground wherever the probability is at least ``threshold`` (ties count as foreground)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return BinaryMask(prob.values >= threshold)


def rle_encode(mask: MaskLike) -> list[int]:
    """Row-major run lengths, alternating and starting with a (possibly empty) 0-run."""
    flat = as_bits(mask).ravel()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(runs: Sequence[int], width: int, height: int) -> BinaryMask:
    if width <= 0 or height <= 0:
        raise RleError(f"mask size must be positive, got {width}x{height}")
    counts = np.asarray(runs, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise RleError("run list must be a non-empty flat sequence")
    if (counts < 0).any():
        raise RleError("run lengths must be non-negative")
    total = int(counts.sum())
    if total != width * height:
        raise RleError(f"runs sum to {total}, expected {width * height} for {width}x{height}")
    values = np.zeros(counts.size, dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return BinaryMask(flat.reshape(height, width))


def label_components(mask: MaskLike, connectivity: int = EIGHT_WAY) -> tuple[np.ndarray, list[int]]:
    """Label foreground components.

    Returns the int32 label image and the label ids in canonical order:
    by minimum row, then minimum column, then first pixel in raster order.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    bits = as_bits(mask)
    labels, n = ndimage.label(bits, structure=_STRUCTURES[connectivity])
    if n == 0:
        return labels, []
    slices = ndimage.find_objects(labels)
    ids, first = np.unique(labels.ravel(), return_index=True)
    first_index = dict(zip(ids.tolist(), first.tolist()))
    order = sorted(
        range(1, n + 1),
        key=lambda i: (slices[i - 1][0].start, slices[i - 1][1].start, first_index[i]),
    )
    return labels, order


def connected_components(mask: MaskLike, connectivity: int = EIGHT_WAY) -> list[InstanceMask]:
    labels, order = label_components(mask, connectivity)
    out = []
    for ordinal, lab in enumerate(order):
        bits = labels == lab
        out.append(InstanceMask(ordinal, BinaryMask(bits), int(np.count_nonzero(bits))))
    return out


def mask_iou(a: MaskLike, b: MaskLike) -> float:
    """Intersection over union; two empty masks score 1.0."""
    inter, union = intersection_union(a, b)
    return 1.0 if union == 0 else inter / union


def intersection_union(a: MaskLike, b: MaskLike) -> tuple[int, int]:
    ba, bb = as_bits(a), as_bits(b)
    if ba.shape != bb.shape:
        raise ShapeMismatchError(f"mask shapes differ: {ba.shape} vs {bb.shape}")
    inter = int(np.count_nonzero(ba & bb))
    union = int(np.count_nonzero(ba | bb))
    return inter, union


def mask_to_bbox(mask: MaskLike) -> BBox | None:
    """Tight box around the foreground, or None for an empty mask."""
    bits = as_bits(mask)
    rows = np.flatnonzero(bits.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(bits.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))
