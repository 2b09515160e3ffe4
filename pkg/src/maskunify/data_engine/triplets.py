"""Image-text-mask triplets and the three generation strategies."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ..io import mask_from_json, mask_to_json, read_mask_image
from ..mask_core import BBox, BinaryMask, ShapeMismatchError, mask_to_bbox

ONE_TO_ONE = "one-to-one"
ONE_TO_MANY = "one-to-many"
ONE_TO_ZERO = "one-to-zero"
VLM_ATTRIBUTE = "vlm-attribute"
STRATEGIES = (ONE_TO_ONE, ONE_TO_MANY, ONE_TO_ZERO, VLM_ATTRIBUTE)

CATEGORY_TEMPLATE = "{category} in the image."


@dataclass(frozen=True, eq=False)
class Triplet:
    image_ref: str
    expression: str
    mask: BinaryMask
    source_strategy: str
    categories: frozenset[str] = field(default_factory=frozenset)
    attributes: frozenset[str] = field(default_factory=frozenset)
    triplet_id: str | None = None

    def __post_init__(self):
        if self.source_strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.source_strategy!r}")
        object.__setattr__(self, "categories", frozenset(self.categories))
        object.__setattr__(self, "attributes", frozenset(self.attributes))

    def __eq__(self, other):
        if not isinstance(other, Triplet):
            return NotImplemented
        return self.to_json() == other.to_json()

    __hash__ = None  # type: ignore[assignment]

    def to_json(self) -> dict:
        rec: dict[str, Any] = {}
        if self.triplet_id is not None:
            rec["id"] = self.triplet_id
        rec.update(
            image=self.image_ref,
            expression=self.expression,
            mask=mask_to_json(self.mask),
            strategy=self.source_strategy,
            categories=sorted(self.categories),
            attributes=sorted(self.attributes),
        )
        return rec

    @classmethod
    def from_json(cls, rec: Mapping[str, Any]) -> "Triplet":
        return cls(
            image_ref=str(rec["image"]),
            expression=str(rec["expression"]),
            mask=mask_from_json(rec["mask"]),
            source_strategy=rec.get("strategy", ONE_TO_ONE),
            categories=frozenset(rec.get("categories", ())),
            attributes=frozenset(rec.get("attributes", ())),
            triplet_id=rec.get("id"),
        )


@dataclass(frozen=True)
class IngestError:
    index: int
    reason: str


def category_expression(category: str) -> str:
    return CATEGORY_TEMPLATE.format(category=category)


def make_one_to_many(image_ref: str, instance_masks: Sequence[tuple[str, BinaryMask]]) -> list[Triplet]:
    """One triplet per category whose mask is the union of all its instances."""
    unions: dict[str, np.ndarray] = {}
    shape = None
    for category, mask in instance_masks:
        if shape is None:
            shape = mask.shape
        elif mask.shape != shape:
            raise ShapeMismatchError(f"instance of {category!r} has shape {mask.shape}, expected {shape}")
        if category in unions:
            unions[category] |= mask.bits
        else:
            unions[category] = mask.bits.copy()
    return [
        Triplet(image_ref, category_expression(c), BinaryMask(bits), ONE_TO_MANY, frozenset([c]))
        for c, bits in sorted(unions.items())
    ]


def make_one_to_zero(
    image_ref: str,
    present: Iterable[str],
    vocab,
    k: int,
    seed: int | str | None,
    shape: tuple[int, int],
) -> list[Triplet]:
    """``k`` null-mask triplets naming categories absent from the image.

    Candidates are the leaves of ``vocab`` (a ``Vocab`` or any iterable of
    leaf ids); sampling is uniform without replacement and reproducible for
    a given seed.
    ``shape`` is ``(height, width)`` of the image.
    """
    leaves = vocab.leaves if hasattr(vocab, "leaves") else vocab
    absent = sorted(set(leaves) - set(present))
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > len(absent):
        raise ValueError(f"requested {k} absent categories but only {len(absent)} are available")
    chosen = random.Random(seed).sample(absent, k)
    height, width = shape
    return [
        Triplet(image_ref, category_expression(c), BinaryMask.zeros(width, height), ONE_TO_ZERO, frozenset([c]))
        for c in chosen
    ]


def _record_mask(rec: Mapping[str, Any], base_dir: Path | None) -> BinaryMask:
    if "mask" in rec:
        return mask_from_json(rec["mask"])
    if "mask_path" in rec:
        path = Path(rec["mask_path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return read_mask_image(path)
    raise ValueError("record has neither 'mask' nor 'mask_path'")


def ingest_one_to_one(
    records: Iterable[Mapping[str, Any]],
    base_dir: str | Path | None = None,
    strategy: str = ONE_TO_ONE,
) -> tuple[list[Triplet], list[IngestError]]:
    """Normalize existing referring annotations; bad records are reported, not raised."""
    base = Path(base_dir) if base_dir is not None else None
    triplets, errors = [], []
    for index, rec in enumerate(records):
        try:
            if not isinstance(rec, Mapping):
                raise ValueError("record is not an object")
            image = rec["image"]
            expression = rec["expression"]
            if not isinstance(image, str) or not image:
                raise ValueError("'image' must be a non-empty string")
            if not isinstance(expression, str) or not expression.strip():
                raise ValueError("'expression' must be a non-empty string")
            mask = _record_mask(rec, base)
            triplets.append(
                Triplet(
                    image,
                    expression,
                    mask,
                    strategy,
                    frozenset(rec.get("categories", ())),
                    frozenset(rec.get("attributes", ())),
                    rec.get("id"),
                )
            )
        except KeyError as exc:
            errors.append(IngestError(index, f"missing field {exc.args[0]!r}"))
        except (ValueError, TypeError, OSError) as exc:
            errors.append(IngestError(index, str(exc)))
    return triplets, errors


def crop_mask_region(image_dims: tuple[int, int], mask: BinaryMask, padding: int) -> BBox:
    """Mask extent grown by ``padding`` and clamped to the image.

    ``image_dims`` is ``(width, height)``.
    """
    box = mask_to_bbox(mask)
    if box is None:
        raise ValueError("cannot crop around an empty mask")
    width, height = image_dims
    return BBox(
        max(box.x_min - padding, 0),
        max(box.y_min - padding, 0),
        min(box.x_max + padding, width - 1),
        min(box.y_max + padding, height - 1),
    )
