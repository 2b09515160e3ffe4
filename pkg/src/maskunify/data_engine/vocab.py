"""Three-level category vocabulary and dataset coverage statistics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .triplets import Triplet

LEVELS = 3

DEFAULT_ATTRIBUTE_TAGS = (
    "color",
    "shape",
    "size",
    "material",
    "texture",
    "state",
    "activity",
    "count",
    "orientation",
    "absolute position",
    "relative position",
    "spatial relation",
    "function",
    "type",
    "surroundings",
    "condition",
)


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    names: Mapping[str, str]
    parents: Mapping[str, str | None]
    attribute_tags: tuple[str, ...] = DEFAULT_ATTRIBUTE_TAGS
    _lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for node in self.parents:
            if node not in self.names:
                raise VocabError(f"node {node!r} has no display name")
        for node in self.names:
            self.depth(node)
        children = {p for p in self.parents.values() if p is not None}
        for node in self.names:
            if node not in children and self.depth(node) != LEVELS:
                raise VocabError(f"leaf {node!r} sits at depth {self.depth(node)}, expected {LEVELS}")
        lookup: dict[str, str] = {}
        for node, name in sorted(self.names.items()):
            lookup.setdefault(node.lower(), node)
            lookup.setdefault(name.strip().lower(), node)
        object.__setattr__(self, "_lookup", lookup)

    def depth(self, node: str) -> int:
        seen = set()
        d = 0
        while node is not None:
            if node in seen:
                raise VocabError(f"cycle through {node!r}")
            if node not in self.parents:
                raise VocabError(f"unknown node {node!r}")
            seen.add(node)
            node = self.parents[node]
            d += 1
        return d

    @property
    def leaves(self) -> list[str]:
        return sorted(n for n in self.names if self.depth(n) == LEVELS)

    def resolve(self, category: str) -> str | None:
        """Vocabulary id for a category id or display name (case-insensitive)."""
        if category in self.names:
            return category
        return self._lookup.get(category.strip().lower())

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Vocab":
        """Build from ``{"nodes": [tree...], "attributes": [...]}``.

        Each tree node is ``{"id", "name"?, "children"?}``.
        """
        names: dict[str, str] = {}
        parents: dict[str, str | None] = {}

        def walk(node: Mapping[str, Any], parent: str | None) -> None:
            node_id = node.get("id")
            if not isinstance(node_id, str) or not node_id:
                raise VocabError(f"node without a string id under {parent!r}")
            if node_id in names:
                raise VocabError(f"duplicate node id {node_id!r}")
            names[node_id] = str(node.get("name", node_id))
            parents[node_id] = parent
            for child in node.get("children", ()):
                walk(child, node_id)

        for root in obj.get("nodes", ()):
            walk(root, None)
        tags = tuple(obj.get("attributes", DEFAULT_ATTRIBUTE_TAGS))
        return cls(names, parents, tags)

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class CoverageReport:
    samples: int
    categories: int
    attributes: int
    attr_per_sample: float
    out_of_vocab: int
    out_of_vocab_categories: tuple[str, ...] = ()

    COLUMNS = ("# Samples", "# Cls", "# Attr", "# Attr/Sample")

    def to_json(self) -> dict:
        out = asdict(self)
        out["out_of_vocab_categories"] = list(self.out_of_vocab_categories)
        return out

    def table(self) -> str:
        values = (str(self.samples), str(self.categories), str(self.attributes), f"{self.attr_per_sample:.2f}")
        widths = [max(len(c), len(v)) for c, v in zip(self.COLUMNS, values)]
        head = " | ".join(c.rjust(w) for c, w in zip(self.COLUMNS, widths))
        row = " | ".join(v.rjust(w) for v, w in zip(values, widths))
        lines = [head, "-" * len(head), row]
        if self.out_of_vocab:
            lines.append(f"out-of-vocab categories: {self.out_of_vocab}")
        return "\n".join(lines) + "\n"


def coverage_stats(triplets: Iterable[Triplet], vocab: Vocab) -> CoverageReport:
    samples = 0
    tag_total = 0
    matched: set[str] = set()
    unknown: set[str] = set()
    tags: set[str] = set()
    for t in triplets:
        samples += 1
        tag_total += len(t.attributes)
        tags.update(t.attributes)
        for c in t.categories:
            node = vocab.resolve(c)
            if node is None:
                unknown.add(c)
            else:
                matched.add(node)
    return CoverageReport(
        samples=samples,
        categories=len(matched),
        attributes=len(tags),
        attr_per_sample=tag_total / samples if samples else 0.0,
        out_of_vocab=len(unknown),
        out_of_vocab_categories=tuple(sorted(unknown)),
    )
