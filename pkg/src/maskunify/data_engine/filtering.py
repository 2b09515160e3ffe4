"""Region-text similarity scoring and iterative pseudo-label filtering."""

from __future__ import annotations

import io
import logging
import re
import threading
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np
from PIL import Image

from ..mask_core import BBox
from .triplets import Triplet, crop_mask_region

log = logging.getLogger(__name__)


class ScorerError(RuntimeError):
    """The scorer could not produce a score for one candidate."""


class ScorerUnavailable(ScorerError):
    """The scoring service could not be reached."""


class SimilarityScorer(ABC):
    """Scores how well a triplet's expression describes its masked region."""

    @abstractmethod
    def score(self, triplet: Triplet, region: BBox) -> float:
        """Similarity in [0, 1]."""


class KeywordScorer(SimilarityScorer):
    """Offline stand-in: 1.0 when the expression names one of the triplet's categories."""

    def score(self, triplet: Triplet, region: BBox) -> float:
        for category in sorted(triplet.categories):
            if re.search(r"\b" + re.escape(category) + r"\b", triplet.expression, re.IGNORECASE):
                return 1.0
        return 0.0


class HttpScorer(SimilarityScorer):
    """Client for a scoring service.

    Sends ``POST <url>/score`` as multipart form data with the cropped
    region as a PNG under ``image`` and the text under ``expression``;
    expects ``{"score": float}`` back.
    """

    def __init__(
        self,
        url: str,
        timeout: float = 30.0,
        retries: int = 2,
        image_root: str | Path | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = url if url.rstrip("/").endswith("/score") else url.rstrip("/") + "/score"
        self.retries = retries
        self.image_root = Path(image_root) if image_root is not None else None
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._images: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def _image(self, ref: str) -> np.ndarray:
        with self._lock:
            cached = self._images.get(ref)
        if cached is not None:
            return cached
        path = Path(ref)
        if self.image_root is not None and not path.is_absolute():
            path = self.image_root / path
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
        except OSError as exc:
            raise ScorerError(f"cannot read image {ref!r}: {exc}") from exc
        with self._lock:
            self._images[ref] = arr
        return arr

    def region_png(self, triplet: Triplet, region: BBox) -> bytes:
        arr = self._image(triplet.image_ref)
        crop = arr[region.y_min : region.y_max + 1, region.x_min : region.x_max + 1]
        buf = io.BytesIO()
        Image.fromarray(crop).save(buf, format="PNG")
        return buf.getvalue()

    def score(self, triplet: Triplet, region: BBox) -> float:
        payload = self.region_png(triplet, region)
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                resp = self._client.post(
                    self.endpoint,
                    files={"image": ("region.png", payload, "image/png")},
                    data={"expression": triplet.expression},
                )
            except httpx.TransportError as exc:
                last = exc
                continue
            if resp.status_code >= 500:
                last = ScorerError(f"service returned HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ScorerError(f"service returned HTTP {resp.status_code}")
            try:
                value = float(resp.json()["score"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ScorerError(f"malformed score response: {resp.text[:200]!r}") from exc
            if not 0.0 <= value <= 1.0:
                raise ScorerError(f"score {value} outside [0, 1]")
            return value
        if isinstance(last, httpx.TransportError):
            raise ScorerUnavailable(f"{self.endpoint}: {last}") from last
        raise last if last is not None else ScorerError("no attempt made")


@dataclass(frozen=True)
class FilterConfig:
    similarity_threshold: float = 0.5
    max_iterations: int = 3
    crop_padding: int = 8
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must be in [0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.crop_padding < 0:
            raise ValueError("crop_padding must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class Rejection:
    triplet: Triplet
    iteration: int
    score: float | None = None
    error: str | None = None
    unavailable: bool = False


@dataclass
class FilterResult:
    accepted: list[Triplet]
    rejected: list[Rejection]
    iterations: int = 0
    scored: int = 0
    errors: int = field(default=0)


def _score_one(scorer: SimilarityScorer, triplet: Triplet, padding: int):
    try:
        region = crop_mask_region((triplet.mask.width, triplet.mask.height), triplet.mask, padding)
        value = float(scorer.score(triplet, region))
        if not 0.0 <= value <= 1.0:
            raise ScorerError(f"score {value} outside [0, 1]")
        return value, None, False
    except ScorerUnavailable as exc:
        return None, str(exc), True
    except Exception as exc:  # noqa: BLE001 - one bad candidate must not stop the run
        return None, f"{type(exc).__name__}: {exc}", False


def filter_pseudo_labels(
    candidates: Sequence[Triplet],
    scorer: SimilarityScorer,
    config: FilterConfig = FilterConfig(),
) -> FilterResult:
    """Drop low-similarity candidates, repeating until a pass drops nothing.

    Scoring within a pass may run on ``config.workers`` threads; decisions
    are taken only after the whole pass is scored, so the outcome does not
    depend on scoring order. Candidates whose scoring fails are rejected
    with the error attached.
    """
    remaining = list(enumerate(candidates))
    rejected: list[tuple[int, Rejection]] = []
    result = FilterResult([], [])
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for iteration in range(1, config.max_iterations + 1):
            if not remaining:
                break
            result.iterations = iteration
            jobs = [t for _, t in remaining]
            if pool is None:
                outcomes = [_score_one(scorer, t, config.crop_padding) for t in jobs]
            else:
                outcomes = list(pool.map(lambda t: _score_one(scorer, t, config.crop_padding), jobs))
            result.scored += len(jobs)
            kept = []
            for (index, triplet), (value, error, unavailable) in zip(remaining, outcomes):
                if error is not None:
                    result.errors += 1
                    rejected.append((index, Rejection(triplet, iteration, None, error, unavailable)))
                elif value < config.similarity_threshold:
                    rejected.append((index, Rejection(triplet, iteration, value)))
                else:
                    kept.append((index, triplet))
            dropped = len(remaining) - len(kept)
            log.info("filter pass %d: scored %d, dropped %d", iteration, len(remaining), dropped)
            remaining = kept
            if dropped == 0:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    result.accepted = [t for _, t in remaining]
    result.rejected = [r for _, r in sorted(rejected, key=lambda item: item[0])]
    return result
