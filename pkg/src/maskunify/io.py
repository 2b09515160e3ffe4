"""Persistence for masks, probability maps and JSON-lines manifests."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
from PIL import Image

from .mask_core import BinaryMask, ProbMap, RleError, rle_decode, rle_encode

log = logging.getLogger(__name__)

PROB_MAP_SUFFIXES = (".pgm", ".png", ".json")


def mask_to_json(mask: BinaryMask) -> dict:
    return {"width": mask.width, "height": mask.height, "rle": rle_encode(mask)}


def mask_from_json(obj: Any) -> BinaryMask:
    if not isinstance(obj, dict):
        raise RleError(f"mask must be an object with width/height/rle, got {type(obj).__name__}")
    try:
        width, height, runs = obj["width"], obj["height"], obj["rle"]
    except KeyError as exc:
        raise RleError(f"mask object missing key {exc.args[0]!r}") from None
    if not isinstance(width, int) or not isinstance(height, int) or not isinstance(runs, list):
        raise RleError("mask width/height must be integers and rle a list")
    if not all(isinstance(r, int) and not isinstance(r, bool) for r in runs):
        raise RleError("rle entries must be integers")
    return rle_decode(runs, width, height)


def read_mask_image(path: str | Path) -> BinaryMask:
    """8-bit single-channel image; any nonzero pixel is foreground."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return BinaryMask(arr > 0)


def write_mask_image(mask: BinaryMask, path: str | Path) -> None:
    Image.fromarray(mask.bits.astype(np.uint8) * 255).save(path)


def read_prob_map(path: str | Path, key: str | None = None) -> ProbMap:
    """Load a probability raster.

    Grayscale images are scaled by their maximum code value (255 for 8-bit,
    65535 for 16-bit). A ``.json`` file holds an RLE mask, read as a hard
    0/1 probability map.
    """
    path = Path(path)
    key = path.stem if key is None else key
    if path.suffix == ".json":
        with open(path, encoding="utf-8") as fh:
            return ProbMap(mask_from_json(json.load(fh)).bits, key)
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        scale = 255.0
    elif np.issubdtype(arr.dtype, np.integer):
        # Pillow hands 16-bit grayscale back as uint16 or int32
        scale = 65535.0
    else:
        raise ValueError(f"{path}: unsupported pixel type {arr.dtype}")
    return ProbMap(arr.astype(np.float64) / scale, key)


def write_prob_map(prob: ProbMap | np.ndarray, path: str | Path) -> None:
    """Quantize to 8 bits and write as PGM/PNG (format from suffix)."""
    values = prob.values if isinstance(prob, ProbMap) else np.asarray(prob, dtype=np.float64)
    Image.fromarray(np.rint(values * 255.0).astype(np.uint8)).save(path)


def dumps_record(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")
            n += 1
    return n


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict | None, str | None]]:
    """Yield ``(line_number, record, error)``; malformed lines carry an error instead of raising."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                yield lineno, None, f"invalid JSON: {exc.msg}"
                continue
            if not isinstance(rec, dict):
                yield lineno, None, "record is not a JSON object"
                continue
            yield lineno, rec, None


def read_jsonl(path: str | Path) -> tuple[list[dict], list[str]]:
    records, errors = [], []
    for lineno, rec, err in iter_jsonl(path):
        if err is not None:
            errors.append(f"{path}:{lineno}: {err}")
            log.warning("%s:%d: %s", path, lineno, err)
        else:
            records.append(rec)
    return records, errors
