"""Batch command line: convert, eval, curate, stats.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 external service error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import metrics
from .data_engine import (
    ONE_TO_ONE,
    VLM_ATTRIBUTE,
    FilterConfig,
    HttpScorer,
    KeywordScorer,
    Triplet,
    Vocab,
    VocabError,
    coverage_stats,
    filter_pseudo_labels,
    ingest_one_to_one,
    make_one_to_many,
    make_one_to_zero,
)
from .io import PROB_MAP_SUFFIXES, iter_jsonl, mask_from_json, mask_to_json, read_prob_map, write_jsonl
from .mask_core import BBox, BinaryMask, RleError, mask_to_bbox
from .task_convert import ConversionConfig, Detection, convert_image

log = logging.getLogger("maskunify")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SERVICE = 3

SCORER_ENV = "REMOTE_SAM_SCORER_URL"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class ServiceError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    subcommand: str
    inputs: list[Path]
    output: Path
    conversion: ConversionConfig = field(default_factory=ConversionConfig)
    filtering: FilterConfig = field(default_factory=FilterConfig)
    workers: int = 1
    seed: int = 0


# flag dest -> (section, field)
_CONVERSION_FLAGS = {
    "tau_seg": "tau_seg",
    "tau_cls": "tau_cls",
    "lambda_multilabel": "lambda_multilabel",
    "lambda_scene": "lambda_scene",
    "strategy": "classification_strategy",
    "area_threshold": "area_threshold_masklevel",
    "refine": "refine",
    "refine_radius": "refine_radius",
    "connectivity": "connectivity",
}
_FILTER_FLAGS = {
    "similarity_threshold": "similarity_threshold",
    "max_iterations": "max_iterations",
    "crop_padding": "crop_padding",
}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a mapping")
    return data


def _section(data: dict, name: str, fields: set[str]) -> dict:
    """Known keys from ``data[name]`` and from the top level (section wins)."""
    flat = {k: v for k, v in data.items() if k in fields}
    nested = data.get(name) or {}
    if not isinstance(nested, dict):
        raise UsageError(f"config section {name!r} must be a mapping")
    unknown = set(nested) - fields
    if unknown:
        raise UsageError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    flat.update(nested)
    return flat


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge built-in defaults, the config file and flags (in that order of precedence, lowest first)."""
    data = _load_config_file(getattr(args, "config", None))
    conv_fields = {f.name for f in dataclasses.fields(ConversionConfig)}
    filt_fields = {f.name for f in dataclasses.fields(FilterConfig)} - {"workers"}
    conv = _section(data, "conversion", conv_fields)
    filt = _section(data, "filter", filt_fields)
    for dest, name in _CONVERSION_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            conv[name] = value
    for dest, name in _FILTER_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            filt[name] = value
    workers = args.workers if getattr(args, "workers", None) is not None else data.get("workers", 1)
    seed = args.seed if getattr(args, "seed", None) is not None else data.get("seed", 0)
    try:
        workers = int(workers)
        if workers < 1:
            raise ValueError("workers must be >= 1")
        conversion = ConversionConfig(**conv)
        filtering = FilterConfig(workers=workers, **filt)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    inputs = [Path(p) for p in (args.input or [])]
    for p in inputs:
        if not p.exists():
            raise UsageError(f"input {p} does not exist")
    return RunConfig(args.command, inputs, Path(args.output), conversion, filtering, workers, int(seed))


# ---------------------------------------------------------------- convert


def _find_maps(image_dir: Path) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for path in sorted(image_dir.iterdir()):
        if path.is_file() and path.suffix.lower() in PROB_MAP_SUFFIXES:
            if path.stem in found:
                raise DataError(f"several map files for category {path.stem!r}")
            found[path.stem] = path
    return found


def _convert_one(job: tuple[Path, list[str] | None, ConversionConfig]) -> dict:
    image_dir, categories, config = job
    image_id = image_dir.name
    try:
        files = _find_maps(image_dir)
        wanted = sorted(files) if categories is None else categories
        missing = [c for c in wanted if c not in files]
        if missing:
            raise DataError(f"missing map files for {missing}")
        if not wanted:
            raise DataError("no probability maps found")
        maps = [(c, read_prob_map(files[c], c)) for c in wanted]
        out = convert_image(maps, config)
    except (DataError, OSError, ValueError) as exc:
        return {"image_id": image_id, "error": f"{type(exc).__name__}: {exc}"}
    semseg = out["semseg"]
    return {
        "image_id": image_id,
        "width": out["width"],
        "height": out["height"],
        "categories": list(semseg.categories),
        "semseg": {c: mask_to_json(semseg.mask_for(c)) for c in semseg.categories},
        "detections": [d.to_json() for d in out["detections"]],
        "labels": out["labels"],
        "scene": out["scene"],
        "counts": out["counts"],
        "caption": out["caption"],
    }


def cmd_convert(run: RunConfig, categories: list[str] | None = None) -> int:
    root = run.inputs[0]
    if not root.is_dir():
        raise UsageError(f"convert input {root} must be a directory of per-image map folders")
    image_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    run.output.mkdir(parents=True, exist_ok=True)
    jobs = [(d, categories, run.conversion) for d in image_dirs]
    if not jobs:
        log.warning("no image folders under %s", root)
    if run.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=run.workers) as pool:
            results = list(pool.map(_convert_one, jobs, chunksize=max(1, len(jobs) // (4 * run.workers))))
    else:
        results = [_convert_one(j) for j in jobs]
    good = [r for r in results if "error" not in r]
    bad = [r for r in results if "error" in r]
    for r in bad:
        log.warning("%s: %s", r["image_id"], r["error"])
    write_jsonl(run.output / "predictions.jsonl", good)
    write_jsonl(run.output / "errors.jsonl", bad)
    summary = {"images": len(results), "succeeded": len(good), "failed": len(bad)}
    _write_json(run.output / "summary.json", summary)
    log.info("converted %d/%d images", len(good), len(results))
    if results and not good:
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------- eval


def record_key(rec: dict) -> str | None:
    for name in ("image_id", "id"):
        if isinstance(rec.get(name), (str, int)):
            return str(rec[name])
    if isinstance(rec.get("image"), str) and isinstance(rec.get("expression"), str):
        return f"{rec['image']}\t{rec['expression']}"
    return None


def _load_keyed(path: Path) -> tuple[dict[str, dict], int]:
    keyed: dict[str, dict] = {}
    bad = 0
    for lineno, rec, err in iter_jsonl(path):
        key = None if rec is None else record_key(rec)
        if err is not None or key is None:
            bad += 1
            log.warning("%s:%d: %s", path, lineno, err or "record has no image_id/id/image+expression key")
            continue
        if key in keyed:
            log.warning("%s:%d: duplicate key %r ignored", path, lineno, key)
            continue
        keyed[key] = rec
    return keyed, bad


def _semseg_masks(rec: dict) -> dict[str, BinaryMask]:
    return {c: mask_from_json(m) for c, m in rec["semseg"].items()}


def _gt_objects(rec: dict) -> list[tuple[str, BBox]]:
    objs = rec.get("objects", rec.get("detections", []))
    return [(str(o["category"]), BBox(*(int(v) for v in o["bbox"]))) for o in objs]


def evaluate_records(
    pairs: Sequence[tuple[dict, dict]],
    strict_pr: bool = True,
    multilabel_exact: bool = False,
    count_tolerance: bool = False,
    universe: Sequence[str] | None = None,
) -> dict[str, Any]:
    """Every metric supported by the fields both sides carry."""
    report: dict[str, Any] = {}

    seg = metrics.SegAccumulator(strict=strict_pr)
    ground = []
    for pred, gt in pairs:
        if "mask" in pred and "mask" in gt:
            pm, gm = mask_from_json(pred["mask"]), mask_from_json(gt["mask"])
            seg.add(pm, gm)
            if "bbox" not in gt and gm.any():
                ground.append((mask_to_bbox(pm), mask_to_bbox(gm)))
        elif "semseg" in pred and "semseg" in gt:
            pmasks, gmasks = _semseg_masks(pred), _semseg_masks(gt)
            shape = next(iter({**gmasks, **pmasks}.values())).shape if (pmasks or gmasks) else None
            for c in sorted(set(pmasks) | set(gmasks)):
                zero = BinaryMask.zeros(shape[1], shape[0])
                seg.add(pmasks.get(c, zero), gmasks.get(c, zero))
        if "bbox" in gt and gt["bbox"] is not None:
            pbox = pred.get("bbox")
            ground.append((None if pbox is None else BBox(*pbox), BBox(*gt["bbox"])))
    if seg.ious:
        report["segmentation"] = seg.report().to_json()
    if ground:
        report["grounding"] = metrics.grounding_metrics(ground).to_json()

    det_pairs = [(p, g) for p, g in pairs if "detections" in p and ("objects" in g or "detections" in g)]
    if det_pairs:
        preds = [[Detection.from_json(d) for d in p["detections"]] for p, _ in det_pairs]
        gts = [_gt_objects(g) for _, g in det_pairs]
        per_cat = metrics.detection_ap(preds, gts)
        report["detection"] = {
            "samples": len(det_pairs),
            "metrics": {"AP50": metrics.detection_ap50(preds, gts)},
            "per_category": per_cat,
        }

    label_pairs = [(p["labels"], g["labels"]) for p, g in pairs if "labels" in p and "labels" in g]
    if label_pairs:
        if universe is None:
            names: set[str] = set()
            for p, g in pairs:
                names.update(p.get("labels", ()), g.get("labels", ()), g.get("categories", ()), p.get("categories", ()))
            universe = sorted(names)
        report["multilabel"] = {
            "samples": len(label_pairs),
            "metrics": {"Acc": metrics.multilabel_accuracy(label_pairs, universe, exact_match=multilabel_exact)},
        }

    count_pairs = [
        (int(p["counts"].get(c, 0)), int(n))
        for p, g in pairs
        if "counts" in p and "counts" in g
        for c, n in sorted(g["counts"].items())
    ]
    if count_pairs:
        report["counting"] = {
            "samples": len(count_pairs),
            "metrics": {"Acc": metrics.counting_accuracy(count_pairs, tolerance=count_tolerance)},
        }

    scene_pairs = [(p["scene"], g["scene"]) for p, g in pairs if "scene" in p and "scene" in g]
    if scene_pairs:
        report["scene"] = {"samples": len(scene_pairs), "metrics": {"Acc": metrics.scene_accuracy(scene_pairs)}}
    return report


def report_table(report: dict[str, Any]) -> str:
    parts = []
    for section in ("segmentation", "grounding", "detection", "multilabel", "counting", "scene"):
        if section in report:
            body = report[section]
            parts.append(metrics.EvalReport(body["metrics"], body["samples"]).table(f"[{section}]"))
    parts.append(
        f"matched: {report['matched']}  unmatched predictions: {len(report['unmatched_predictions'])}"
        f"  unmatched ground truth: {len(report['unmatched_ground_truth'])}\n"
    )
    return "\n".join(parts)


def cmd_eval(run: RunConfig, gt_path: Path, **options) -> int:
    preds, _ = _load_keyed(run.inputs[0])
    gts, _ = _load_keyed(gt_path)
    common = sorted(set(preds) & set(gts))
    if not common:
        raise DataError("prediction and ground-truth manifests share no ids")
    only_pred = sorted(set(preds) - set(gts))
    only_gt = sorted(set(gts) - set(preds))
    if only_pred or only_gt:
        log.warning("%d unmatched ids excluded", len(only_pred) + len(only_gt))
    try:
        report = evaluate_records([(preds[k], gts[k]) for k in common], **options)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot evaluate: {type(exc).__name__}: {exc}") from exc
    report["matched"] = len(common)
    report["unmatched_predictions"] = only_pred
    report["unmatched_ground_truth"] = only_gt
    run.output.mkdir(parents=True, exist_ok=True)
    _write_json(run.output / "report.json", report)
    (run.output / "report.txt").write_text(report_table(report), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- curate


def _instance_record(rec: dict) -> tuple[str, list[tuple[str, BinaryMask]], set[str], tuple[int, int]]:
    image = rec["image"]
    if not isinstance(image, str) or not image:
        raise ValueError("'image' must be a non-empty string")
    instances = [(str(inst["category"]), mask_from_json(inst["mask"])) for inst in rec["instances"]]
    if instances:
        shape = instances[0][1].shape
    else:
        shape = (int(rec["height"]), int(rec["width"]))
    present = {c for c, _ in instances} | set(rec.get("categories", ()))
    return image, instances, present, shape


def _make_scorer(args: argparse.Namespace):
    if args.scorer_stub:
        return KeywordScorer()
    url = args.scorer_url or os.environ.get(SCORER_ENV)
    if not url:
        return None
    return HttpScorer(url, timeout=args.timeout, retries=args.retries, image_root=args.image_root)


def cmd_curate(run: RunConfig, args: argparse.Namespace) -> int:
    vocab = _load_vocab(args.vocab)
    slots: list[tuple[Triplet, bool]] = []  # (triplet, needs filtering)
    problems: list[dict] = []
    for path in run.inputs:
        for lineno, rec, err in iter_jsonl(path):
            where = f"{path}:{lineno}"
            if err is not None:
                problems.append({"source": where, "error": err})
                continue
            if "instances" in rec:
                try:
                    image, instances, present, shape = _instance_record(rec)
                    generated = make_one_to_many(image, instances)
                    seed = f"{run.seed}:{image}"
                    generated += make_one_to_zero(image, present, vocab, args.k_zero, seed, shape)
                except (KeyError, TypeError, ValueError) as exc:
                    problems.append({"source": where, "error": f"{type(exc).__name__}: {exc}"})
                    continue
                slots.extend((t, False) for t in generated)
                continue
            strategy = VLM_ATTRIBUTE if rec.get("strategy") == VLM_ATTRIBUTE else ONE_TO_ONE
            triplets, errors = ingest_one_to_one([rec], base_dir=path.parent, strategy=strategy)
            problems.extend({"source": where, "error": e.reason} for e in errors)
            slots.extend((t, strategy == VLM_ATTRIBUTE) for t in triplets)

    candidates = [t for t, pending in slots if pending]
    accepted_ids: set[int] = set()
    rejected = []
    iterations = 0
    if candidates:
        scorer = _make_scorer(args)
        if scorer is None:
            raise ServiceError(f"pseudo-labels need a scorer: pass --scorer-url, set {SCORER_ENV}, or use --scorer-stub")
        try:
            result = filter_pseudo_labels(candidates, scorer, run.filtering)
        finally:
            if isinstance(scorer, HttpScorer):
                scorer.close()
        iterations = result.iterations
        accepted_ids = {id(t) for t in result.accepted}
        rejected = result.rejected
        if not result.accepted and rejected and all(r.unavailable for r in rejected):
            _write_curate_outputs(run, slots, accepted_ids, rejected, problems, iterations)
            raise ServiceError(f"scoring service unreachable: {rejected[0].error}")
    _write_curate_outputs(run, slots, accepted_ids, rejected, problems, iterations)
    return EXIT_OK


def _write_curate_outputs(run, slots, accepted_ids, rejected, problems, iterations) -> None:
    run.output.mkdir(parents=True, exist_ok=True)
    accepted = [t for t, pending in slots if not pending or id(t) in accepted_ids]
    write_jsonl(run.output / "accepted.jsonl", (t.to_json() for t in accepted))

    def rejection_record(r):
        rec = r.triplet.to_json()
        rec["rejection"] = {"iteration": r.iteration, "score": r.score, "error": r.error}
        return rec

    write_jsonl(run.output / "rejected.jsonl", (rejection_record(r) for r in rejected))
    per_strategy: dict[str, int] = {}
    for t in accepted:
        per_strategy[t.source_strategy] = per_strategy.get(t.source_strategy, 0) + 1
    summary = {
        "accepted": len(accepted),
        "accepted_per_strategy": dict(sorted(per_strategy.items())),
        "rejected": len(rejected),
        "scoring_errors": sum(1 for r in rejected if r.error is not None),
        "filter_iterations": iterations,
        "input_errors": problems,
    }
    _write_json(run.output / "summary.json", summary)


# ---------------------------------------------------------------- stats


def _load_vocab(path: str) -> Vocab:
    try:
        return Vocab.load(path)
    except (OSError, json.JSONDecodeError, VocabError) as exc:
        raise UsageError(f"cannot load vocabulary {path}: {exc}") from exc


def cmd_stats(run: RunConfig, vocab_path: str) -> int:
    vocab = _load_vocab(vocab_path)
    triplets, malformed = [], []
    for path in run.inputs:
        for lineno, rec, err in iter_jsonl(path):
            if err is None:
                try:
                    triplets.append(Triplet.from_json(rec))
                    continue
                except (KeyError, TypeError, ValueError, RleError) as exc:
                    err = f"{type(exc).__name__}: {exc}"
            malformed.append(f"{path}:{lineno}: {err}")
            log.warning("%s:%d: %s", path, lineno, err)
    report = coverage_stats(triplets, vocab)
    run.output.mkdir(parents=True, exist_ok=True)
    payload = report.to_json()
    payload["malformed_lines"] = malformed
    _write_json(run.output / "coverage.json", payload)
    (run.output / "coverage.txt").write_text(report.table(), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", action="append", required=True, help="input path (repeatable where it makes sense)")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--config", help="YAML/JSON config file; flags override it")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskunify", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    conv = sub.add_parser("convert", help="probability maps -> task outputs")
    _add_common(conv)
    conv.add_argument("--categories", help="comma-separated category list (default: all map files per image)")
    conv.add_argument("--tau-seg", dest="tau_seg", type=float)
    conv.add_argument("--tau-cls", dest="tau_cls", type=float)
    conv.add_argument("--lambda", dest="lambda_multilabel", type=float, help="pooling balance for multi-label")
    conv.add_argument("--lambda-scene", dest="lambda_scene", type=float, help="pooling balance for scene class")
    conv.add_argument("--strategy", choices=("prob-level", "mask-level"))
    conv.add_argument("--area-threshold", dest="area_threshold", type=int)
    conv.add_argument("--refine", dest="refine", action=argparse.BooleanOptionalAction, default=None)
    conv.add_argument("--refine-radius", dest="refine_radius", type=float)
    conv.add_argument("--connectivity", type=int, choices=(4, 8))

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    _add_common(ev)
    ev.add_argument("--gt", required=True, help="ground-truth manifest")
    ev.add_argument("--pr-inclusive", action="store_true", help="count IoU == tau as a hit for Pr@tau")
    ev.add_argument("--multilabel-exact", action="store_true", help="exact-match multi-label accuracy")
    ev.add_argument("--count-tolerance", action="store_true", help="accept counts within ceil(10%%) of truth")
    ev.add_argument("--universe", help="comma-separated label universe for multi-label accuracy")

    cur = sub.add_parser("curate", help="build and filter triplets")
    _add_common(cur)
    cur.add_argument("--vocab", required=True)
    cur.add_argument("--k-zero", dest="k_zero", type=int, default=0, help="null triplets per image")
    scorer = cur.add_mutually_exclusive_group()
    scorer.add_argument("--scorer-url")
    scorer.add_argument("--scorer-stub", action="store_true", help="offline keyword scorer")
    cur.add_argument("--similarity-threshold", dest="similarity_threshold", type=float)
    cur.add_argument("--max-iterations", dest="max_iterations", type=int)
    cur.add_argument("--crop-padding", dest="crop_padding", type=int)
    cur.add_argument("--timeout", type=float, default=30.0)
    cur.add_argument("--retries", type=int, default=2)
    cur.add_argument("--image-root", help="base directory for relative image paths")

    st = sub.add_parser("stats", help="semantic coverage report")
    _add_common(st)
    st.add_argument("--vocab", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run = build_run_config(args)
        if args.command == "convert":
            if len(run.inputs) != 1:
                raise UsageError("convert takes exactly one --input directory")
            cats = [c.strip() for c in args.categories.split(",") if c.strip()] if args.categories else None
            return cmd_convert(run, cats)
        if args.command == "eval":
            if len(run.inputs) != 1:
                raise UsageError("eval takes exactly one --input manifest")
            gt = Path(args.gt)
            if not gt.exists():
                raise UsageError(f"ground truth {gt} does not exist")
            universe = [c.strip() for c in args.universe.split(",")] if args.universe else None
            return cmd_eval(
                run,
                gt,
                strict_pr=not args.pr_inclusive,
                multilabel_exact=args.multilabel_exact,
                count_tolerance=args.count_tolerance,
                universe=universe,
            )
        if args.command == "curate":
            return cmd_curate(run, args)
        return cmd_stats(run, args.vocab)
    except UsageError as exc:
        print(f"maskunify: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"maskunify: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ServiceError as exc:
        print(f"maskunify: service error: {exc}", file=sys.stderr)
        return EXIT_SERVICE


if __name__ == "__main__":
    sys.exit(main())
