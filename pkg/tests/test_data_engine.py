import io
import json
from collections import Counter

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from maskunify import BBox, BinaryMask, ShapeMismatchError
from maskunify.data_engine import (
    DEFAULT_ATTRIBUTE_TAGS,
    FilterConfig,
    HttpScorer,
    KeywordScorer,
    ScorerError,
    ScorerUnavailable,
    SimilarityScorer,
    Triplet,
    Vocab,
    VocabError,
    coverage_stats,
    crop_mask_region,
    filter_pseudo_labels,
    ingest_one_to_one,
    make_one_to_many,
    make_one_to_zero,
)
from maskunify.io import mask_to_json, read_jsonl, write_jsonl
from synth import random_mask


def tree(*leaves, attributes=None):
    """Three-level vocab with every leaf under one root/branch pair."""
    obj = {"nodes": [{"id": "root", "children": [{"id": "mid", "children": [{"id": l} for l in leaves]}]}]}
    if attributes is not None:
        obj["attributes"] = attributes
    return Vocab.from_json(obj)


def block(shape, y0, x0, h, w):
    bits = np.zeros(shape, dtype=bool)
    bits[y0 : y0 + h, x0 : x0 + w] = True
    return BinaryMask(bits)


def triplet(expr="ship in the image.", cats=("ship",), attrs=(), shape=(10, 10), strategy="one-to-one"):
    return Triplet("img.png", expr, block(shape, 2, 2, 3, 3), strategy, frozenset(cats), frozenset(attrs))


class Constant(SimilarityScorer):
    def __init__(self, value):
        self.value = value

    def score(self, triplet, region):
        return self.value


class TestOneToMany:
    def test_single_category_union(self):
        shape = (8, 8)
        parts = [block(shape, 0, 0, 2, 2), block(shape, 4, 4, 2, 2), block(shape, 1, 1, 2, 2)]
        out = make_one_to_many("a.png", [("car", m) for m in parts])
        assert len(out) == 1
        expected = parts[0].bits | parts[1].bits | parts[2].bits
        assert np.array_equal(out[0].mask.bits, expected)
        assert out[0].expression == "car in the image."
        assert out[0].source_strategy == "one-to-many"

    def test_groups_by_category(self):
        shape = (8, 8)
        inst = [("car", block(shape, 0, 0, 2, 2)), ("car", block(shape, 4, 4, 2, 2)), ("ship", block(shape, 6, 0, 1, 1))]
        out = make_one_to_many("a.png", inst)
        assert [sorted(t.categories) for t in out] == [["car"], ["ship"]]

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            make_one_to_many("a", [("a", block((4, 4), 0, 0, 1, 1)), ("a", block((4, 5), 0, 0, 1, 1))])

    def test_matches_per_pixel_or(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            h, w = int(rng.integers(1, 12)), int(rng.integers(1, 12))
            inst = [(str(rng.choice(["a", "b", "c"])), BinaryMask(rng.random((h, w)) < 0.2)) for _ in range(rng.integers(1, 6))]
            out = {next(iter(t.categories)): t.mask.bits for t in make_one_to_many("x", inst)}
            assert set(out) == {c for c, _ in inst}
            for c, bits in out.items():
                for y in range(h):
                    for x in range(w):
                        assert bits[y, x] == any(m.bits[y, x] for cc, m in inst if cc == c)

    @given(st.lists(arrays(np.bool_, (5, 6)), min_size=1, max_size=5))
    def test_union_soundness(self, masks):
        (t,) = make_one_to_many("x", [("a", BinaryMask(m)) for m in masks])
        covered = np.logical_or.reduce(masks)
        assert not (t.mask.bits & ~covered).any()


class TestOneToZero:
    def test_nothing_requested(self):
        leaves = [f"c{i}" for i in range(10)]
        assert make_one_to_zero("x", leaves, tree(*leaves), 0, seed=1, shape=(4, 4)) == []

    def test_forced_choice(self):
        (t,) = make_one_to_zero("x", {"A"}, tree("A", "B"), 1, seed=0, shape=(3, 5))
        assert t.categories == {"B"}
        assert t.mask.shape == (3, 5) and not t.mask.any()
        assert t.source_strategy == "one-to-zero"

    def test_insufficient(self):
        with pytest.raises(ValueError):
            make_one_to_zero("x", {"A"}, tree("A", "B"), 2, seed=0, shape=(3, 3))

    def test_replay(self):
        leaves = [f"c{i:02d}" for i in range(40)]
        a = make_one_to_zero("x", {"c01"}, tree(*leaves), 7, seed="img:3", shape=(4, 4))
        b = make_one_to_zero("x", {"c01"}, tree(*leaves), 7, seed="img:3", shape=(4, 4))
        assert a == b
        assert len({next(iter(t.categories)) for t in a}) == 7
        assert all(not t.mask.any() and "c01" not in t.categories for t in a)

    def test_roughly_uniform(self):
        leaves = ["a", "b", "c", "d", "e", "present"]
        counts = Counter(
            next(iter(make_one_to_zero("x", {"present"}, leaves, 1, seed=s, shape=(1, 1))[0].categories))
            for s in range(5000)
        )
        assert set(counts) == {"a", "b", "c", "d", "e"}
        # each expected 1000 with sd ~28
        assert all(850 < n < 1150 for n in counts.values())


class TestIngest:
    def test_empty(self):
        assert ingest_one_to_one([]) == ([], [])

    def test_partial_tolerance(self):
        good = {"image": "a.png", "expression": "the red car", "mask": mask_to_json(block((4, 4), 0, 0, 2, 2))}
        bad = {"image": "b.png", "mask": mask_to_json(block((4, 4), 0, 0, 2, 2))}
        triplets, errors = ingest_one_to_one([good, bad])
        assert len(triplets) == 1 and triplets[0].source_strategy == "one-to-one"
        assert [e.index for e in errors] == [1]
        assert "expression" in errors[0].reason

    @pytest.mark.parametrize(
        "rec",
        [
            "not a record",
            {"image": "", "expression": "x", "mask": {"width": 1, "height": 1, "rle": [1]}},
            {"image": "a", "expression": "x", "mask": {"width": 2, "height": 1, "rle": [1]}},
            {"image": "a", "expression": "x"},
            {"image": "a", "expression": "x", "mask_path": "does-not-exist.png"},
        ],
    )
    def test_malformed_is_reported(self, rec):
        triplets, errors = ingest_one_to_one([rec])
        assert triplets == [] and len(errors) == 1

    def test_mask_path(self, tmp_path):
        Image.fromarray(np.array([[0, 255], [255, 0]], dtype=np.uint8)).save(tmp_path / "m.png")
        (t,), _ = ingest_one_to_one([{"image": "a.png", "expression": "x", "mask_path": "m.png"}], base_dir=tmp_path)
        assert t.mask.bits.tolist() == [[False, True], [True, False]]

    def test_manifest_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        originals = [
            Triplet(f"i{i}.png", f"object {i}", BinaryMask(random_mask(rng)), "one-to-one", {"car"}, {"color"}, f"t{i}")
            for i in range(50)
        ]
        write_jsonl(tmp_path / "m.jsonl", (t.to_json() for t in originals))
        records, errors = read_jsonl(tmp_path / "m.jsonl")
        assert errors == []
        back, bad = ingest_one_to_one(records)
        assert bad == []
        for a, b in zip(originals, back):
            assert np.array_equal(a.mask.bits, b.mask.bits)
            assert a == b


class TestCrop:
    def test_symmetric(self):
        m = block((20, 20), 5, 5, 1, 1)
        assert crop_mask_region((20, 20), m, 2) == BBox(3, 3, 7, 7)

    def test_clamped(self):
        m = block((20, 20), 0, 0, 1, 1)
        assert crop_mask_region((20, 20), m, 4) == BBox(0, 0, 4, 4)

    def test_empty(self):
        with pytest.raises(ValueError):
            crop_mask_region((5, 5), BinaryMask.zeros(5, 5), 1)

    def test_extent_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(300):
            bits = random_mask(rng, max_side=25, density=0.05)
            if not bits.any():
                continue
            pad = int(rng.integers(0, 6))
            ys, xs = np.nonzero(bits)
            h, w = bits.shape
            expected = BBox(
                max(int(xs.min()) - pad, 0), max(int(ys.min()) - pad, 0),
                min(int(xs.max()) + pad, w - 1), min(int(ys.max()) + pad, h - 1),
            )
            assert crop_mask_region((w, h), BinaryMask(bits), pad) == expected


class TestFilter:
    def test_all_accepted(self):
        cands = [triplet() for _ in range(5)]
        res = filter_pseudo_labels(cands, Constant(1.0))
        assert res.accepted == cands and res.rejected == [] and res.iterations == 1

    def test_all_rejected(self):
        cands = [triplet() for _ in range(5)]
        res = filter_pseudo_labels(cands, Constant(0.0), FilterConfig(similarity_threshold=0.5))
        assert res.accepted == [] and len(res.rejected) == 5
        assert all(r.score == 0.0 and r.iteration == 1 for r in res.rejected)

    def test_threshold_is_inclusive(self):
        assert len(filter_pseudo_labels([triplet()], Constant(0.5)).accepted) == 1

    @pytest.mark.parametrize("workers", [1, 4])
    def test_planted_errors_recovered(self, workers):
        rng = np.random.default_rng(0)
        cats = ["ship", "car", "bridge", "tank"]
        cands, correct = [], []
        for i in range(60):
            truth = cats[i % 4]
            wrong = rng.random() < 0.3
            named = cats[(i + 1) % 4] if wrong else truth
            t = Triplet(f"{i}.png", f"the {named} near the dock", block((12, 12), 1, 1, 4, 4), "vlm-attribute", {truth})
            cands.append(t)
            if not wrong:
                correct.append(t)
        res = filter_pseudo_labels(cands, KeywordScorer(), FilterConfig(workers=workers))
        assert res.accepted == correct
        assert len(res.accepted) + len(res.rejected) == len(cands)
        assert res.iterations == 2  # second pass drops nothing
        again = filter_pseudo_labels(res.accepted, KeywordScorer())
        assert again.accepted == res.accepted and again.rejected == []

    def test_scorer_failure_is_contained(self):
        class Flaky(SimilarityScorer):
            def score(self, triplet, region):
                if "bad" in triplet.expression:
                    raise RuntimeError("boom")
                return 1.0

        cands = [triplet("ship ok"), triplet("bad ship"), triplet("ship fine")]
        res = filter_pseudo_labels(cands, Flaky())
        assert [t.expression for t in res.accepted] == ["ship ok", "ship fine"]
        (rej,) = res.rejected
        assert "boom" in rej.error and not rej.unavailable and res.errors == 1

    def test_out_of_range_score_is_an_error(self):
        res = filter_pseudo_labels([triplet()], Constant(1.7))
        assert res.accepted == [] and "outside" in res.rejected[0].error

    @given(st.integers(1, 6), st.lists(st.integers(0, 8), min_size=0, max_size=20))
    @settings(max_examples=60)
    def test_terminates_and_shrinks(self, max_iter, lifetimes):
        """Each candidate survives ``lifetime`` passes; the loop must still stop on time."""

        class Decaying(SimilarityScorer):
            def __init__(self):
                self.calls = Counter()

            def score(self, t, region):
                self.calls[t.triplet_id] += 1
                return 1.0 if self.calls[t.triplet_id] <= lifetimes[int(t.triplet_id)] else 0.0

        cands = [
            Triplet("i", "x", block((4, 4), 0, 0, 1, 1), "vlm-attribute", triplet_id=str(i)) for i in range(len(lifetimes))
        ]
        scorer = Decaying()
        res = filter_pseudo_labels(cands, scorer, FilterConfig(max_iterations=max_iter))
        assert res.iterations <= max_iter
        assert len(res.accepted) + len(res.rejected) == len(cands)
        ids = [t.triplet_id for t in res.accepted] + [r.triplet.triplet_id for r in res.rejected]
        assert sorted(ids) == sorted(t.triplet_id for t in cands)
        for r in res.rejected:
            assert r.iteration == lifetimes[int(r.triplet.triplet_id)] + 1
        # each pass scores only what the previous pass kept
        assert all(n <= res.iterations for n in scorer.calls.values())

    def test_config_validation(self):
        for kwargs in ({"similarity_threshold": 2}, {"max_iterations": 0}, {"crop_padding": -1}):
            with pytest.raises(ValueError):
                FilterConfig(**kwargs)


class TestHttpScorer:
    @pytest.fixture
    def image(self, tmp_path):
        arr = np.zeros((20, 30, 3), dtype=np.uint8)
        arr[5:10, 6:12] = (200, 10, 10)
        Image.fromarray(arr).save(tmp_path / "scene.png")
        return tmp_path

    def make(self, root, handler, **kw):
        return HttpScorer("http://scorer.test", image_root=root, transport=httpx.MockTransport(handler), **kw)

    def test_wire_format(self, image):
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["type"] = request.headers["content-type"]
            seen["body"] = request.read()
            return httpx.Response(200, json={"score": 0.73})

        scorer = self.make(image, handler)
        t = Triplet("scene.png", "the red roof", block((20, 30), 5, 6, 5, 6), "vlm-attribute")
        assert scorer.score(t, BBox(6, 5, 11, 9)) == 0.73
        assert seen["url"] == "http://scorer.test/score"
        assert seen["type"].startswith("multipart/form-data")
        body = seen["body"]
        assert b'name="expression"' in body and b"the red roof" in body
        assert b'name="image"; filename="region.png"' in body
        png = body[body.index(b"\x89PNG") :]
        crop = np.asarray(Image.open(io.BytesIO(png)))
        assert crop.shape == (5, 6, 3) and (crop == (200, 10, 10)).all()

    def test_retries_server_errors(self, image):
        replies = iter([httpx.Response(503), httpx.Response(502), httpx.Response(200, json={"score": 1.0})])
        scorer = self.make(image, lambda r: next(replies), retries=2)
        t = Triplet("scene.png", "x", block((20, 30), 0, 0, 2, 2), "vlm-attribute")
        assert scorer.score(t, BBox(0, 0, 3, 3)) == 1.0

    def test_unreachable(self, image):
        calls = []

        def handler(request):
            calls.append(1)
            raise httpx.ConnectError("refused", request=request)

        scorer = self.make(image, handler, retries=1)
        t = Triplet("scene.png", "x", block((20, 30), 0, 0, 2, 2), "vlm-attribute")
        with pytest.raises(ScorerUnavailable):
            scorer.score(t, BBox(0, 0, 1, 1))
        assert len(calls) == 2
        res = filter_pseudo_labels([t], scorer)
        assert res.rejected[0].unavailable

    @pytest.mark.parametrize(
        "reply", [httpx.Response(400), httpx.Response(200, json={"nope": 1}), httpx.Response(200, json={"score": 3})]
    )
    def test_bad_replies(self, image, reply):
        scorer = self.make(image, lambda r: reply)
        t = Triplet("scene.png", "x", block((20, 30), 0, 0, 2, 2), "vlm-attribute")
        with pytest.raises(ScorerError) as info:
            scorer.score(t, BBox(0, 0, 1, 1))
        assert not isinstance(info.value, ScorerUnavailable)

    def test_missing_image(self, image):
        scorer = self.make(image, lambda r: httpx.Response(200, json={"score": 1}))
        with pytest.raises(ScorerError):
            scorer.score(triplet(), BBox(0, 0, 1, 1))


class TestVocab:
    def test_leaves_and_resolution(self):
        v = Vocab.from_json(
            {"nodes": [{"id": "vehicle", "children": [{"id": "land", "children": [{"id": "car", "name": "Small Car"}]}]}]}
        )
        assert v.leaves == ["car"]
        assert v.resolve("car") == "car" and v.resolve("small car") == "car" and v.resolve("boat") is None
        assert v.attribute_tags == DEFAULT_ATTRIBUTE_TAGS and len(DEFAULT_ATTRIBUTE_TAGS) == 16

    @pytest.mark.parametrize(
        "obj",
        [
            {"nodes": [{"id": "a", "children": [{"id": "b"}]}]},
            {"nodes": [{"id": "a", "children": [{"id": "b", "children": [{"id": "c", "children": [{"id": "d"}]}]}]}]},
            {"nodes": [{"id": "a", "children": [{"id": "a"}]}]},
            {"nodes": [{"name": "no id"}]},
        ],
    )
    def test_rejects_bad_trees(self, obj):
        with pytest.raises(VocabError):
            Vocab.from_json(obj)

    def test_cycle(self):
        with pytest.raises(VocabError):
            Vocab({"a": "a", "b": "b"}, {"a": "b", "b": "a"})

    def test_load(self, tmp_path):
        path = tmp_path / "v.json"
        path.write_text(json.dumps({"nodes": [{"id": "r", "children": [{"id": "m", "children": [{"id": "x"}]}]}], "attributes": ["color"]}))
        v = Vocab.load(path)
        assert v.leaves == ["x"] and v.attribute_tags == ("color",)


class TestCoverage:
    def test_empty(self):
        rep = coverage_stats([], tree("a"))
        assert (rep.samples, rep.categories, rep.attributes, rep.attr_per_sample, rep.out_of_vocab) == (0, 0, 0, 0.0, 0)

    def test_two_records(self):
        v = tree("ship", "car")
        rep = coverage_stats([triplet(attrs={"color"}), triplet(cats=("car",), attrs={"color", "state"})], v)
        assert rep.attr_per_sample == 1.5
        assert (rep.samples, rep.categories, rep.attributes) == (2, 2, 2)

    def test_out_of_vocab_bucket(self):
        rep = coverage_stats([triplet(cats=("ship", "ufo"))], tree("ship"))
        assert rep.categories == 1 and rep.out_of_vocab == 1 and rep.out_of_vocab_categories == ("ufo",)

    def test_ratio_is_exact(self):
        rng = np.random.default_rng(5)
        tags = list(DEFAULT_ATTRIBUTE_TAGS)
        ts = [triplet(attrs=set(rng.choice(tags, size=int(rng.integers(0, 6)), replace=False))) for _ in range(97)]
        total = sum(len(t.attributes) for t in ts)
        assert coverage_stats(ts, tree("ship")).attr_per_sample == total / 97

    def test_table_columns(self):
        text = coverage_stats([triplet(attrs={"color"})], tree("ship")).table()
        for col in ("# Samples", "# Cls", "# Attr", "# Attr/Sample"):
            assert col in text
