"""Scoring: simulated backend rule, cache determinism, incremental columns,
embedding wire client."""

from __future__ import annotations

import json

import httpx
import numpy as np
import pytest

from conceptevo import Concept, ConceptLibrary, LabelSet, generate_world, incremental_columns
from conceptevo.concepts import DatasetManifest, ManifestItem, merge_concepts
from conceptevo.errors import CacheCorrupt, IncompatibleVersions, ServiceError, ShapeError
from conceptevo._rng import SALT_NOISE, rng_for
from conceptevo.scoring import (
    EmbeddingServiceBackend,
    ScoreCache,
    SimulatedScoreBackend,
    cosine,
    dataset_id,
    score,
)
from conceptevo.simworld import initial_library, simulated_score


@pytest.fixture()
def small_world():
    return generate_world(3, 4, 0.5, 0.05, seed=5, images_per_class=4)


def test_simulated_score_matches_closed_form(small_world):
    """Regenerate base +/- noise from the simulator's rule independently."""
    w = small_world
    image_id = w.image_id(0)
    hit_phrase = w.phrase_map[w.class_attrs[0][0]]
    miss_attr = next(a for a in w.attribute_universe if a not in w.image_attrs[0])
    miss_phrase = w.phrase_map[miss_attr]
    for phrase, base in ((hit_phrase, w.base_hit), (miss_phrase, w.base_miss)):
        noise = rng_for(w.seed, SALT_NOISE, image_id, phrase.lower()).standard_normal()
        expected = base + w.noise_sigma * noise
        assert simulated_score(w, image_id, phrase) == pytest.approx(expected, abs=1e-12)


def test_unmapped_concept_scores_miss(small_world):
    w = small_world
    value = simulated_score(w, w.image_id(0), "a meaningless descriptor")
    assert abs(value - w.base_miss) < 5 * w.noise_sigma + 1e-9


def test_cosine_identical_unit_vectors():
    v = np.array([0.6, 0.8])
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)


def test_cosine_symmetry_fuzz():
    rng = np.random.default_rng(1)
    for _ in range(100):
        u, v = rng.normal(size=8), rng.normal(size=8)
        assert abs(cosine(u, v) - cosine(v, u)) < 1e-12


class TestCacheAndIncremental:
    def test_scoring_twice_is_byte_identical_and_cached(self, small_world, tmp_path):
        w = small_world
        manifest = w.manifest()
        lib = initial_library(w, 1.0)
        backend = SimulatedScoreBackend(w)
        cache = ScoreCache(tmp_path, backend.cache_key, dataset_id(manifest), manifest.n)
        first = score(backend, manifest, lib, cache=cache)
        calls_after_first = backend.calls
        assert calls_after_first == lib.total_concepts()
        second = score(backend, manifest, lib, cache=cache)
        assert backend.calls == calls_after_first  # zero new backend calls
        assert cache.hits == manifest.n * lib.total_concepts()
        assert first.values.tobytes() == second.values.tobytes()

    def test_only_new_columns_hit_backend(self, small_world, tmp_path):
        w = small_world
        manifest = w.manifest()
        lib = initial_library(w, 0.5)
        backend = SimulatedScoreBackend(w)
        cache = ScoreCache(tmp_path, backend.cache_key, dataset_id(manifest), manifest.n)
        score(backend, manifest, lib, cache=cache)
        before = backend.calls
        grown = merge_concepts(lib, 0, [Concept(text="brand new descriptor")])
        score(backend, manifest, grown, cache=cache)
        assert backend.calls == before + 1

    def test_incremental_columns_rules(self):
        labels = LabelSet(("a", "b", "c", "d"))
        base = ConceptLibrary(
            labels=labels,
            per_class=tuple((Concept(text=f"base {i}"),) for i in range(4)),
            version=0,
        )
        manifest = DatasetManifest(items=(ManifestItem("img", "ref", 0),))
        backend = _constant_backend()
        old = score(backend, manifest, base)
        assert incremental_columns(old, base) == []

        one = merge_concepts(base, 3, [Concept(text="new one")])
        ids = incremental_columns(old, one)
        assert len(ids) == 1 and ids[0] == one.column_ids()[-1]

        two = merge_concepts(base, 0, [Concept(text="p"), Concept(text="q")])
        two = merge_concepts(two, 2, [Concept(text="r"), Concept(text="s")])
        ids = incremental_columns(old, two)
        expected = [
            cid for cid in two.column_ids() if cid not in set(base.column_ids())
        ]
        assert ids == expected and len(ids) == 4

    def test_incompatible_versions(self, small_world):
        w = small_world
        manifest = w.manifest()
        full = initial_library(w, 1.0)
        half = initial_library(w, 0.5)
        old = score(SimulatedScoreBackend(w), manifest, full)
        with pytest.raises(IncompatibleVersions):
            incremental_columns(old, half)

    def test_corrupt_column_detected(self, small_world, tmp_path):
        w = small_world
        manifest = w.manifest()
        lib = initial_library(w, 1.0)
        backend = SimulatedScoreBackend(w)
        cache = ScoreCache(tmp_path, backend.cache_key, dataset_id(manifest), manifest.n)
        score(backend, manifest, lib, cache=cache)
        data_file = cache.data_path
        raw = bytearray(data_file.read_bytes())
        raw[20] ^= 0xFF  # inside the first column block, past the 17-byte header
        data_file.write_bytes(bytes(raw))
        fresh = ScoreCache(tmp_path, backend.cache_key, dataset_id(manifest), manifest.n)
        with pytest.raises(CacheCorrupt):
            fresh.get(lib.column_ids()[0])

    def test_corrupt_header_detected(self, small_world, tmp_path):
        w = small_world
        manifest = w.manifest()
        lib = initial_library(w, 0.5)
        backend = SimulatedScoreBackend(w)
        cache = ScoreCache(tmp_path, backend.cache_key, dataset_id(manifest), manifest.n)
        score(backend, manifest, lib, cache=cache)
        raw = bytearray(cache.data_path.read_bytes())
        raw[0] ^= 0xFF
        cache.data_path.write_bytes(bytes(raw))
        with pytest.raises(CacheCorrupt):
            ScoreCache(tmp_path, backend.cache_key, dataset_id(manifest), manifest.n)

    def test_wrong_row_count_rejected(self, small_world, tmp_path):
        w = small_world
        manifest = w.manifest()
        backend = SimulatedScoreBackend(w)
        ScoreCache(tmp_path, backend.cache_key, dataset_id(manifest), manifest.n)
        with pytest.raises(CacheCorrupt):
            ScoreCache(tmp_path, backend.cache_key, dataset_id(manifest), manifest.n + 1)


def _constant_backend():
    class Backend:
        cache_key = "const"
        calls = 0

        def score_column(self, manifest, class_label, concept_text, template):
            return np.full(manifest.n, 0.5, dtype=np.float32)

    return Backend()


def test_backend_shape_error():
    class Bad:
        cache_key = "bad"

        def score_column(self, manifest, class_label, concept_text, template):
            return np.zeros(manifest.n + 1, dtype=np.float32)

    labels = LabelSet(("a",))
    lib = ConceptLibrary(labels=labels, per_class=((Concept(text="x"),),), version=0)
    manifest = DatasetManifest(items=(ManifestItem("i", "r", 0),))
    with pytest.raises(ShapeError):
        score(Bad(), manifest, lib)


def test_separability_without_noise():
    w = generate_world(3, 4, 0.5, 0.0, seed=2, images_per_class=2)
    own = w.phrase_map[w.class_attrs[0][0]]
    absent_attr = next(a for a in w.class_attrs[2] if a not in w.image_attrs[0])
    other = w.phrase_map[absent_attr]
    img = w.image_id(0)
    assert simulated_score(w, img, own) > simulated_score(w, img, other)


class TestEmbeddingBackend:
    def _serve(self, text_vecs: dict[str, list[float]], image_vecs: dict[str, list[float]]):
        def handler(request: httpx.Request) -> httpx.Response:
            body = json.loads(request.content)
            table = image_vecs if body.get("input_type") == "image_id" else text_vecs
            data = [
                {"embedding": table[key], "index": i} for i, key in enumerate(body["input"])
            ]
            return httpx.Response(200, json={"data": data, "model": body["model"]})

        return httpx.MockTransport(handler)

    def test_identical_vectors_score_one(self):
        v = [0.6, 0.8, 0.0]
        transport = self._serve({"a photo of a cat. whiskers": v}, {"img_a": v, "img_b": v})
        backend = EmbeddingServiceBackend("http://emb.test", "clip", transport=transport)
        manifest = DatasetManifest(
            items=(ManifestItem("img_a", "r", 0), ManifestItem("img_b", "r", 0))
        )
        col = backend.score_column(manifest, "cat", "whiskers", "a photo of a {class}. {concept}")
        assert np.allclose(col, 1.0, atol=1e-6)

    def test_batch_count_mismatch(self):
        def handler(request):
            return httpx.Response(200, json={"data": []})

        backend = EmbeddingServiceBackend(
            "http://emb.test", "clip", transport=httpx.MockTransport(handler)
        )
        manifest = DatasetManifest(items=(ManifestItem("img_a", "r", 0),))
        with pytest.raises(ShapeError):
            backend.score_column(manifest, "cat", "whiskers", "{class} {concept}")

    def test_service_error_after_retries(self):
        def handler(request):
            return httpx.Response(500, json={})

        backend = EmbeddingServiceBackend(
            "http://emb.test", "clip", max_retries=2, transport=httpx.MockTransport(handler)
        )
        manifest = DatasetManifest(items=(ManifestItem("img_a", "r", 0),))
        with pytest.raises(ServiceError):
            backend.score_column(manifest, "cat", "whiskers", "{class} {concept}")
