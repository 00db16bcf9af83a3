"""Tests for the graph index, entity dedup and persistence."""

import json
import math

import numpy as np
import pytest

from propgraph.corpus import Passage
from propgraph.errors import DataError, IndexStoreError
from propgraph.extraction import ExtractedEntity, ExtractedProposition, PassageExtraction
from propgraph.graph_store import (
    ENTITIES_FILE,
    MANIFEST_FILE,
    PROPOSITIONS_FILE,
    BuildInfo,
    GraphIndex,
    check_manifest,
    decode_vector,
    encode_vector,
    load,
    persist,
    serialize,
    unit_vector,
)
from propgraph.mock_backend import MockEmbedder


def type_vector(cosine):
    """A 2-d unit vector at the given cosine to (1, 0)."""
    return np.array([cosine, math.sqrt(1 - cosine**2)])


def extraction(passage_id, propositions, entities):
    return PassageExtraction(
        passage_id=passage_id,
        propositions=[ExtractedProposition(i, text, passage_id) for i, text in enumerate(propositions)],
        entities=[ExtractedEntity(name, etype, tuple(indices)) for name, etype, indices in entities],
    )


def random_index(n_passages=50, dimension=16, seed=3):
    """A frozen index with random unit embeddings and shared entity names."""
    embedder = MockEmbedder(dimension, seed=seed)
    rng = np.random.default_rng(seed)
    index = GraphIndex(dimension, build_info=BuildInfo(embedding_model="mock-embedding", corpus_hash="abc"))
    types = {label: embedder.vector(label) for label in ("Person", "Place", "Year")}
    for p in range(n_passages):
        passage_id = f"p{p}"
        index.add_passage(
            Passage(passage_id=passage_id, title=f"Title {p}", text=f"Passage number {p} text."),
            embedder.vector(passage_id),
        )
        props = [f"Fact {p}.{i} about entity {int(rng.integers(10))}." for i in range(int(rng.integers(1, 4)))]
        entities = [
            (f"Entity {int(rng.integers(10))}", str(rng.choice(list(types))), [int(rng.integers(len(props)))])
            for _ in range(2)
        ]
        index.insert_passage_extraction(
            extraction(passage_id, props, entities), embedder.embed(props), types, tau=0.7
        )
    return index.freeze()


class TestEntityDedup:
    """Test entity resolution by name and type similarity."""

    @pytest.fixture
    def index(self):
        index = GraphIndex(2)
        index.add_passage(Passage(passage_id="p", title="", text="x"))
        index._prop_entities.extend([[], [], []])
        return index

    @pytest.mark.parametrize(("cosine", "merged"), [(0.69, False), (0.70, True), (0.71, True)])
    def test_merge_threshold_is_inclusive(self, index, cosine, merged):
        first = index.resolve_entity("Aragon", "Region", type_vector(1.0), tau=0.7)
        second = index.resolve_entity("aragon ", "Kingdom", type_vector(cosine), tau=0.7)

        assert (first == second) is merged
        assert len(index.entities) == (1 if merged else 2)

    def test_merge_appends_type_label_and_keeps_first_embedding(self, index):
        entity_id = index.resolve_entity("Aragon", "Region", type_vector(1.0), tau=0.7)
        index.resolve_entity("ARAGON", "Kingdom", type_vector(0.9), tau=0.7)

        entity = index.entities[entity_id]
        assert entity.type_labels == ["Region", "Kingdom"]
        assert entity.entity_type == "Region"
        np.testing.assert_allclose(entity.type_embedding, type_vector(1.0), atol=1e-7)
        assert entity.canonical_name == "Aragon"

    def test_different_names_never_merge(self, index):
        a = index.resolve_entity("Martin", "Person", type_vector(1.0), tau=0.7)
        b = index.resolve_entity("Martin of Aragon", "Person", type_vector(1.0), tau=0.7)
        assert a != b

    def test_empty_name_rejected(self, index):
        with pytest.raises(ValueError, match="must not be empty"):
            index.resolve_entity("  ", "Person", type_vector(1.0), tau=0.7)


class TestGraphIndex:
    """Test graph construction and adjacency."""

    def test_worked_example_adjacency(self, worked_index):
        spain = next(e for e in worked_index.entities if e.canonical_name == "Spain")
        aragon = next(e for e in worked_index.entities if e.canonical_name == "Aragon")

        assert len(worked_index.passages) == 6
        assert len(worked_index.propositions) == 13
        assert len(worked_index.entities) == 14
        assert worked_index.props_of_entity(spain.entity_id) == frozenset({0, 1, 2, 3})
        assert worked_index.degree(aragon.entity_id) == 2
        assert worked_index.passage_of_prop(7) == "martin-death"
        assert worked_index.props_of_passage("palau") == [11, 12]
        assert spain.entity_id in worked_index.entities_of_prop(0)

    def test_every_proposition_has_one_passage(self, worked_index):
        for prop in worked_index.propositions:
            assert prop.prop_id in worked_index.props_of_passage(prop.passage_id)

    def test_unknown_ids(self, worked_index):
        with pytest.raises(KeyError):
            worked_index.props_of_entity(99)
        with pytest.raises(KeyError):
            worked_index.passage_of_prop(99)
        with pytest.raises(KeyError):
            worked_index.props_of_passage("nope")

    def test_frozen_index_rejects_writes(self, worked_index):
        assert worked_index.frozen
        with pytest.raises(IndexStoreError, match="frozen"):
            worked_index.add_passage(Passage(passage_id="new", title="", text="x"))

    def test_duplicate_passage(self):
        index = GraphIndex(2)
        index.add_passage(Passage(passage_id="p", title="", text="x"))
        with pytest.raises(DataError, match="duplicate passage_id"):
            index.add_passage(Passage(passage_id="p", title="", text="y"))

    def test_double_insert_rejected(self):
        index = GraphIndex(2)
        index.add_passage(Passage(passage_id="p", title="", text="x"))
        data = extraction("p", ["A is B."], [])
        index.insert_passage_extraction(data, np.array([[1.0, 0.0]]), {}, tau=0.7)
        with pytest.raises(DataError, match="already inserted"):
            index.insert_passage_extraction(data, np.array([[1.0, 0.0]]), {}, tau=0.7)

    def test_insert_validates_shapes_and_types(self):
        index = GraphIndex(2)
        index.add_passage(Passage(passage_id="p", title="", text="x"))
        data = extraction("p", ["A is B."], [("A", "Thing", [0])])

        with pytest.raises(DataError, match="expected"):
            index.insert_passage_extraction(data, np.ones((1, 3)), {"Thing": type_vector(1.0)}, tau=0.7)
        with pytest.raises(DataError, match="no type embedding"):
            index.insert_passage_extraction(data, np.array([[1.0, 0.0]]), {}, tau=0.7)
        with pytest.raises(DataError, match="unknown passage_id"):
            index.insert_passage_extraction(extraction("q", ["x"], []), np.ones((1, 2)), {}, tau=0.7)

    def test_insert_summary_counts_merges(self):
        index = GraphIndex(2)
        types = {"Thing": type_vector(1.0)}
        for pid in ("p1", "p2"):
            index.add_passage(Passage(passage_id=pid, title="", text="x"))
        index.insert_passage_extraction(extraction("p1", ["A."], [("A", "Thing", [0])]), np.ones((1, 2)), types, 0.7)
        summary = index.insert_passage_extraction(
            extraction("p2", ["A again."], [("A", "Thing", [0]), ("B", "Thing", [0])]), np.ones((1, 2)), types, 0.7
        )

        assert summary.propositions == 1
        assert summary.new_entities == 1
        assert summary.merged_entities == 1


class TestVectors:
    """Test vector encoding helpers."""

    def test_encode_is_little_endian_float32(self):
        encoded = encode_vector(np.array([1.0, -2.0]))
        assert decode_vector(encoded, 2).dtype == np.float32
        np.testing.assert_array_equal(decode_vector(encoded, 2), np.array([1.0, -2.0], dtype=np.float32))

    def test_decode_wrong_dimension(self):
        with pytest.raises(ValueError, match="expected 3"):
            decode_vector(encode_vector(np.ones(2)), 3)

    def test_unit_vector(self):
        np.testing.assert_allclose(unit_vector([3.0, 4.0]), [0.6, 0.8])
        with pytest.raises(ValueError):
            unit_vector([0.0, 0.0])


class TestPersistence:
    """Test persist/load."""

    def test_round_trip_equality(self, tmp_path):
        """Test a 50-passage index reloads equal and re-serializes to identical bytes."""
        index = random_index()
        manifest = persist(index, tmp_path / "idx")
        loaded = load(tmp_path / "idx")

        assert loaded == index
        assert loaded.frozen
        assert manifest.counts["passages"] == 50
        assert serialize(loaded) == serialize(index)
        np.testing.assert_allclose(loaded.prop_matrix, index.prop_matrix.astype(np.float32))

    def test_persist_is_deterministic(self, tmp_path):
        persist(random_index(), tmp_path / "a")
        persist(random_index(), tmp_path / "b")
        for name in (MANIFEST_FILE, ENTITIES_FILE, PROPOSITIONS_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_manifest(self, tmp_path):
        persist(random_index(5), tmp_path)
        (tmp_path / MANIFEST_FILE).unlink()
        with pytest.raises(IndexStoreError, match="missing manifest"):
            load(tmp_path)

    def test_tampered_data_file(self, tmp_path):
        """Test a one-byte change in a data file is detected."""
        persist(random_index(5), tmp_path)
        path = tmp_path / ENTITIES_FILE
        data = bytearray(path.read_bytes())
        data[10] = ord("X") if data[10] != ord("X") else ord("Y")
        path.write_bytes(bytes(data))

        with pytest.raises(IndexStoreError, match=f"content hash mismatch for {ENTITIES_FILE}"):
            load(tmp_path)

    def test_tampered_manifest(self, tmp_path):
        persist(random_index(5), tmp_path)
        path = tmp_path / MANIFEST_FILE
        manifest = json.loads(path.read_text())
        manifest["build"]["tau"] = 0.9
        path.write_text(json.dumps(manifest))

        with pytest.raises(IndexStoreError, match="manifest hash mismatch"):
            load(tmp_path)

    def test_schema_version_mismatch(self, tmp_path):
        persist(random_index(5), tmp_path)
        path = tmp_path / MANIFEST_FILE
        manifest = json.loads(path.read_text())
        manifest["schema_version"] = 99
        path.write_text(json.dumps(manifest))

        with pytest.raises(IndexStoreError, match="schema version mismatch"):
            load(tmp_path)

    def test_sentence_mode_has_empty_entity_file(self, tmp_path):
        index = GraphIndex(2, has_entity_layer=False)
        index.add_passage(Passage(passage_id="p", title="", text="x"))
        index.insert_passage_extraction(extraction("p", ["One two three."], []), np.array([[1.0, 0.0]]), {}, 0.7)
        persist(index.freeze(), tmp_path)

        assert (tmp_path / ENTITIES_FILE).read_bytes() == b""
        assert load(tmp_path).has_entity_layer is False

    def test_check_manifest(self, worked_index):
        assert check_manifest(worked_index, 8) == []
        warnings = check_manifest(worked_index, 16)
        assert len(warnings) == 1
        assert "dimension mismatch" in warnings[0]

    def test_check_manifest_model(self):
        index = random_index(2)
        assert check_manifest(index, 16, "mock-embedding") == []
        assert "model mismatch" in check_manifest(index, 16, "other-model")[0]
