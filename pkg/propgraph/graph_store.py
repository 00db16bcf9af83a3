"""The three-layer entity/proposition/passage graph, entity dedup and persistence."""

import base64
import hashlib
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .bm25 import BM25Index, tokenize
from .corpus import Passage
from .errors import DataError, IndexStoreError
from .extraction import ExtractionResult, PassageExtraction

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NORM_TOLERANCE = 1e-5
# float32 storage shifts cosines by ~1e-7; keep the tau boundary inclusive
TAU_TOLERANCE = 1e-6

MANIFEST_FILE = "manifest.json"
PASSAGES_FILE = "passages.jsonl"
PROPOSITIONS_FILE = "propositions.jsonl"
ENTITIES_FILE = "entities.jsonl"
BM25_FILE = "bm25.json"
DATA_FILES = (PASSAGES_FILE, PROPOSITIONS_FILE, ENTITIES_FILE, BM25_FILE)


def encode_vector(vector: np.ndarray) -> str:
    """Base64 (standard alphabet, padded) of little-endian float32 values."""
    return base64.b64encode(np.asarray(vector, dtype="<f4").tobytes()).decode("ascii")


def decode_vector(text: str, dimension: int) -> np.ndarray:
    """Inverse of encode_vector.

    Raises:
        ValueError: If the payload is not valid base64 of ``dimension`` floats
    """
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    if len(raw) != 4 * dimension:
        raise ValueError(f"expected {dimension} float32 values, got {len(raw) // 4}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def unit_vector(vector: Sequence[float] | np.ndarray) -> np.ndarray:
    """Normalize to unit length in float64.

    Raises:
        ValueError: If the vector has zero norm
    """
    array = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(array))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return array / norm


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class BuildInfo(BaseModel):
    """Models and constants an index was built with."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    chat_model: str = ""
    embedding_model: str = ""
    tau: float = 0.7
    lambda_: float = Field(default=0.2, alias="lambda")
    unit: str = "proposition"
    source_format: str = "retrieval_split"
    corpus_hash: str = ""


class IndexManifest(BaseModel):
    schema_version: int
    embedding_dimension: int
    build: BuildInfo
    counts: dict[str, int]
    has_entity_layer: bool
    has_passage_embeddings: bool
    files: dict[str, str]
    manifest_hash: str = ""

    def compute_hash(self) -> str:
        body = self.model_dump(mode="json", by_alias=True)
        body["manifest_hash"] = ""
        return hashlib.sha256(_dumps(body).encode("utf-8")).hexdigest()


class PropositionNode:
    """An atomic statement with its embedding and single parent passage."""

    __slots__ = ("embedding", "passage_id", "prop_id", "text")

    def __init__(self, prop_id: int, text: str, passage_id: str, embedding: np.ndarray):
        self.prop_id = prop_id
        self.text = text
        self.passage_id = passage_id
        self.embedding = np.asarray(embedding, dtype=np.float32)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PropositionNode):
            return NotImplemented
        return (
            self.prop_id == other.prop_id
            and self.text == other.text
            and self.passage_id == other.passage_id
            and np.array_equal(self.embedding, other.embedding)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"PropositionNode(prop_id={self.prop_id}, passage_id={self.passage_id!r}, text={self.text!r})"


class EntityNode:
    """A deduplicated typed entity linking the propositions that mention it."""

    __slots__ = ("canonical_name", "entity_id", "prop_ids", "type_embedding", "type_labels")

    def __init__(
        self,
        entity_id: int,
        canonical_name: str,
        type_labels: list[str],
        type_embedding: np.ndarray,
        prop_ids: Iterable[int] = (),
    ):
        self.entity_id = entity_id
        self.canonical_name = canonical_name
        self.type_labels = type_labels
        self.type_embedding = np.asarray(type_embedding, dtype=np.float32)
        self.prop_ids: set[int] = set(prop_ids)

    @property
    def degree(self) -> int:
        return len(self.prop_ids)

    @property
    def entity_type(self) -> str:
        return self.type_labels[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EntityNode):
            return NotImplemented
        return (
            self.entity_id == other.entity_id
            and self.canonical_name == other.canonical_name
            and self.type_labels == other.type_labels
            and self.prop_ids == other.prop_ids
            and np.array_equal(self.type_embedding, other.type_embedding)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"EntityNode(entity_id={self.entity_id}, name={self.canonical_name!r}, degree={self.degree})"


@dataclass(frozen=True)
class InsertSummary:
    propositions: int
    new_entities: int
    merged_entities: int


class GraphIndex:
    """Passages, propositions and entities with their edges.

    Ids are positions: ``prop_id`` indexes ``propositions`` and ``entity_id``
    indexes ``entities``. The index is mutable until ``freeze()``; after that
    it is read-only and safe to share between threads.
    """

    def __init__(self, embedding_dimension: int, has_entity_layer: bool = True, build_info: BuildInfo | None = None):
        if embedding_dimension < 1:
            raise ValueError("embedding_dimension must be at least 1")
        self.embedding_dimension = embedding_dimension
        self.has_entity_layer = has_entity_layer
        self.build_info = build_info or BuildInfo()
        self.passages: dict[str, Passage] = {}
        self.passage_embeddings: dict[str, np.ndarray] = {}
        self.propositions: list[PropositionNode] = []
        self.entities: list[EntityNode] = []
        self.bm25 = BM25Index()
        self.manifest: IndexManifest | None = None

        self._name_index: dict[str, list[int]] = {}
        self._prop_entities: list[list[int]] = []
        self._passage_props: dict[str, list[int]] = {}
        self._extracted: set[str] = set()
        self._frozen = False
        self.prop_matrix = np.zeros((0, embedding_dimension), dtype=np.float64)
        self.passage_order: list[str] = []
        self.passage_matrix = np.zeros((0, embedding_dimension), dtype=np.float64)

    # Build phase

    def _check_mutable(self) -> None:
        if self._frozen:
            raise IndexStoreError("index is frozen")

    def _check_vector(self, vector: np.ndarray, what: str) -> np.ndarray:
        array = np.asarray(vector, dtype=np.float64)
        if array.shape != (self.embedding_dimension,):
            raise DataError(
                f"{what} has dimension {array.shape[-1] if array.ndim else 0}, index expects {self.embedding_dimension}"
            )
        return array

    def add_passage(self, passage: Passage, embedding: np.ndarray | None = None) -> None:
        """Register a passage node.

        Raises:
            DataError: On a duplicate passage_id or a wrong-sized embedding
        """
        self._check_mutable()
        if passage.passage_id in self.passages:
            raise DataError(f"duplicate passage_id '{passage.passage_id}'")
        if embedding is not None:
            self.passage_embeddings[passage.passage_id] = self._check_vector(embedding, "passage embedding").astype(
                np.float32
            )
        self.passages[passage.passage_id] = passage
        self._passage_props[passage.passage_id] = []

    def resolve_entity(
        self, name: str, type_label: str, type_embedding: np.ndarray, tau: float, prop_ids: Iterable[int] = ()
    ) -> int:
        """Return the entity a (name, type) resolves to, creating it if needed.

        Merges into an existing node iff the trimmed, case-folded names are
        equal and the cosine of the type embeddings is at least ``tau``. The
        first-seen type embedding is kept; new type labels are appended.

        Raises:
            ValueError: If name is empty
        """
        self._check_mutable()
        name = name.strip()
        if not name:
            raise ValueError("entity name must not be empty")
        vector = self._check_vector(type_embedding, "type embedding")
        key = name.casefold()

        for entity_id in self._name_index.get(key, []):
            entity = self.entities[entity_id]
            cosine = float(np.dot(vector, entity.type_embedding.astype(np.float64)))
            if cosine >= tau - TAU_TOLERANCE:
                if type_label not in entity.type_labels:
                    entity.type_labels.append(type_label)
                self._link(entity_id, prop_ids)
                return entity_id

        entity_id = len(self.entities)
        self.entities.append(
            EntityNode(entity_id=entity_id, canonical_name=name, type_labels=[type_label], type_embedding=vector)
        )
        self._name_index.setdefault(key, []).append(entity_id)
        self._link(entity_id, prop_ids)
        return entity_id

    def _link(self, entity_id: int, prop_ids: Iterable[int]) -> None:
        for prop_id in prop_ids:
            if prop_id not in self.entities[entity_id].prop_ids:
                self.entities[entity_id].prop_ids.add(prop_id)
                self._prop_entities[prop_id].append(entity_id)

    def insert_passage_extraction(
        self,
        extraction: PassageExtraction,
        embeddings: np.ndarray,
        type_embeddings: Mapping[str, np.ndarray],
        tau: float,
    ) -> InsertSummary:
        """Insert one passage's propositions and entities.

        Args:
            extraction: Parsed propositions and entities of a registered passage
            embeddings: One row per proposition, in local-index order
            type_embeddings: Embedding per entity type label
            tau: Type-similarity threshold for entity merging

        Raises:
            DataError: Unknown or already-inserted passage, dimension mismatch,
                or a missing type embedding
        """
        self._check_mutable()
        passage_id = extraction.passage_id
        if passage_id not in self.passages:
            raise DataError(f"unknown passage_id '{passage_id}'")
        if passage_id in self._extracted:
            raise DataError(f"duplicate passage_id '{passage_id}': extraction already inserted")

        matrix = np.asarray(embeddings, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape != (len(extraction.propositions), self.embedding_dimension):
            raise DataError(
                f"proposition embeddings have shape {matrix.shape}, expected "
                f"({len(extraction.propositions)}, {self.embedding_dimension})"
            )
        for entity in extraction.entities:
            if entity.entity_type not in type_embeddings:
                raise DataError(f"no type embedding for '{entity.entity_type}'")
            self._check_vector(type_embeddings[entity.entity_type], "type embedding")

        base = len(self.propositions)
        for proposition, vector in zip(extraction.propositions, matrix, strict=True):
            prop_id = len(self.propositions)
            self.propositions.append(
                PropositionNode(prop_id=prop_id, text=proposition.text, passage_id=passage_id, embedding=vector)
            )
            self._prop_entities.append([])
            self._passage_props[passage_id].append(prop_id)
            self.bm25.add_document(proposition.text)

        before = len(self.entities)
        for entity in extraction.entities:
            self.resolve_entity(
                entity.canonical_name,
                entity.entity_type,
                type_embeddings[entity.entity_type],
                tau,
                prop_ids=[base + i for i in entity.proposition_indices],
            )
        self._extracted.add(passage_id)

        new_entities = len(self.entities) - before
        return InsertSummary(
            propositions=len(extraction.propositions),
            new_entities=new_entities,
            merged_entities=len(extraction.entities) - new_entities,
        )

    def insert_extraction(
        self,
        result: ExtractionResult,
        embeddings: np.ndarray,
        type_embeddings: Mapping[str, np.ndarray],
        tau: float,
    ) -> InsertSummary:
        """Insert every parsed passage of an extraction result.

        ``embeddings`` rows follow the propositions of ``result.passages`` in
        iteration order.
        """
        matrix = np.asarray(embeddings, dtype=np.float64)
        expected = sum(len(p.propositions) for p in result.passages.values())
        if matrix.ndim != 2 or matrix.shape[0] != expected:
            raise DataError(f"got {matrix.shape[0] if matrix.ndim else 0} proposition embeddings, expected {expected}")

        totals = [0, 0, 0]
        offset = 0
        for extraction in result.passages.values():
            count = len(extraction.propositions)
            summary = self.insert_passage_extraction(
                extraction, matrix[offset : offset + count], type_embeddings, tau
            )
            offset += count
            totals[0] += summary.propositions
            totals[1] += summary.new_entities
            totals[2] += summary.merged_entities
        return InsertSummary(propositions=totals[0], new_entities=totals[1], merged_entities=totals[2])

    def freeze(self) -> "GraphIndex":
        """End the build phase and precompute the scoring matrices."""
        if self.passage_embeddings and len(self.passage_embeddings) != len(self.passages):
            raise IndexStoreError("passage embeddings must cover every passage or none")
        self.prop_matrix = (
            np.vstack([p.embedding for p in self.propositions]).astype(np.float64)
            if self.propositions
            else np.zeros((0, self.embedding_dimension), dtype=np.float64)
        )
        self.passage_order = list(self.passages)
        self.passage_matrix = (
            np.vstack([self.passage_embeddings[pid] for pid in self.passage_order]).astype(np.float64)
            if self.passage_embeddings
            else np.zeros((0, self.embedding_dimension), dtype=np.float64)
        )
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    # Adjacency queries

    def props_of_entity(self, entity_id: int) -> frozenset[int]:
        return frozenset(self._entity(entity_id).prop_ids)

    def degree(self, entity_id: int) -> int:
        return self._entity(entity_id).degree

    def passage_of_prop(self, prop_id: int) -> str:
        return self._proposition(prop_id).passage_id

    def entities_of_prop(self, prop_id: int) -> list[int]:
        self._proposition(prop_id)
        return list(self._prop_entities[prop_id])

    def props_of_passage(self, passage_id: str) -> list[int]:
        if passage_id not in self._passage_props:
            raise KeyError(f"unknown passage_id '{passage_id}'")
        return list(self._passage_props[passage_id])

    def _entity(self, entity_id: int) -> EntityNode:
        if not 0 <= entity_id < len(self.entities):
            raise KeyError(f"unknown entity_id {entity_id}")
        return self.entities[entity_id]

    def _proposition(self, prop_id: int) -> PropositionNode:
        if not 0 <= prop_id < len(self.propositions):
            raise KeyError(f"unknown prop_id {prop_id}")
        return self.propositions[prop_id]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GraphIndex):
            return NotImplemented
        return (
            self.embedding_dimension == other.embedding_dimension
            and self.has_entity_layer == other.has_entity_layer
            and self.build_info == other.build_info
            and self.passages == other.passages
            and self.passage_embeddings.keys() == other.passage_embeddings.keys()
            and all(np.array_equal(v, other.passage_embeddings[k]) for k, v in self.passage_embeddings.items())
            and self.propositions == other.propositions
            and self.entities == other.entities
            and self.bm25 == other.bm25
        )

    __hash__ = None  # type: ignore[assignment]


# Persistence


def _passage_lines(index: GraphIndex) -> list[str]:
    lines = []
    for passage_id, passage in index.passages.items():
        record: dict[str, Any] = passage.model_dump()
        if passage_id in index.passage_embeddings:
            record["embedding"] = encode_vector(index.passage_embeddings[passage_id])
        lines.append(_dumps(record))
    return lines


def _proposition_lines(index: GraphIndex) -> list[str]:
    return [
        _dumps(
            {
                "embedding": encode_vector(p.embedding),
                "passage_id": p.passage_id,
                "prop_id": p.prop_id,
                "text": p.text,
            }
        )
        for p in index.propositions
    ]


def _entity_lines(index: GraphIndex) -> list[str]:
    return [
        _dumps(
            {
                "canonical_name": e.canonical_name,
                "entity_id": e.entity_id,
                "prop_ids": sorted(e.prop_ids),
                "type_embedding": encode_vector(e.type_embedding),
                "type_labels": e.type_labels,
            }
        )
        for e in index.entities
    ]


def serialize(index: GraphIndex) -> dict[str, bytes]:
    """Render every index file to bytes, manifest included."""
    files = {
        PASSAGES_FILE: "".join(line + "\n" for line in _passage_lines(index)).encode("utf-8"),
        PROPOSITIONS_FILE: "".join(line + "\n" for line in _proposition_lines(index)).encode("utf-8"),
        ENTITIES_FILE: "".join(line + "\n" for line in _entity_lines(index)).encode("utf-8"),
        BM25_FILE: (_dumps(index.bm25.to_json()) + "\n").encode("utf-8"),
    }
    manifest = IndexManifest(
        schema_version=SCHEMA_VERSION,
        embedding_dimension=index.embedding_dimension,
        build=index.build_info,
        counts={
            "entities": len(index.entities),
            "passages": len(index.passages),
            "propositions": len(index.propositions),
        },
        has_entity_layer=index.has_entity_layer,
        has_passage_embeddings=bool(index.passage_embeddings),
        files={name: hashlib.sha256(data).hexdigest() for name, data in sorted(files.items())},
    )
    manifest.manifest_hash = manifest.compute_hash()
    files[MANIFEST_FILE] = (_dumps(manifest.model_dump(mode="json", by_alias=True)) + "\n").encode("utf-8")
    return files


def persist(index: GraphIndex, directory: Path) -> IndexManifest:
    """Write the index to ``directory``; the manifest is written last."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = serialize(index)
    for name in DATA_FILES:
        (directory / name).write_bytes(files[name])
    (directory / MANIFEST_FILE).write_bytes(files[MANIFEST_FILE])

    manifest = IndexManifest.model_validate_json(files[MANIFEST_FILE])
    index.manifest = manifest
    logger.info(
        f"Persisted index to {directory}: {len(index.passages)} passages, "
        f"{len(index.propositions)} propositions, {len(index.entities)} entities"
    )
    return manifest


def _read_manifest(directory: Path) -> IndexManifest:
    path = directory / MANIFEST_FILE
    if not path.is_file():
        raise IndexStoreError(f"missing manifest in {directory}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise IndexStoreError(f"manifest is not valid JSON: {e.msg}", line_number=e.lineno) from e
    if not isinstance(raw, dict):
        raise IndexStoreError("manifest must be a JSON object")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise IndexStoreError(
            f"schema version mismatch: index has {raw.get('schema_version')}, expected {SCHEMA_VERSION}"
        )
    try:
        manifest = IndexManifest.model_validate(raw)
    except ValidationError as e:
        raise IndexStoreError(f"invalid manifest: {e.error_count()} validation errors") from e
    if manifest.manifest_hash != manifest.compute_hash():
        raise IndexStoreError("manifest hash mismatch: manifest was modified after the index was written")
    return manifest


def _iter_records(directory: Path, name: str, data: bytes) -> Iterable[tuple[int, dict[str, Any]]]:
    for line_number, line in enumerate(data.decode("utf-8").splitlines(), 1):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise IndexStoreError(f"corrupted record in {name}: {e.msg}", line_number=line_number) from e
        if not isinstance(record, dict):
            raise IndexStoreError(f"corrupted record in {name}: not an object", line_number=line_number)
        yield line_number, record


def load(directory: Path) -> GraphIndex:
    """Load and validate a persisted index; the result is frozen.

    Raises:
        IndexStoreError: Missing manifest, schema mismatch, content-hash
            mismatch, or a corrupted record (with its line number)
    """
    directory = Path(directory)
    manifest = _read_manifest(directory)

    contents: dict[str, bytes] = {}
    for name in DATA_FILES:
        path = directory / name
        if not path.is_file():
            raise IndexStoreError(f"missing {name} in {directory}")
        contents[name] = path.read_bytes()
        if hashlib.sha256(contents[name]).hexdigest() != manifest.files.get(name):
            raise IndexStoreError(f"content hash mismatch for {name}: the file was modified")

    dim = manifest.embedding_dimension
    index = GraphIndex(dim, has_entity_layer=manifest.has_entity_layer, build_info=manifest.build)

    for line_number, record in _iter_records(directory, PASSAGES_FILE, contents[PASSAGES_FILE]):
        try:
            passage = Passage(passage_id=record["passage_id"], title=record["title"], text=record["text"])
            embedding = decode_vector(record["embedding"], dim) if "embedding" in record else None
            index.add_passage(passage, embedding)
        except (KeyError, ValueError, ValidationError, DataError) as e:
            raise IndexStoreError(f"corrupted record in {PASSAGES_FILE}: {e}", line_number=line_number) from e

    for line_number, record in _iter_records(directory, PROPOSITIONS_FILE, contents[PROPOSITIONS_FILE]):
        try:
            prop_id = int(record["prop_id"])
            passage_id = str(record["passage_id"])
            vector = decode_vector(record["embedding"], dim)
            if prop_id != len(index.propositions) or passage_id not in index.passages:
                raise ValueError("prop_id out of order or unknown passage")
            if abs(float(np.linalg.norm(vector.astype(np.float64))) - 1.0) > NORM_TOLERANCE:
                raise ValueError("embedding is not unit-normalized")
        except (KeyError, ValueError) as e:
            raise IndexStoreError(f"corrupted record in {PROPOSITIONS_FILE}: {e}", line_number=line_number) from e
        index.propositions.append(
            PropositionNode(prop_id=prop_id, text=str(record["text"]), passage_id=passage_id, embedding=vector)
        )
        index._prop_entities.append([])
        index._passage_props[passage_id].append(prop_id)

    for line_number, record in _iter_records(directory, ENTITIES_FILE, contents[ENTITIES_FILE]):
        try:
            entity_id = int(record["entity_id"])
            prop_ids = [int(p) for p in record["prop_ids"]]
            labels = [str(label) for label in record["type_labels"]]
            if entity_id != len(index.entities) or not prop_ids or not labels:
                raise ValueError("entity_id out of order, or no propositions or type labels")
            if any(not 0 <= p < len(index.propositions) for p in prop_ids):
                raise ValueError("entity links to an unknown proposition")
            vector = decode_vector(record["type_embedding"], dim)
        except (KeyError, ValueError) as e:
            raise IndexStoreError(f"corrupted record in {ENTITIES_FILE}: {e}", line_number=line_number) from e
        name = str(record["canonical_name"])
        index.entities.append(EntityNode(entity_id, name, labels, vector))
        index._name_index.setdefault(name.casefold(), []).append(entity_id)
        index._link(entity_id, prop_ids)

    try:
        index.bm25 = BM25Index.from_json(json.loads(contents[BM25_FILE]))
    except (KeyError, ValueError, TypeError, AttributeError) as e:
        raise IndexStoreError(f"corrupted {BM25_FILE}: {e}") from e
    for prop in index.propositions:
        if prop.prop_id >= index.bm25.n_docs or index.bm25.lengths[prop.prop_id] != len(tokenize(prop.text)):
            raise IndexStoreError(f"{BM25_FILE} is inconsistent with proposition {prop.prop_id}")

    counts = {"entities": len(index.entities), "passages": len(index.passages), "propositions": len(index.propositions)}
    if counts != manifest.counts:
        raise IndexStoreError(f"record counts {counts} disagree with manifest {manifest.counts}")

    index._extracted = {pid for pid, props in index._passage_props.items() if props}
    index.manifest = manifest
    index.freeze()
    logger.info(f"Loaded index from {directory}: {counts['passages']} passages, {counts['propositions']} propositions")
    return index


def check_manifest(index: GraphIndex, expected_dimension: int, embedding_model: str | None = None) -> list[str]:
    """Compare an index against the configured encoder; mismatches are warnings."""
    warnings = []
    if index.embedding_dimension != expected_dimension:
        warnings.append(
            f"embedding dimension mismatch: index has {index.embedding_dimension}, "
            f"encoder produces {expected_dimension}"
        )
    if embedding_model and index.build_info.embedding_model and index.build_info.embedding_model != embedding_model:
        warnings.append(
            f"embedding model mismatch: index built with '{index.build_info.embedding_model}', "
            f"configured '{embedding_model}'"
        )
    for warning in warnings:
        logger.warning(warning)
    return warnings
