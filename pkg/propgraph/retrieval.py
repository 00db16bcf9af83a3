"""Hybrid proposition search, entity aggregation and passage voting."""

import logging
import math
from collections.abc import Collection, Sequence
from dataclasses import dataclass, field

import numpy as np

from .config import RetrievalConfig, RetrievalMode, Weighting
from .errors import DataError, IndexStoreError
from .graph_store import GraphIndex
from .llm_gateway import EmbeddingPurpose, LLMGateway

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchStatement:
    """A declarative search statement with its keyword bag and embedding."""

    statement: str
    keywords: tuple[str, ...]
    embedding: np.ndarray = field(compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.statement.strip():
            raise ValueError("search statement must not be empty")


@dataclass(frozen=True)
class RankedProposition:
    prop_id: int
    score: float
    rank: int


@dataclass(frozen=True)
class ScoredEntity:
    entity_id: int
    score: float


@dataclass(frozen=True)
class ScoredPassage:
    passage_id: str
    score: float


def sigma(cosine: float, bm25: float, lam: float) -> float:
    """Hybrid score: cosine plus log-damped lexical evidence."""
    return cosine + lam * math.log1p(bm25)


def _order(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Positions sorted by descending score, ties by ascending id."""
    return np.lexsort((ids, -scores))


class Retriever:
    """Read-only scoring over a frozen index; safe to share across threads."""

    def __init__(self, index: GraphIndex, config: RetrievalConfig | None = None, gateway: LLMGateway | None = None):
        if not index.frozen:
            raise IndexStoreError("retrieval needs a frozen index")
        self.index = index
        self.config = config or RetrievalConfig()
        self.gateway = gateway

    def embed_statement(self, statement: str, keywords: Sequence[str] = ()) -> SearchStatement:
        """Embed a statement through the gateway."""
        if self.gateway is None:
            raise RuntimeError("Retriever was created without a gateway")
        vector = self.gateway.embed_texts([statement], EmbeddingPurpose.STATEMENT)[0]
        return SearchStatement(statement=statement, keywords=tuple(keywords), embedding=vector)

    def _query_vector(self, stmt: SearchStatement) -> np.ndarray:
        vector = np.asarray(stmt.embedding, dtype=np.float64)
        if vector.shape != (self.index.embedding_dimension,):
            raise DataError(
                f"statement embedding has shape {vector.shape}, index dimension is {self.index.embedding_dimension}"
            )
        return vector

    # Scoring

    def bm25(self, keywords: Sequence[str], prop_id: int) -> float:
        return self.index.bm25.score(keywords, prop_id)

    def hybrid_score(self, stmt: SearchStatement, prop_id: int) -> float:
        lexical = self.bm25(stmt.keywords, prop_id)
        cosine = float(np.dot(self.index.prop_matrix[prop_id], self._query_vector(stmt)))
        return sigma(cosine, lexical, self.config.lambda_)

    def hybrid_scores(self, stmt: SearchStatement) -> np.ndarray:
        """σ for every proposition, aligned with prop ids."""
        cosines = self.index.prop_matrix @ self._query_vector(stmt)
        if not stmt.keywords or self.config.lambda_ == 0:
            return cosines
        return cosines + self.config.lambda_ * np.log1p(self.index.bm25.score_all(stmt.keywords))

    def search_propositions(
        self, stmt: SearchStatement, m: int | None = None, excluded: Collection[int] = frozenset()
    ) -> list[RankedProposition]:
        """Top-m propositions by σ among those not excluded."""
        m = m or self.config.m
        scores = self.hybrid_scores(stmt)
        ids = np.arange(len(scores))
        if excluded:
            keep = np.ones(len(scores), dtype=bool)
            keep[[p for p in excluded if 0 <= p < len(scores)]] = False
            scores, ids = scores[keep], ids[keep]

        order = _order(scores, ids)[:m]
        return [
            RankedProposition(prop_id=int(ids[pos]), score=float(scores[pos]), rank=rank)
            for rank, pos in enumerate(order, 1)
        ]

    def aggregate_entities(
        self, ranked: Sequence[RankedProposition], k: int | None = None, excluded: Collection[int] = frozenset()
    ) -> list[ScoredEntity]:
        """Entity scores: σ-sum of retrieved linked propositions over sqrt(1 + degree)."""
        k = k or self.config.k_entities
        sums: dict[int, float] = {}
        for prop in ranked:
            for entity_id in self.index.entities_of_prop(prop.prop_id):
                if entity_id not in excluded:
                    sums[entity_id] = sums.get(entity_id, 0.0) + prop.score

        scored = [
            ScoredEntity(entity_id=eid, score=total / math.sqrt(1 + self.index.degree(eid)))
            for eid, total in sums.items()
        ]
        scored.sort(key=lambda e: (-e.score, e.entity_id))
        return scored[:k]

    def rank_pool(
        self,
        stmt: SearchStatement,
        pool: Collection[int],
        d: int | None = None,
        weighting: Weighting | None = None,
    ) -> list[ScoredPassage]:
        """Vote pooled propositions up to their passages by cosine rank."""
        d = d or self.config.d_passages
        weighting = weighting or self.config.weighting
        if not pool:
            return []

        ids = np.array(sorted(pool), dtype=np.int64)
        cosines = self.index.prop_matrix[ids] @ self._query_vector(stmt)
        votes: dict[str, float] = {}
        for rank, pos in enumerate(_order(cosines, ids), 1):
            passage_id = self.index.passage_of_prop(int(ids[pos]))
            vote = 1.0 / (1 + rank) if weighting == Weighting.RANKVOTE else 1.0
            votes[passage_id] = votes.get(passage_id, 0.0) + vote

        ranked = sorted(votes.items(), key=lambda item: (-item[1], item[0]))
        return [ScoredPassage(passage_id=pid, score=score) for pid, score in ranked[:d]]

    def rank_passages(
        self,
        stmt: SearchStatement,
        selected_entities: Collection[int],
        d: int | None = None,
        weighting: Weighting | None = None,
        excluded_props: Collection[int] = frozenset(),
    ) -> list[ScoredPassage]:
        """Rank passages reachable from the selected entities."""
        return self.rank_pool(stmt, self.pool_of(selected_entities, excluded_props), d, weighting)

    def pool_of(self, selected_entities: Collection[int], excluded_props: Collection[int] = frozenset()) -> set[int]:
        pool: set[int] = set()
        for entity_id in selected_entities:
            pool |= self.index.props_of_entity(entity_id)
        return pool - set(excluded_props)

    def dense_passages(
        self, stmt: SearchStatement, k: int, excluded: Collection[str] = frozenset()
    ) -> list[ScoredPassage]:
        """Cosine over whole-passage embeddings, skipping the graph."""
        if not len(self.index.passage_matrix):
            raise IndexStoreError("index has no passage embeddings; rebuild with embed_passages enabled")
        cosines = self.index.passage_matrix @ self._query_vector(stmt)
        order = sorted(range(len(cosines)), key=lambda i: (-cosines[i], self.index.passage_order[i]))
        hits = [
            ScoredPassage(passage_id=self.index.passage_order[i], score=float(cosines[i]))
            for i in order
            if self.index.passage_order[i] not in excluded
        ]
        return hits[:k]

    def single_pass(self, stmt: SearchStatement, k: int) -> list[ScoredPassage]:
        """One retrieval round for a statement, no LLM involved."""
        if self.config.mode == RetrievalMode.DPR_BYPASS:
            return self.dense_passages(stmt, k)

        ranked = self.search_propositions(stmt, self.config.m)
        if not self.index.has_entity_layer:
            return self.rank_pool(stmt, {p.prop_id for p in ranked}, d=k)
        entities = self.aggregate_entities(ranked, self.config.k_entities)
        return self.rank_passages(stmt, [e.entity_id for e in entities], d=k)

    def single_pass_retrieve(self, question_text: str, k: int) -> list[str]:
        """Embed the raw question (no keywords) and retrieve k passages."""
        stmt = self.embed_statement(question_text)
        passages = [p.passage_id for p in self.single_pass(stmt, k)]
        logger.debug(f"Single-pass retrieval returned {len(passages)} passages")
        return passages
