"""Graph construction: extraction calls, embedding and insertion."""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import IndexConfig, SourceFormat, UnitKind
from .corpus import CorpusBatch, Passage
from .errors import ExtractionParseError
from .extraction import (
    ExtractionRequest,
    ExtractionResult,
    build_extraction_request,
    parse_extraction_output,
    sentence_extraction,
)
from .graph_store import BuildInfo, GraphIndex
from .llm_gateway import INDEXING_SCOPE, CompletionRequest, EmbeddingPurpose, LLMGateway, Stage

logger = logging.getLogger(__name__)


@dataclass
class IndexBuildReport:
    passages: int = 0
    propositions: int = 0
    entities: int = 0
    merged_entities: int = 0
    extraction_calls: int = 0
    retried_passage_ids: list[str] = field(default_factory=list)
    failed_passages: dict[str, str] = field(default_factory=dict)
    warnings: dict[str, list[str]] = field(default_factory=dict)
    indexing_tokens: int = 0


class IndexBuilder:
    """Builds a frozen GraphIndex from a corpus."""

    def __init__(
        self,
        gateway: LLMGateway,
        config: IndexConfig,
        source_format: SourceFormat = SourceFormat.RETRIEVAL_SPLIT,
        build_info: BuildInfo | None = None,
        workers: int = 1,
    ):
        self.gateway = gateway
        self.config = config
        self.source_format = source_format
        self.build_info = build_info or BuildInfo(tau=config.tau, unit=config.unit.value)
        self.workers = workers
        self._type_vectors: dict[str, np.ndarray] = {}

    def build(self, corpus: CorpusBatch) -> tuple[GraphIndex, IndexBuildReport]:
        report = IndexBuildReport(passages=len(corpus))
        sentence_mode = self.config.unit == UnitKind.SENTENCE
        index = GraphIndex(self.gateway.dimension, has_entity_layer=not sentence_mode, build_info=self.build_info)

        passage_vectors = self._embed_passages(corpus.passages) if self.config.embed_passages else None
        for i, passage in enumerate(corpus.passages):
            index.add_passage(passage, passage_vectors[i] if passage_vectors is not None else None)

        if sentence_mode:
            self._insert_sentences(index, corpus.passages, report)
        else:
            self._insert_propositions(index, corpus.passages, report)

        index.freeze()
        report.propositions = len(index.propositions)
        report.entities = len(index.entities)
        report.indexing_tokens = self.gateway.ledger.indexing_total
        logger.info(
            f"Built index: {report.passages} passages, {report.propositions} units, {report.entities} entities "
            f"({len(report.failed_passages)} passages failed extraction)"
        )
        return index, report

    def _embed_passages(self, passages: Sequence[Passage]) -> np.ndarray:
        texts = [f"{p.title}. {p.text}" if p.title else p.text for p in passages]
        return self.gateway.embed_texts(texts, EmbeddingPurpose.PASSAGE)

    def _insert_sentences(self, index: GraphIndex, passages: Sequence[Passage], report: IndexBuildReport) -> None:
        for passage in passages:
            extraction = sentence_extraction(passage, self.config.min_sentence_tokens)
            if not extraction.propositions:
                # every sentence too short: keep the passage as one unit
                extraction = sentence_extraction(passage, min_tokens=0)
            vectors = self.gateway.embed_texts([p.text for p in extraction.propositions], EmbeddingPurpose.PROPOSITION)
            index.insert_passage_extraction(extraction, vectors, {}, self.config.tau)

    def _run_extraction(
        self, requests: list[ExtractionRequest], batches: list[list[Passage]]
    ) -> list[ExtractionResult]:
        call_ids = [self.gateway.ledger.reserve_call_id(INDEXING_SCOPE) for _ in requests]

        def run(i: int) -> ExtractionResult:
            response = self.gateway.complete(
                CompletionRequest(
                    user=requests[i].user,
                    system=requests[i].system,
                    stage=Stage.EXTRACTION,
                    question_id=INDEXING_SCOPE,
                    call_id=call_ids[i],
                )
            )
            try:
                return parse_extraction_output(response.text, batches[i])
            except ExtractionParseError as e:
                logger.warning(f"Extraction call {call_ids[i]} unparsable: {e}")
                return ExtractionResult(failures={p.passage_id: "no parsable passage block" for p in batches[i]})

        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            return list(executor.map(run, range(len(requests))))

    def _extract(self, passages: Sequence[Passage], report: IndexBuildReport) -> ExtractionResult:
        batch_size = self.config.batch_size_for(self.source_format)
        requests = build_extraction_request(passages, batch_size)
        batches = [list(passages[i : i + batch_size]) for i in range(0, len(passages), batch_size)]
        results = self._run_extraction(requests, batches)
        report.extraction_calls += len(requests)

        merged = ExtractionResult()
        for result in results:
            merged.absorb(result)

        if merged.failures:
            by_id = {p.passage_id: p for p in passages}
            retry = [by_id[pid] for pid in passages_in_order(passages, merged.failures)]
            report.retried_passage_ids.extend(p.passage_id for p in retry)
            logger.info(f"Retrying extraction for {len(retry)} passages one at a time")
            retry_results = self._run_extraction(build_extraction_request(retry, 1), [[p] for p in retry])
            report.extraction_calls += len(retry)
            for result in retry_results:
                merged.absorb(result)
        return merged

    def _insert_propositions(self, index: GraphIndex, passages: Sequence[Passage], report: IndexBuildReport) -> None:
        result = self._extract(passages, report)
        report.failed_passages = dict(result.failures)
        report.warnings = {pid: list(msgs) for pid, msgs in result.warnings.items()}
        for passage_id, reason in result.failures.items():
            logger.warning(f"Passage {passage_id} left out of the index: {reason}")

        for passage in passages:
            extraction = result.passages.get(passage.passage_id)
            if extraction is None:
                continue
            vectors = self.gateway.embed_texts([p.text for p in extraction.propositions], EmbeddingPurpose.PROPOSITION)
            type_vectors = self._type_embeddings({e.entity_type for e in extraction.entities})
            summary = index.insert_passage_extraction(extraction, vectors, type_vectors, self.config.tau)
            report.merged_entities += summary.merged_entities

    def _type_embeddings(self, labels: set[str]) -> dict[str, np.ndarray]:
        missing = sorted(label for label in labels if label not in self._type_vectors)
        if missing:
            vectors = self.gateway.embed_texts(missing, EmbeddingPurpose.TYPE_LABEL)
            self._type_vectors.update(zip(missing, vectors, strict=True))
        return {label: self._type_vectors[label] for label in labels}


def passages_in_order(passages: Sequence[Passage], ids: dict[str, str]) -> list[str]:
    return [p.passage_id for p in passages if p.passage_id in ids]
