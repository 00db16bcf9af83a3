"""Uniform access to chat and embedding backends, with token accounting."""

import csv
import logging
import threading
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from fractions import Fraction
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import BackendError

logger = logging.getLogger(__name__)

INDEXING_SCOPE = "indexing"
LEDGER_CSV_HEADER = ["call_id", "stage", "question_id", "input_tokens", "output_tokens"]


class Stage(StrEnum):
    EXTRACTION = "extraction"
    PLANNING = "planning"
    REWRITING = "rewriting"
    SELECTION = "selection"
    EVALUATION = "evaluation"
    SYNTHESIS = "synthesis"
    JUDGE = "judge"
    DIFFICULTY = "difficulty"


class EmbeddingPurpose(StrEnum):
    PROPOSITION = "proposition"
    STATEMENT = "statement"
    TYPE_LABEL = "type_label"
    PASSAGE = "passage"


# Extractors run cold, generators slightly warm, difficulty sampling hot.
STAGE_TEMPERATURES: dict[Stage, float] = {
    Stage.EXTRACTION: 0.1,
    Stage.JUDGE: 0.1,
    Stage.PLANNING: 0.2,
    Stage.REWRITING: 0.2,
    Stage.SELECTION: 0.2,
    Stage.EVALUATION: 0.2,
    Stage.SYNTHESIS: 0.2,
    Stage.DIFFICULTY: 1.0,
}


def estimate_tokens(*texts: str) -> int:
    """Whitespace token count used when a backend reports no usage."""
    return sum(len(text.split()) for text in texts)


@dataclass(frozen=True)
class ChatReply:
    text: str
    input_tokens: int
    output_tokens: int


class ChatBackend(Protocol):
    def chat(self, system: str, user: str, temperature: float, stage: Stage, scope: str) -> ChatReply: ...


class EmbeddingBackend(Protocol):
    dimension: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


@dataclass(frozen=True)
class CompletionRequest:
    user: str
    stage: Stage
    system: str = ""
    temperature: float | None = None
    question_id: str = INDEXING_SCOPE
    call_id: str | None = None


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    input_tokens: int
    output_tokens: int
    call_id: str
    stage: Stage
    temperature: float


@dataclass(frozen=True)
class EmbeddingRequest:
    texts: tuple[str, ...]
    purpose: EmbeddingPurpose


@dataclass(frozen=True)
class LedgerEntry:
    call_id: str
    stage: Stage
    question_id: str
    input_tokens: int
    output_tokens: int

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens

    @property
    def sort_key(self) -> tuple[str, int]:
        scope, _, seq = self.call_id.rpartition(":")
        return scope, int(seq)


class TokenLedger:
    """Append-only record of every LLM call, safe under concurrent appends.

    Call ids are ``<scope>:<seq>`` with a per-scope counter, so a question
    answered sequentially gets the same ids no matter how many other
    questions run alongside it.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: list[LedgerEntry] = []
        self._sequences: dict[str, int] = {}

    def reserve_call_id(self, scope: str) -> str:
        with self._lock:
            seq = self._sequences.get(scope, 0) + 1
            self._sequences[scope] = seq
        return f"{scope}:{seq:04d}"

    def record(self, entry: LedgerEntry) -> None:
        if entry.input_tokens < 0 or entry.output_tokens < 0:
            raise ValueError("token counts must not be negative")
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> list[LedgerEntry]:
        """Entries ordered by call id."""
        with self._lock:
            return sorted(self._entries, key=lambda e: e.sort_key)

    def entries_for(self, question_id: str) -> list[LedgerEntry]:
        return [e for e in self.entries if e.question_id == question_id]

    @property
    def indexing_total(self) -> int:
        return sum(e.total for e in self.entries if e.question_id == INDEXING_SCOPE)

    @property
    def total(self) -> int:
        return sum(e.total for e in self.entries)

    def export_csv(self, path: Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(LEDGER_CSV_HEADER)
            for e in self.entries:
                writer.writerow([e.call_id, e.stage.value, e.question_id, e.input_tokens, e.output_tokens])


@dataclass(frozen=True)
class QuestionTokens:
    question_id: str
    input_tokens: int
    output_tokens: int
    indexing_share: Fraction

    @property
    def inference_tokens(self) -> int:
        return self.input_tokens + self.output_tokens

    @property
    def total(self) -> Fraction:
        return self.inference_tokens + self.indexing_share

    @property
    def total_rounded(self) -> int:
        return round(self.total)


@dataclass(frozen=True)
class LedgerReport:
    questions: dict[str, QuestionTokens] = field(default_factory=dict)
    indexing_total: int = 0
    inference_total: int = 0

    @property
    def grand_total(self) -> int:
        return self.indexing_total + self.inference_total


def amortize(inference: Mapping[str, tuple[int, int]], indexing_total: int) -> LedgerReport:
    """Attribute tokens to questions, amortizing indexing evenly.

    T_i = inference tokens of question i + indexing_total / N. Shares are kept
    as fractions so the per-question totals sum exactly to the grand total;
    rounding happens only when a caller asks for ``total_rounded``.

    Args:
        inference: (input, output) token counts per question id
        indexing_total: Tokens spent building the index
    """
    share = Fraction(indexing_total, len(inference)) if inference else Fraction(0)
    questions = {
        qid: QuestionTokens(question_id=qid, input_tokens=inp, output_tokens=out, indexing_share=share)
        for qid, (inp, out) in inference.items()
    }
    return LedgerReport(
        questions=questions,
        indexing_total=indexing_total,
        inference_total=sum(q.inference_tokens for q in questions.values()),
    )


def ledger_report(ledger: TokenLedger, question_ids: Iterable[str], indexing_total: int | None = None) -> LedgerReport:
    """Per-question T_i from a ledger.

    Args:
        ledger: Finalized ledger
        question_ids: The N evaluated questions
        indexing_total: Indexing tokens when they live in a separate ledger
    """
    per_question: dict[str, tuple[int, int]] = {qid: (0, 0) for qid in question_ids}
    for entry in ledger.entries:
        if entry.question_id in per_question:
            inp, out = per_question[entry.question_id]
            per_question[entry.question_id] = (inp + entry.input_tokens, out + entry.output_tokens)
    return amortize(per_question, ledger.indexing_total if indexing_total is None else indexing_total)


class LLMGateway:
    """Bounded-concurrency front door for every chat and embedding call."""

    def __init__(
        self,
        chat_backend: ChatBackend,
        embedding_backend: EmbeddingBackend,
        ledger: TokenLedger | None = None,
        max_in_flight: int = 4,
        embedding_batch_size: int = 64,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        self.chat_backend = chat_backend
        self.embedding_backend = embedding_backend
        self.ledger = ledger or TokenLedger()
        self.max_in_flight = max_in_flight
        self.embedding_batch_size = embedding_batch_size
        self._slots = threading.BoundedSemaphore(max_in_flight)

    @property
    def dimension(self) -> int:
        return self.embedding_backend.dimension

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        """Run one chat completion and ledger its usage.

        Raises:
            BackendError: When the backend fails after its retry policy
        """
        temperature = request.temperature if request.temperature is not None else STAGE_TEMPERATURES[request.stage]
        call_id = request.call_id or self.ledger.reserve_call_id(request.question_id)

        with self._slots:
            try:
                reply = self.chat_backend.chat(
                    request.system, request.user, temperature, request.stage, request.question_id
                )
            except BackendError as e:
                if e.stage is None:
                    raise BackendError(str(e), stage=request.stage.value, retryable=e.retryable) from e
                raise

        self.ledger.record(
            LedgerEntry(
                call_id=call_id,
                stage=request.stage,
                question_id=request.question_id,
                input_tokens=reply.input_tokens,
                output_tokens=reply.output_tokens,
            )
        )
        logger.debug(f"{call_id} {request.stage}: {reply.input_tokens} in / {reply.output_tokens} out")
        return CompletionResponse(
            text=reply.text,
            input_tokens=reply.input_tokens,
            output_tokens=reply.output_tokens,
            call_id=call_id,
            stage=request.stage,
            temperature=temperature,
        )

    def embed(self, request: EmbeddingRequest) -> np.ndarray:
        """Embed texts into unit vectors, one row per text.

        Raises:
            ValueError: If any text is empty
            BackendError: If the backend returns the wrong shape
        """
        texts = list(request.texts)
        for i, text in enumerate(texts):
            if not text or not text.strip():
                raise ValueError(f"cannot embed empty text at position {i} ({request.purpose})")
        if not texts:
            return np.zeros((0, self.dimension), dtype=np.float64)

        rows = []
        for start in range(0, len(texts), self.embedding_batch_size):
            chunk = texts[start : start + self.embedding_batch_size]
            with self._slots:
                vectors = np.asarray(self.embedding_backend.embed(chunk), dtype=np.float64)
            if vectors.shape != (len(chunk), self.dimension):
                raise BackendError(
                    f"embedding backend returned shape {vectors.shape}, expected ({len(chunk)}, {self.dimension})"
                )
            rows.append(vectors)

        matrix = np.vstack(rows)
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise BackendError("embedding backend returned a zero vector")
        return matrix / norms

    def embed_texts(self, texts: Sequence[str], purpose: EmbeddingPurpose) -> np.ndarray:
        return self.embed(EmbeddingRequest(texts=tuple(texts), purpose=purpose))
