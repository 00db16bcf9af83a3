"""Corpus and question-set loading for both evaluation settings."""

import hashlib
import json
import logging
import re
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from pydantic import AliasChoices, BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .config import SourceFormat
from .errors import DataError, format_validation_error

logger = logging.getLogger(__name__)

DEFAULT_LONGBENCH_DELIMITER = r"Passage \d+:[ \t]*\n"


class Passage(BaseModel):
    """A source passage (a member of the passage layer)."""

    model_config = ConfigDict(frozen=True, extra="ignore")

    passage_id: str
    title: str
    text: str

    @field_validator("passage_id", "text")
    @classmethod
    def validate_non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("must not be empty")
        return v


class QuestionRecord(BaseModel):
    """A question with gold answers and optional supervision.

    LongBench releases use ``_id``/``input``/``answers``/``context``; both
    spellings are accepted.
    """

    model_config = ConfigDict(frozen=True, extra="ignore", populate_by_name=True)

    question_id: str = Field(validation_alias=AliasChoices("question_id", "_id"))
    question: str = Field(validation_alias=AliasChoices("question", "input"))
    gold_answers: list[str] = Field(validation_alias=AliasChoices("answers", "gold_answers"))
    gold_passage_ids: list[str] = Field(
        default_factory=list, validation_alias=AliasChoices("gold_passage_ids", "supporting_passage_ids")
    )
    hop_count: int | None = Field(default=None, validation_alias=AliasChoices("hops", "hop_count"))
    gold_sub_questions: list[str] | None = Field(
        default=None, validation_alias=AliasChoices("sub_questions", "gold_sub_questions")
    )
    context: str | None = None

    @field_validator("question")
    @classmethod
    def validate_question(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("question text must not be empty")
        return v

    @field_validator("gold_answers", mode="before")
    @classmethod
    def normalize_answers(cls, v: Any) -> Any:
        """Store answers as an alias list even when a single string is given."""
        if isinstance(v, str):
            v = [v]
        if isinstance(v, list):
            return [str(a).strip() for a in v if a is not None and str(a).strip()]
        return v

    @field_validator("hop_count")
    @classmethod
    def validate_hops(cls, v: int | None) -> int | None:
        if v is not None and v < 2:
            raise ValueError("hops must be at least 2")
        return v

    @model_validator(mode="after")
    def _require_answer(self) -> "QuestionRecord":
        if not self.gold_answers:
            raise ValueError(f"question '{self.question_id}' has no gold answer")
        return self


@dataclass(frozen=True)
class CorpusBatch:
    """An ordered, duplicate-free list of passages."""

    passages: tuple[Passage, ...]
    source_format: SourceFormat

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for i, passage in enumerate(self.passages):
            if passage.passage_id in seen:
                raise DataError(f"duplicate passage_id '{passage.passage_id}'", record_index=i)
            seen.add(passage.passage_id)

    def __len__(self) -> int:
        return len(self.passages)

    def by_id(self) -> dict[str, Passage]:
        return {p.passage_id: p for p in self.passages}


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield (record_index, object) for each non-blank line of a JSONL file."""
    try:
        handle = Path(path).open(encoding="utf-8")
    except FileNotFoundError as e:
        raise DataError(f"file not found: {path}") from e

    with handle:
        index = 0
        for line in handle:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"invalid JSON: {e.msg}", record_index=index) from e
            if not isinstance(obj, dict):
                raise DataError("record is not a JSON object", record_index=index)
            yield index, obj
            index += 1


def split_longbench_context(
    question_id: str, context: str, delimiter: str = DEFAULT_LONGBENCH_DELIMITER
) -> list[Passage]:
    """Split one LongBench context into passages with ids ``<question_id>#<k>``.

    The first line of each segment is taken as its title when the segment
    has more than one line.
    """
    passages = []
    for segment in re.split(delimiter, context):
        segment = segment.strip()
        if not segment:
            continue
        title, sep, body = segment.partition("\n")
        if not sep or not body.strip():
            title, body = "", segment
        passages.append(
            Passage(passage_id=f"{question_id}#{len(passages)}", title=title.strip(), text=body.strip())
        )
    return passages


def load_corpus(
    path: Path,
    source_format: SourceFormat = SourceFormat.RETRIEVAL_SPLIT,
    delimiter: str = DEFAULT_LONGBENCH_DELIMITER,
) -> CorpusBatch:
    """Load a corpus into a CorpusBatch.

    Args:
        path: JSONL file (passage records, or LongBench question records)
        source_format: Schema of the file
        delimiter: Passage delimiter regex inside LongBench contexts

    Returns:
        The loaded batch, in file order

    Raises:
        DataError: On a missing file, schema violation, duplicate id or empty corpus
    """
    passages: list[Passage] = []
    recorded: set[str] = set()
    for index, obj in _read_jsonl(path):
        try:
            if source_format == SourceFormat.LONGBENCH:
                record = QuestionRecord.model_validate(obj)
                if not record.context:
                    raise DataError(f"question '{record.question_id}' has no context", record_index=index)
                passages.extend(split_longbench_context(record.question_id, record.context, delimiter))
            else:
                passages.append(Passage.model_validate(obj))
                if "source_format" in obj:
                    recorded.add(str(obj["source_format"]))
        except ValidationError as e:
            raise DataError(format_validation_error(e), record_index=index) from e

    if not passages:
        raise DataError("empty corpus")
    if recorded:
        source_format = _recorded_format(recorded)

    batch = CorpusBatch(passages=tuple(passages), source_format=source_format)
    logger.info(f"Loaded {len(batch)} passages from {path} ({source_format})")
    return batch


def _recorded_format(recorded: set[str]) -> SourceFormat:
    if len(recorded) > 1:
        raise DataError(f"passage records disagree on source_format: {sorted(recorded)}")
    (value,) = recorded
    try:
        return SourceFormat(value)
    except ValueError as e:
        raise DataError(f"unknown source_format '{value}' in passage records") from e


def dump_corpus(batch: CorpusBatch, path: Path) -> None:
    """Write a batch as passage records, one JSON object per line.

    Each record carries the batch's ``source_format`` so that loading the file
    as passage records gives back an equal batch, LongBench splits included.
    """
    with Path(path).open("w", encoding="utf-8") as handle:
        for passage in batch.passages:
            record = {**passage.model_dump(), "source_format": batch.source_format.value}
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_question_set(path: Path, source_format: SourceFormat = SourceFormat.RETRIEVAL_SPLIT) -> list[QuestionRecord]:
    """Load a question set.

    Raises:
        DataError: On a missing file or a record failing validation (the
            message names the record index, and the question_id when the
            failure is a missing gold answer)
    """
    records: list[QuestionRecord] = []
    seen: set[str] = set()
    for index, obj in _read_jsonl(path):
        try:
            record = QuestionRecord.model_validate(obj)
        except ValidationError as e:
            raise DataError(format_validation_error(e), record_index=index) from e
        if record.question_id in seen:
            raise DataError(f"duplicate question_id '{record.question_id}'", record_index=index)
        seen.add(record.question_id)
        records.append(record)

    logger.info(f"Loaded {len(records)} questions from {path} ({source_format})")
    return records


def corpus_hash(batch: CorpusBatch) -> str:
    """Stable content hash of a corpus, recorded in the index manifest."""
    digest = hashlib.sha256()
    for passage in batch.passages:
        digest.update(passage.model_dump_json().encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()
