"""Typed structures for the JSON records read and written by the app.

These types match only the fields we read or emit. Domain objects with
behavior live in their own modules as dataclasses or pydantic models.
"""

from typing import Literal, NotRequired, TypedDict


class CorpusRecord(TypedDict):
    passage_id: str
    title: str
    text: str


class QuestionRecordJSON(TypedDict, total=False):
    question_id: str
    question: str
    answers: list[str]
    gold_passage_ids: list[str]
    hops: NotRequired[int]
    sub_questions: NotRequired[list[str]]
    context: NotRequired[str]  # LongBench only


class ChatMessage(TypedDict):
    role: Literal["system", "user", "assistant"]
    content: str


class ChatUsage(TypedDict, total=False):
    prompt_tokens: int
    completion_tokens: int
    total_tokens: int


class ChatChoice(TypedDict, total=False):
    index: int
    message: ChatMessage
    finish_reason: str


class ChatCompletionJSON(TypedDict, total=False):
    id: str
    model: str
    choices: list[ChatChoice]
    usage: ChatUsage


class EmbeddingItem(TypedDict):
    index: int
    embedding: list[float]


class EmbeddingResponseJSON(TypedDict, total=False):
    data: list[EmbeddingItem]
    model: str
    usage: ChatUsage


class LedgerRow(TypedDict):
    call_id: str
    stage: str
    question_id: str
    input_tokens: int
    output_tokens: int


class ScriptedResponse(TypedDict, total=False):
    """One mock-backend reply loaded from a fixture file."""

    stage: str
    question_id: str
    text: str
    input_tokens: NotRequired[int]
    output_tokens: NotRequired[int]
