"""Parsing of structured model outputs, with one re-prompt on failure."""

import json
import logging
import re
from collections.abc import Callable, Collection
from dataclasses import dataclass, field
from typing import Generic, TypeVar

from .errors import LLMOutputError
from .llm_gateway import CompletionRequest, CompletionResponse, LLMGateway, Stage

logger = logging.getLogger(__name__)

T = TypeVar("T")

REPROMPT_SUFFIX = (
    "\n\nYour previous reply could not be used ({reason}). Reply again, following the required output format exactly."
)

_KEY_RE = re.compile(r"^[\s>*#-]*\**\s*([A-Za-z][A-Za-z _-]*?)\s*\**\s*:(?:\*\*(?=\s|$))?\s*(.*)$")
_CITATION_RE = re.compile(r"\s*\[ID:\s*\d+\]", re.IGNORECASE)


@dataclass(frozen=True)
class CallRecord:
    """A prompt/response pair kept in the per-question trace."""

    call_id: str
    stage: str
    prompt: str
    response: str
    input_tokens: int
    output_tokens: int


@dataclass
class QuestionSession:
    """Routes one question's LLM calls through the gateway and keeps them."""

    gateway: LLMGateway
    question_id: str
    calls: list[CallRecord] = field(default_factory=list)

    def complete(self, stage: Stage, user: str, system: str = "") -> CompletionResponse:
        response = self.gateway.complete(
            CompletionRequest(user=user, system=system, stage=stage, question_id=self.question_id)
        )
        self.calls.append(
            CallRecord(
                call_id=response.call_id,
                stage=stage.value,
                prompt=user,
                response=response.text,
                input_tokens=response.input_tokens,
                output_tokens=response.output_tokens,
            )
        )
        return response

    @property
    def input_tokens(self) -> int:
        return sum(c.input_tokens for c in self.calls)

    @property
    def output_tokens(self) -> int:
        return sum(c.output_tokens for c in self.calls)


@dataclass
class Parsed(Generic[T]):
    """Outcome of a parsed call: the value, or None with the last error."""

    value: T | None
    call_ids: list[str]
    error: str | None = None

    @property
    def reprompted(self) -> bool:
        return len(self.call_ids) > 1


def complete_parsed(session: QuestionSession, stage: Stage, prompt: str, parse: Callable[[str], T]) -> Parsed[T]:
    """Call the model and parse its reply, re-prompting once on LLMOutputError."""
    response = session.complete(stage, prompt)
    try:
        return Parsed(parse(response.text), [response.call_id])
    except LLMOutputError as first:
        logger.warning(f"{response.call_id} {stage}: unparsable output ({first}); re-prompting")
        retry = session.complete(stage, prompt + REPROMPT_SUFFIX.format(reason=first))
        try:
            return Parsed(parse(retry.text), [response.call_id, retry.call_id])
        except LLMOutputError as second:
            logger.warning(f"{retry.call_id} {stage}: still unparsable after re-prompt ({second})")
            return Parsed(None, [response.call_id, retry.call_id], str(second))


def normalize_key(key: str) -> str:
    return re.sub(r"[\s-]+", "_", key.strip().lower())


def parse_key_values(text: str, known: Collection[str]) -> dict[str, str]:
    """Collect ``key: value`` lines for known keys.

    Markdown bullets and bold markers around keys are tolerated; lines that
    do not start a known key continue the previous value.
    """
    values: dict[str, str] = {}
    current: str | None = None
    for line in text.splitlines():
        match = _KEY_RE.match(line)
        key = normalize_key(match.group(1)) if match else None
        if match and key in known:
            current = key
            values[key] = match.group(2).strip()
        elif current is not None and line.strip():
            values[current] = f"{values[current]} {line.strip()}".strip()
    return values


def strip_quotes(value: str) -> str:
    value = value.strip()
    while len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'`*":
        value = value[1:-1].strip()
    return value


def strip_citations(text: str) -> str:
    """Remove ``[ID: n]`` citation tags."""
    return _CITATION_RE.sub("", text).strip()


def parse_int_list(value: str) -> list[int]:
    return [int(n) for n in re.findall(r"\d+", value)]


def parse_keywords(value: str) -> list[str]:
    """Read a keyword list written as JSON or as comma-separated text."""
    value = value.strip()
    if value.startswith("["):
        try:
            loaded = json.loads(value)
        except json.JSONDecodeError:
            value = value.strip("[]")
        else:
            if isinstance(loaded, list):
                return [strip_citations(str(k)).strip() for k in loaded if str(k).strip()]
    keywords = [strip_citations(strip_quotes(part)) for part in re.split(r"[,;]", value)]
    return [k for k in keywords if k]
