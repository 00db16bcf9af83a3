"""Joint proposition and entity extraction: request building and output parsing."""

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass, field

from .corpus import Passage
from .errors import ExtractionParseError
from .prompts import PromptName, render

logger = logging.getLogger(__name__)

DEFAULT_ENTITY_TYPE = "Entity"

_HEADER_RE = re.compile(r"^\s*Passage\s*\[(\d+)\]\s*:?\s*$", re.MULTILINE)
_PROPOSITION_RE = re.compile(r"^\[(\d+)\]\s*(.+)$")
_SENTENCE_BOUNDARY_RE = re.compile(r"(?<=[.!?])\s+(?=[A-Z])")


@dataclass(frozen=True)
class ExtractedProposition:
    local_index: int
    text: str
    passage_id: str


@dataclass(frozen=True)
class ExtractedEntity:
    canonical_name: str
    entity_type: str
    proposition_indices: tuple[int, ...]


@dataclass
class PassageExtraction:
    """Propositions and entities recovered for one passage."""

    passage_id: str
    propositions: list[ExtractedProposition] = field(default_factory=list)
    entities: list[ExtractedEntity] = field(default_factory=list)


@dataclass
class ExtractionResult:
    """Parsed extraction output for a batch.

    ``failures`` maps passage_id to the reason its block was rejected;
    ``warnings`` collects per-passage faults that did not reject the block
    (dropped entity rows and the like).
    """

    passages: dict[str, PassageExtraction] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    warnings: dict[str, list[str]] = field(default_factory=dict)

    @property
    def failed_passage_ids(self) -> list[str]:
        return list(self.failures)

    def warn(self, passage_id: str, message: str) -> None:
        self.warnings.setdefault(passage_id, []).append(message)

    def absorb(self, other: "ExtractionResult") -> None:
        """Fold a retry result in, clearing failures it resolved."""
        for passage_id, extraction in other.passages.items():
            self.passages[passage_id] = extraction
            self.failures.pop(passage_id, None)
        for passage_id, reason in other.failures.items():
            self.failures[passage_id] = reason
        for passage_id, messages in other.warnings.items():
            self.warnings.setdefault(passage_id, []).extend(messages)


@dataclass(frozen=True)
class ExtractionRequest:
    """One joint-extraction prompt and the passages it numbers, in order."""

    user: str
    passage_ids: tuple[str, ...]
    system: str = ""


def format_passages(passages: Sequence[Passage]) -> str:
    """Number passages as ``Passage [N]`` blocks with title and content."""
    blocks = [
        f"Passage [{n}]:\nDocument Title: {passage.title}\nContent: {passage.text}"
        for n, passage in enumerate(passages)
    ]
    return "\n\n".join(blocks)


def build_extraction_request(passages: Sequence[Passage], batch_size: int) -> list[ExtractionRequest]:
    """Split passages into batches and render one extraction prompt per batch.

    Args:
        passages: Passages to extract from
        batch_size: Passages per request

    Returns:
        One request per batch, in input order

    Raises:
        ValueError: If batch_size < 1 or passages is empty
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if not passages:
        raise ValueError("passages must not be empty")

    requests = []
    for start in range(0, len(passages), batch_size):
        batch = passages[start : start + batch_size]
        requests.append(
            ExtractionRequest(
                user=render(PromptName.EXTRACTION, passages=format_passages(batch)),
                passage_ids=tuple(p.passage_id for p in batch),
            )
        )
    return requests


def _parse_entity_row(line: str, n_propositions: int) -> tuple[ExtractedEntity | None, str | None]:
    """Parse ``Name|Type|indices``; returns (entity, None) or (None, reason)."""
    parts = [part.strip() for part in line.split("|")]
    if len(parts) < 3:
        return None, f"malformed entity row '{line}'"

    name, entity_type, raw_indices = parts[0], parts[1], parts[-1]
    if len(parts) > 3:
        entity_type = "|".join(parts[1:-1]).strip()
    if not name:
        return None, f"entity row without a name '{line}'"
    entity_type = entity_type or DEFAULT_ENTITY_TYPE

    indices: set[int] = set()
    for token in re.split(r"[\s,;]+", raw_indices.strip("[]() ")):
        if not token:
            continue
        token = token.strip("[]()")
        if not token.isdigit():
            return None, f"entity '{name}' has non-numeric index '{token}'"
        index = int(token)
        if index >= n_propositions:
            return None, f"entity '{name}' references missing proposition {index}"
        indices.add(index)

    if not indices:
        return None, f"entity '{name}' has no proposition indices"
    entity = ExtractedEntity(canonical_name=name, entity_type=entity_type, proposition_indices=tuple(sorted(indices)))
    return entity, None


def _parse_block(block: str, passage_id: str, result: ExtractionResult) -> PassageExtraction | None:
    lines = [line.strip() for line in block.splitlines()]
    lines = [line for line in lines if line]

    try:
        prop_start = next(i for i, line in enumerate(lines) if line.lower().startswith("propositions"))
    except StopIteration:
        result.failures[passage_id] = "missing Propositions section"
        return None
    entity_start = next((i for i, line in enumerate(lines) if line.lower().startswith("entities")), None)
    if entity_start is None or entity_start < prop_start:
        result.failures[passage_id] = "missing Entities section"
        return None

    extraction = PassageExtraction(passage_id=passage_id)
    for line in lines[prop_start + 1 : entity_start]:
        match = _PROPOSITION_RE.match(line)
        if match is None:
            result.warn(passage_id, f"ignored line '{line}'")
            continue
        index, text = int(match.group(1)), match.group(2).strip()
        if index != len(extraction.propositions):
            result.failures[passage_id] = f"proposition indices not contiguous at [{index}]"
            return None
        extraction.propositions.append(ExtractedProposition(local_index=index, text=text, passage_id=passage_id))

    if not extraction.propositions:
        result.failures[passage_id] = "no propositions"
        return None

    for line in lines[entity_start + 1 :]:
        entity, reason = _parse_entity_row(line, len(extraction.propositions))
        if entity is None:
            result.warn(passage_id, reason or "dropped entity row")
            continue
        extraction.entities.append(entity)

    return extraction


def parse_extraction_output(raw: str, batch: Sequence[Passage]) -> ExtractionResult:
    """Parse a joint-extraction response for the given batch.

    Per-passage faults are recorded on the result. Only an output without a
    single ``Passage [N]:`` header raises.

    Raises:
        ExtractionParseError: If no passage block can be found
    """
    headers = list(_HEADER_RE.finditer(raw))
    if not headers:
        raise ExtractionParseError(f"no passage block found in extraction output ({len(raw)} chars)")

    result = ExtractionResult()
    blocks: dict[int, str] = {}
    for i, header in enumerate(headers):
        number = int(header.group(1))
        end = headers[i + 1].start() if i + 1 < len(headers) else len(raw)
        if number >= len(batch):
            logger.warning(f"Extraction output has block for Passage [{number}] beyond batch of {len(batch)}")
            continue
        if number in blocks:
            result.warn(batch[number].passage_id, f"duplicate block for Passage [{number}] ignored")
            continue
        blocks[number] = raw[header.end() : end]

    for number, passage in enumerate(batch):
        if number not in blocks:
            result.failures[passage.passage_id] = "missing block"
            continue
        extraction = _parse_block(blocks[number], passage.passage_id, result)
        if extraction is not None:
            result.passages[passage.passage_id] = extraction

    if result.failures:
        logger.warning(f"Extraction failed for {len(result.failures)} of {len(batch)} passages")
    return result


def split_sentences(text: str, min_tokens: int = 3) -> list[str]:
    """Rule-based sentence splitting used by the sentence-unit index mode."""
    sentences = [s.strip() for s in _SENTENCE_BOUNDARY_RE.split(text)]
    return [s for s in sentences if len(s.split()) >= min_tokens]


def sentence_extraction(passage: Passage, min_tokens: int = 3) -> PassageExtraction:
    """Sentence units for a passage, with no entity layer."""
    return PassageExtraction(
        passage_id=passage.passage_id,
        propositions=[
            ExtractedProposition(local_index=i, text=sentence, passage_id=passage.passage_id)
            for i, sentence in enumerate(split_sentences(passage.text, min_tokens))
        ],
    )
