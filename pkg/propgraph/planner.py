"""Question decomposition into an ordered list of sub-questions."""

import logging
import re
from dataclasses import dataclass, field

from .errors import LLMOutputError
from .llm_gateway import Stage
from .llm_output import QuestionSession, complete_parsed, strip_quotes
from .prompts import PromptName, render

logger = logging.getLogger(__name__)

MAX_SUB_QUESTIONS = 4

_PLAN_RE = re.compile(r"^[\s*#]*rational\s+plan\s*\**\s*:(?:\*\*(?=\s|$))?\s*(.*)$", re.IGNORECASE)
_SUB_HEADER_RE = re.compile(r"^[\s*#]*sub-?\s*questions\s*\**\s*:?\s*\**\s*$", re.IGNORECASE)
_NUMBERED_RE = re.compile(r"^\s*(\d+)\s*[.)]\s+(.+?)\s*$")
_PLACEHOLDER_RE = re.compile(r"#(\d+)")


@dataclass(frozen=True)
class SubQuestion:
    index: int
    text: str
    dependencies: frozenset[int] = frozenset()

    def to_dict(self) -> dict[str, object]:
        return {"index": self.index, "text": self.text, "dependencies": sorted(self.dependencies)}


@dataclass(frozen=True)
class Plan:
    rational_plan: str
    sub_questions: tuple[SubQuestion, ...]
    truncated: bool = False

    def to_dict(self) -> dict[str, object]:
        return {
            "rational_plan": self.rational_plan,
            "sub_questions": [q.to_dict() for q in self.sub_questions],
            "truncated": self.truncated,
        }


@dataclass
class PlanOutcome:
    """Result of a planning call; ``plan`` is None when planning failed."""

    plan: Plan | None
    call_ids: list[str] = field(default_factory=list)
    failure: str | None = None


def dependencies_of(text: str) -> frozenset[int]:
    return frozenset(int(n) for n in _PLACEHOLDER_RE.findall(text))


def parse_plan(text: str, max_sub_questions: int = MAX_SUB_QUESTIONS) -> Plan:
    """Parse planner output into a Plan.

    Args:
        text: Raw model output with a ``Rational Plan:`` line and numbered sub-questions
        max_sub_questions: Longer plans are cut to this many and marked truncated

    Raises:
        LLMOutputError: No sub-questions, broken numbering, or a placeholder that
            does not point at an earlier sub-question
    """
    rational_lines: list[str] = []
    numbered: list[tuple[int, str]] = []
    in_plan = False
    for line in text.splitlines():
        if match := _PLAN_RE.match(line):
            in_plan = True
            rational_lines = [match.group(1).strip()]
        elif _SUB_HEADER_RE.match(line):
            in_plan = False
        elif match := _NUMBERED_RE.match(line):
            in_plan = False
            numbered.append((int(match.group(1)), strip_quotes(match.group(2))))
        elif in_plan and line.strip():
            rational_lines.append(line.strip())

    if not numbered:
        raise LLMOutputError("planner output has no numbered sub-questions")

    sub_questions = []
    for position, (number, question) in enumerate(numbered, 1):
        if number != position:
            raise LLMOutputError(f"sub-question numbering breaks at {number} (expected {position})")
        dependencies = dependencies_of(question)
        bad = sorted(n for n in dependencies if not 1 <= n < position)
        if bad:
            raise LLMOutputError(f"sub-question {position} references #{bad[0]}, which is not an earlier step")
        sub_questions.append(SubQuestion(index=position, text=question, dependencies=dependencies))

    rational_plan = " ".join(line for line in rational_lines if line)
    if not rational_plan:
        logger.warning("Planner output has no rational plan")

    truncated = len(sub_questions) > max_sub_questions
    if truncated:
        logger.warning(f"Planner produced {len(sub_questions)} sub-questions; keeping the first {max_sub_questions}")
        sub_questions = sub_questions[:max_sub_questions]
    return Plan(rational_plan=rational_plan, sub_questions=tuple(sub_questions), truncated=truncated)


def plan(question: str, session: QuestionSession, max_sub_questions: int = MAX_SUB_QUESTIONS) -> PlanOutcome:
    """Decompose a question with a single planner call (plus one re-prompt on bad output)."""
    if not question.strip():
        raise ValueError("question must not be empty")

    prompt = render(PromptName.PLANNER, question=question)
    parsed = complete_parsed(session, Stage.PLANNING, prompt, lambda text: parse_plan(text, max_sub_questions))
    if parsed.value is None:
        logger.error(f"Question {session.question_id}: planning failed ({parsed.error})")
        return PlanOutcome(plan=None, call_ids=parsed.call_ids, failure=f"plan: {parsed.error}")

    logger.debug(f"Question {session.question_id}: plan with {len(parsed.value.sub_questions)} sub-questions")
    return PlanOutcome(plan=parsed.value, call_ids=parsed.call_ids)
