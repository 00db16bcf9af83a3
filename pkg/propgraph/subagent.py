"""Per-hop research agent: rewrite, retrieve, select, evaluate, repeat."""

import logging
import re
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .config import AgentConfig, RetrievalConfig, RetrievalMode
from .errors import LLMOutputError
from .graph_store import GraphIndex
from .llm_gateway import Stage
from .llm_output import (
    Parsed,
    QuestionSession,
    complete_parsed,
    parse_int_list,
    parse_key_values,
    parse_keywords,
    strip_citations,
    strip_quotes,
)
from .planner import Plan, SubQuestion
from .prompts import PromptName, render
from .retrieval import Retriever, ScoredEntity, ScoredPassage

logger = logging.getLogger(__name__)

HistoryPair = tuple[str, str]

EVIDENCE_KEYS = frozenset(
    {
        "action",
        "answer",
        "supporting_prop_ids",
        "node_findings",
        "new_search_statement",
        "keywords",
        "new_keywords",
        "reasoning_frontier",
        "reasoning",
    }
)
REWRITE_KEYS = frozenset({"search_statement", "keywords"})
SELECTION_KEYS = frozenset({"node_ids", "selected_node_ids"})

_ID_LIST_RE = re.compile(r"\[\s*\d+(?:\s*,\s*\d+)*\s*\]")
_ACTION_RE = re.compile(r"^(DONE|QUERY[\s_-]*AGAIN)\b")


class Action(StrEnum):
    DONE = "DONE"
    QUERY_AGAIN = "QUERY_AGAIN"


class EvidenceAction(BaseModel):
    """Decision taken after reading one iteration's evidence."""

    model_config = ConfigDict(frozen=True)

    action: Action
    answer: str = ""
    supporting_prop_ids: list[int] = Field(default_factory=list)
    node_findings: str = ""
    new_search_statement: str | None = None
    new_keywords: list[str] = Field(default_factory=list)
    reasoning_frontier: str = ""
    reasoning: str = ""

    @field_validator("action", mode="before")
    @classmethod
    def normalize_action(cls, value: Any) -> Any:
        if not isinstance(value, str):
            return value
        match = _ACTION_RE.match(strip_quotes(value).upper())
        if not match:
            return value
        return re.sub(r"[\s_-]+", "_", match.group(1))

    @field_validator("answer", "node_findings", "reasoning_frontier", "reasoning", mode="before")
    @classmethod
    def unquote(cls, value: Any) -> Any:
        return strip_quotes(value) if isinstance(value, str) else value

    @field_validator("new_search_statement", mode="before")
    @classmethod
    def blank_statement_is_none(cls, value: Any) -> Any:
        if isinstance(value, str):
            value = strip_citations(strip_quotes(value))
            return value or None
        return value

    @model_validator(mode="after")
    def query_again_needs_statement(self) -> "EvidenceAction":
        if self.action == Action.QUERY_AGAIN and not self.new_search_statement:
            raise ValueError("QUERY_AGAIN requires a new_search_statement")
        return self


@dataclass
class ObservationState:
    """Working memory of one sub-agent; discarded when it finishes."""

    sub_question: str
    statement: str
    keywords: list[str]
    history: list[HistoryPair]
    max_iterations: int
    node_findings: list[str] = field(default_factory=list)
    visited_entity_ids: set[int] = field(default_factory=set)
    visited_prop_ids: set[int] = field(default_factory=set)
    visited_passage_ids: set[str] = field(default_factory=set)
    iteration: int = 0


@dataclass(frozen=True)
class Candidate:
    entity_id: int
    name: str
    entity_type: str
    score: float


@dataclass
class IterationRecord:
    iteration: int
    statement: str
    keywords: list[str]
    candidates: list[Candidate]
    selected_entity_ids: list[int]
    pooled_prop_ids: list[int]
    passages: list[ScoredPassage]
    action: str
    answer: str
    new_search_statement: str | None = None
    flags: list[str] = field(default_factory=list)


@dataclass
class SubAgentTrace:
    index: int
    sub_question: str
    statement: str = ""
    iterations: list[IterationRecord] = field(default_factory=list)
    final_answer: str = ""
    terminal: bool = False
    flags: list[str] = field(default_factory=list)
    failure: str | None = None
    llm_call_ids: list[str] = field(default_factory=list)

    @property
    def retrieved_passage_ids(self) -> list[str]:
        """Passages shown to the evaluator, first occurrence order."""
        seen: dict[str, None] = {}
        for record in self.iterations:
            for passage in record.passages:
                seen.setdefault(passage.passage_id, None)
        return list(seen)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["retrieved_passage_ids"] = self.retrieved_passage_ids
        return data


@dataclass(frozen=True)
class Selection:
    entity_ids: list[int]
    fallback: bool = False


def format_history(history: Sequence[HistoryPair]) -> str:
    if not history:
        return "None"
    lines = []
    for step, (question, answer) in enumerate(history, 1):
        lines.append(f"Step {step} Question: {question}")
        lines.append(f"Step {step} Answer: {answer}")
    return "\n".join(lines)


# Output parsers


def parse_rewrite(text: str) -> tuple[str, list[str]]:
    values = parse_key_values(text, REWRITE_KEYS)
    statement = strip_citations(strip_quotes(values.get("search_statement", "")))
    if not statement:
        raise LLMOutputError("rewrite output has no search statement")
    return statement, parse_keywords(values.get("keywords", ""))


def parse_selection(text: str) -> list[int]:
    values = parse_key_values(text, SELECTION_KEYS)
    for key in ("node_ids", "selected_node_ids"):
        if ids := parse_int_list(values.get(key, "")):
            return ids
    if match := _ID_LIST_RE.search(text):
        return parse_int_list(match.group(0))
    raise LLMOutputError("selection output has no node_ids")


def parse_evidence(text: str) -> EvidenceAction:
    values = parse_key_values(text, EVIDENCE_KEYS)
    if "action" not in values:
        raise LLMOutputError("evaluation output has no action field")
    data: dict[str, Any] = {
        key: values[key]
        for key in ("action", "answer", "node_findings", "new_search_statement", "reasoning_frontier", "reasoning")
        if key in values
    }
    data["supporting_prop_ids"] = parse_int_list(values.get("supporting_prop_ids", ""))
    data["new_keywords"] = parse_keywords(values.get("keywords") or values.get("new_keywords", ""))
    try:
        return EvidenceAction.model_validate(data)
    except ValidationError as e:
        raise LLMOutputError(f"invalid evaluation output: {e.errors()[0]['msg']}") from e


# Steps


def rewrite_query(
    session: QuestionSession,
    question: str,
    plan: Plan,
    history: Sequence[HistoryPair],
    sub_question: SubQuestion,
) -> Parsed[tuple[str, list[str]]]:
    """Turn a raw sub-question into a declarative statement plus keywords."""
    prompt = render(
        PromptName.REWRITE,
        original_question=question,
        rational_plan=plan.rational_plan,
        context_history=format_history(history),
        current_sub_question=sub_question.text,
    )
    return complete_parsed(session, Stage.REWRITING, prompt, parse_rewrite)


def select_entities(
    session: QuestionSession, state: ObservationState, candidates: Sequence[Candidate]
) -> Selection:
    """Let the model pick the entity nodes to expand.

    Ids the model invents are dropped; when none remain (or the reply cannot
    be parsed even after a re-prompt) the top-scored candidate is used and
    the selection is flagged.
    """
    if not candidates:
        raise ValueError("selection needs at least one candidate")
    if len(candidates) == 1:
        return Selection([candidates[0].entity_id])

    prompt = render(
        PromptName.SELECT,
        state_context=_state_context(state),
        sub_question=state.sub_question,
        search_statement=state.statement,
        candidates="\n".join(
            f"- node_id: {c.entity_id} | name: {c.name} | type: {c.entity_type} | score: {c.score:.4f}"
            for c in candidates
        ),
    )
    parsed = complete_parsed(session, Stage.SELECTION, prompt, parse_selection)
    offered = {c.entity_id for c in candidates}
    chosen = list(dict.fromkeys(i for i in parsed.value or [] if i in offered))
    if not chosen:
        logger.warning(
            f"Question {session.question_id}: no valid entity selected from {sorted(offered)}; using the top candidate"
        )
        return Selection([candidates[0].entity_id], fallback=True)
    return Selection(chosen)


def evaluate_evidence(session: QuestionSession, state: ObservationState, evidence: str) -> Parsed[EvidenceAction]:
    prompt = render(PromptName.EVALUATE, state_block=_state_block(state), new_evidence=evidence)
    return complete_parsed(session, Stage.EVALUATION, prompt, parse_evidence)


def _visited_ids(state: ObservationState) -> str:
    return "[" + ", ".join(str(i) for i in sorted(state.visited_entity_ids)) + "]"


def _findings(state: ObservationState) -> str:
    return "\n".join(f"- {f}" for f in state.node_findings) or "None"


def _state_context(state: ObservationState) -> str:
    return (
        f"Context History:\n{format_history(state.history)}\n"
        f"Findings so far:\n{_findings(state)}\n"
        f"Already visited node IDs: {_visited_ids(state)}"
    )


def _state_block(state: ObservationState) -> str:
    return (
        f"Sub-question: {state.sub_question}\n"
        f"Search statement: {state.statement}\n"
        f"Context History:\n{format_history(state.history)}\n"
        f"Visited nodes:\n{_findings(state)}\n"
        f"Already visited node IDs: {_visited_ids(state)}\n"
        f"Iteration: {state.iteration} of {state.max_iterations}"
    )


class SubAgent:
    """Answers one sub-question against the shared index.

    Only the (question, answer) history crosses sub-agent boundaries; the
    observation state lives for a single ``run``.
    """

    def __init__(
        self,
        retriever: Retriever,
        retrieval_config: RetrievalConfig | None = None,
        agent_config: AgentConfig | None = None,
    ):
        self.retriever = retriever
        self.retrieval = retrieval_config or retriever.config
        self.agent = agent_config or AgentConfig()

    @property
    def index(self) -> GraphIndex:
        return self.retriever.index

    def run(
        self,
        session: QuestionSession,
        question: str,
        plan: Plan,
        history: Sequence[HistoryPair],
        sub_question: SubQuestion,
    ) -> SubAgentTrace:
        unanswered = sorted(d for d in sub_question.dependencies if d > len(history))
        if unanswered:
            raise ValueError(f"sub-question {sub_question.index} depends on unanswered steps {unanswered}")

        trace = SubAgentTrace(index=sub_question.index, sub_question=sub_question.text)
        first_call = len(session.calls)
        try:
            self._run(session, question, plan, history, sub_question, trace)
        finally:
            trace.llm_call_ids = [c.call_id for c in session.calls[first_call:]]
        logger.info(
            f"Question {session.question_id} step {sub_question.index}: {len(trace.iterations)} iteration(s), "
            f"{'done' if trace.terminal else 'not terminal'}"
        )
        return trace

    def _run(
        self,
        session: QuestionSession,
        question: str,
        plan: Plan,
        history: Sequence[HistoryPair],
        sub_question: SubQuestion,
        trace: SubAgentTrace,
    ) -> None:
        rewrite = rewrite_query(session, question, plan, history, sub_question)
        if rewrite.value is None:
            trace.failure = f"rewrite: {rewrite.error}"
            trace.flags.append("rewrite_failed")
            return
        statement, keywords = rewrite.value
        trace.statement = statement
        state = ObservationState(
            sub_question=sub_question.text,
            statement=statement,
            keywords=keywords,
            history=list(history),
            max_iterations=self.agent.max_iterations,
        )

        partial = ""
        for iteration in range(1, self.agent.max_iterations + 1):
            state.iteration = iteration
            record = self._iterate(session, state, partial)
            if record is None:
                trace.flags.append("empty_retrieval")
                break
            trace.iterations.append(record)
            if record.action == Action.DONE:
                trace.final_answer = record.answer
                trace.terminal = True
                return
            partial = record.answer

        trace.final_answer = partial
        trace.flags.append("non_terminal")

    def _iterate(self, session: QuestionSession, state: ObservationState, partial: str) -> IterationRecord | None:
        stmt = self.retriever.embed_statement(state.statement, state.keywords)
        candidates: list[Candidate] = []
        selected: list[int] = []
        flags: list[str] = []

        if self.retrieval.mode == RetrievalMode.DPR_BYPASS:
            passages = self.retriever.dense_passages(stmt, self.retrieval.d_passages, state.visited_passage_ids)
            pool = {p for hit in passages for p in self.index.props_of_passage(hit.passage_id)}
            pool -= state.visited_prop_ids
        else:
            ranked = self.retriever.search_propositions(stmt, self.retrieval.m, state.visited_prop_ids)
            if self.index.has_entity_layer:
                scored = self.retriever.aggregate_entities(ranked, self.retrieval.k_entities, state.visited_entity_ids)
                candidates = [self._candidate(e) for e in scored]
                if candidates and self.retrieval.mode == RetrievalMode.NO_ENTITY_SELECTION:
                    selected = [c.entity_id for c in candidates]
                elif candidates:
                    selection = select_entities(session, state, candidates)
                    selected = selection.entity_ids
                    if selection.fallback:
                        flags.append("selection_fallback")
                pool = self.retriever.pool_of(selected, state.visited_prop_ids)
            else:
                pool = {p.prop_id for p in ranked}
            passages = self.retriever.rank_pool(stmt, pool, self.retrieval.d_passages, self.retrieval.weighting)

        if not candidates and not passages:
            return None

        parsed = evaluate_evidence(session, state, self._render_evidence(passages, pool))
        if parsed.value is None:
            flags.append("evaluation_unparsed")
            action = EvidenceAction(
                action=Action.QUERY_AGAIN,
                answer=partial,
                new_search_statement=state.statement,
                new_keywords=state.keywords,
            )
        else:
            action = parsed.value

        if action.node_findings:
            state.node_findings.append(action.node_findings)
        state.visited_entity_ids.update(selected)
        state.visited_prop_ids.update(pool)
        state.visited_passage_ids.update(p.passage_id for p in passages)

        record = IterationRecord(
            iteration=state.iteration,
            statement=state.statement,
            keywords=list(state.keywords),
            candidates=candidates,
            selected_entity_ids=selected,
            pooled_prop_ids=sorted(pool),
            passages=passages,
            action=action.action.value,
            answer=action.answer,
            new_search_statement=action.new_search_statement if action.action == Action.QUERY_AGAIN else None,
            flags=flags,
        )
        if action.action == Action.QUERY_AGAIN and action.new_search_statement:
            state.statement = action.new_search_statement
            state.keywords = list(action.new_keywords)
        return record

    def _candidate(self, scored: ScoredEntity) -> Candidate:
        entity = self.index.entities[scored.entity_id]
        return Candidate(
            entity_id=scored.entity_id, name=entity.canonical_name, entity_type=entity.entity_type, score=scored.score
        )

    def _render_evidence(self, passages: Sequence[ScoredPassage], pool: set[int]) -> str:
        if not passages:
            return "No new evidence was retrieved."
        blocks = []
        for hit in passages:
            passage = self.index.passages[hit.passage_id]
            props = [p for p in self.index.props_of_passage(hit.passage_id) if p in pool]
            lines = [f"Passage: {passage.title or passage.passage_id} (score {hit.score:.4f})", passage.text]
            if props:
                lines.append("Propositions:")
                lines.extend(f"[ID: {p}] {self.index.propositions[p].text}" for p in sorted(props))
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks)
