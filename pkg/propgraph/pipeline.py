"""End-to-end answering: plan, run sub-agents in order, synthesize."""

import json
import logging
import os
import re
import tempfile
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .config import AgentConfig, RetrievalConfig
from .errors import BackendError
from .llm_gateway import LLMGateway, Stage
from .llm_output import CallRecord, QuestionSession
from .planner import Plan, plan
from .prompts import PromptName, render
from .retrieval import Retriever
from .subagent import HistoryPair, SubAgent, SubAgentTrace, format_history

logger = logging.getLogger(__name__)

ANSWER_MARKER = "so the answer is:"
TRACE_SCHEMA_VERSION = 1

_UNSAFE_FILENAME_RE = re.compile(r"[^A-Za-z0-9_.-]")


@dataclass(frozen=True)
class Synthesis:
    final_answer: str
    rationale: str
    fallback: bool = False


@dataclass
class PipelineResult:
    question_id: str
    question: str
    plan: Plan | None = None
    traces: list[SubAgentTrace] = field(default_factory=list)
    history: list[HistoryPair] = field(default_factory=list)
    final_answer: str = ""
    rationale: str = ""
    flags: list[str] = field(default_factory=list)
    failure: str | None = None
    backend_error: bool = False
    calls: list[CallRecord] = field(default_factory=list)

    @property
    def input_tokens(self) -> int:
        return sum(c.input_tokens for c in self.calls)

    @property
    def output_tokens(self) -> int:
        return sum(c.output_tokens for c in self.calls)

    @property
    def total_tokens(self) -> int:
        return self.input_tokens + self.output_tokens

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "question_id": self.question_id,
            "question": self.question,
            "plan": self.plan.to_dict() if self.plan else None,
            "sub_agents": [t.to_dict() for t in self.traces],
            "history": [{"question": q, "answer": a} for q, a in self.history],
            "final_answer": self.final_answer,
            "rationale": self.rationale,
            "flags": self.flags,
            "failure": self.failure,
            "calls": [asdict(c) for c in self.calls],
            "tokens": {
                "input": self.input_tokens,
                "output": self.output_tokens,
                "total": self.total_tokens,
            },
        }


def parse_final_answer(text: str) -> Synthesis:
    """Take the answer after the last ``So the answer is:`` marker.

    Without a marker the last non-empty line stands in, flagged as a fallback.
    """
    position = text.lower().rfind(ANSWER_MARKER)
    if position >= 0:
        tail = text[position + len(ANSWER_MARKER) :].strip()
        answer = _clean_answer(tail.splitlines()[0] if tail else "")
        if answer:
            return Synthesis(final_answer=answer, rationale=text)

    lines = [line for line in text.splitlines() if line.strip()]
    answer = _clean_answer(lines[-1]) if lines else ""
    return Synthesis(final_answer=answer, rationale=text, fallback=True)


def _clean_answer(text: str) -> str:
    text = re.sub(r"^[\s*>-]+", "", text).strip()
    text = text.strip("*").strip()
    text = re.sub(r"[\s.,;:!?]+$", "", text)
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1].strip()
    return text


def synthesize(session: QuestionSession, question: str, history: Sequence[HistoryPair]) -> Synthesis:
    """Combine the sub-answers into the final answer with one synthesis call."""
    if not history:
        raise ValueError("synthesis needs at least one answered step")
    prompt = render(PromptName.SYNTHESIS, research=format_history(history), original_question=question)
    response = session.complete(Stage.SYNTHESIS, prompt)
    result = parse_final_answer(response.text)
    if result.fallback:
        logger.warning(f"Question {session.question_id}: no answer marker in synthesis output; using last line")
    return result


class Pipeline:
    """Answers questions against one frozen index.

    A single instance may serve several questions concurrently: every
    question gets its own session, and the index is only read.
    """

    def __init__(
        self,
        retriever: Retriever,
        gateway: LLMGateway,
        agent_config: AgentConfig | None = None,
        retrieval_config: RetrievalConfig | None = None,
    ):
        self.gateway = gateway
        self.agent_config = agent_config or AgentConfig()
        self.subagent = SubAgent(retriever, retrieval_config or retriever.config, self.agent_config)

    def answer_question(self, question: str, question_id: str) -> PipelineResult:
        """Run plan, sub-agents and synthesis for one question.

        Planning failures come back as a result with an empty answer and a
        failure reason. Backend errors propagate.
        """
        session = QuestionSession(self.gateway, question_id)
        result = PipelineResult(question_id=question_id, question=question, calls=session.calls)

        outcome = plan(question, session, self.agent_config.max_sub_questions)
        if outcome.plan is None:
            result.failure = outcome.failure
            return result
        result.plan = outcome.plan
        if outcome.plan.truncated:
            result.flags.append("plan_truncated")

        for sub_question in outcome.plan.sub_questions:
            trace = self.subagent.run(session, question, outcome.plan, result.history, sub_question)
            result.traces.append(trace)
            result.history.append((sub_question.text, trace.final_answer))

        synthesis = synthesize(session, question, result.history)
        result.final_answer = synthesis.final_answer
        result.rationale = synthesis.rationale
        if synthesis.fallback:
            result.flags.append("synthesis_fallback")
        logger.info(f"Question {question_id}: answered in {len(session.calls)} LLM calls")
        return result

    def answer_many(
        self, questions: Sequence[tuple[str, str]], workers: int = 1, traces_dir: Path | None = None
    ) -> list[PipelineResult]:
        """Answer (question_id, question) pairs, at most ``workers`` at a time.

        A backend failure ends only the question it hit; the result records it.
        Results come back in input order.
        """

        def run(item: tuple[str, str]) -> PipelineResult:
            question_id, question = item
            try:
                result = self.answer_question(question, question_id)
            except BackendError as e:
                logger.error(f"Question {question_id}: {e}")
                result = PipelineResult(
                    question_id=question_id, question=question, failure=f"backend: {e}", backend_error=True
                )
            if traces_dir is not None:
                write_trace(result, traces_dir)
            return result

        with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
            return list(executor.map(run, questions))


def trace_path(traces_dir: Path, question_id: str) -> Path:
    return Path(traces_dir) / f"{_UNSAFE_FILENAME_RE.sub('_', question_id)}.json"


def write_trace(result: PipelineResult, traces_dir: Path) -> Path:
    """Write a trace atomically; identical results give identical bytes."""
    traces_dir = Path(traces_dir)
    traces_dir.mkdir(parents=True, exist_ok=True)
    path = trace_path(traces_dir, result.question_id)
    payload = json.dumps(result.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    fd, tmp = tempfile.mkstemp(dir=traces_dir, prefix=".trace-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.debug(f"Wrote trace {path}")
    return path


def read_trace(path: Path) -> dict[str, Any]:
    with Path(path).open(encoding="utf-8") as handle:
        data: dict[str, Any] = json.load(handle)
    return data
