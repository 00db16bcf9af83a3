"""Evaluation runs over trace files: QA, judge, economy, retrieval, planning, units."""

import csv
import json
import logging
import re
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum
from fractions import Fraction
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .corpus import QuestionRecord
from .errors import BackendError, DataError, LLMOutputError
from .graph_store import GraphIndex
from .llm_gateway import CompletionRequest, EmbeddingPurpose, LLMGateway, Stage, amortize
from .llm_output import QuestionSession, complete_parsed
from .metrics import (
    EconomyRecord,
    PlanAccuracyRow,
    PlanRecord,
    SuccessEconomyReport,
    difficulty_from_counts,
    exact_match,
    mean,
    ndcg_at_5,
    plan_accuracy,
    recall_at_k,
    success_economy,
    surprisal,
    token_f1,
)
from .prompts import PromptName, render
from .retrieval import Retriever

logger = logging.getLogger(__name__)

RECORDS_CSV_HEADER = ["question_id", "em", "f1", "judge_lr1", "judge_lr2", "tokens", "r", "w"]

T = TypeVar("T")
R = TypeVar("R")


class JudgeMode(StrEnum):
    LR1 = "lr1"
    LR2 = "lr2"


class Verdict(StrEnum):
    YES = "yes"
    PARTIAL = "yes-partially"
    NO = "no"
    UNPARSED = "unparsed"


class RetrievalEvalMode(StrEnum):
    SIMULATED_AGENTIC = "simulated_agentic"
    SINGLE_PASS = "single_pass"


# Trace files


class TraceTokens(BaseModel):
    model_config = ConfigDict(extra="ignore")

    input: int = 0
    output: int = 0
    total: int = 0


class TracePlan(BaseModel):
    model_config = ConfigDict(extra="ignore")

    rational_plan: str = ""
    sub_questions: list[dict[str, Any]] = Field(default_factory=list)


class TraceSubAgent(BaseModel):
    model_config = ConfigDict(extra="ignore")

    retrieved_passage_ids: list[str] = Field(default_factory=list)


class TraceSummary(BaseModel):
    """The parts of a trace file evaluation reads."""

    model_config = ConfigDict(extra="ignore")

    question_id: str
    question: str = ""
    final_answer: str = ""
    failure: str | None = None
    plan: TracePlan | None = None
    sub_agents: list[TraceSubAgent] = Field(default_factory=list)
    tokens: TraceTokens = Field(default_factory=TraceTokens)

    @property
    def planned_steps(self) -> int:
        return len(self.plan.sub_questions) if self.plan else 0


def load_traces(traces_dir: Path) -> dict[str, TraceSummary]:
    """Read every ``*.json`` trace in a directory, keyed by question id.

    Raises:
        DataError: Missing directory, or a file that is not a valid trace
    """
    traces_dir = Path(traces_dir)
    if not traces_dir.is_dir():
        raise DataError(f"traces directory not found: {traces_dir}")

    traces: dict[str, TraceSummary] = {}
    for path in sorted(traces_dir.glob("*.json")):
        try:
            trace = TraceSummary.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise DataError(f"{path.name}: not a valid trace ({e.errors()[0]['msg']})") from e
        if trace.question_id in traces:
            raise DataError(f"{path.name}: duplicate trace for question '{trace.question_id}'")
        traces[trace.question_id] = trace
    logger.info(f"Loaded {len(traces)} traces from {traces_dir}")
    return traces


@dataclass(frozen=True)
class Matched:
    pairs: list[tuple[TraceSummary, QuestionRecord]]
    traces_without_gold: list[str]
    gold_without_traces: list[str]

    @property
    def warning_count(self) -> int:
        return len(self.traces_without_gold) + len(self.gold_without_traces)


def match_traces(traces: Mapping[str, TraceSummary], questions: Sequence[QuestionRecord]) -> Matched:
    """Pair traces with gold records; ids present on one side only are listed and dropped."""
    gold = {q.question_id: q for q in questions}
    pairs = [(traces[q.question_id], q) for q in questions if q.question_id in traces]
    orphans = sorted(set(traces) - set(gold))
    missing = [q.question_id for q in questions if q.question_id not in traces]
    for qid in orphans:
        logger.warning(f"Trace for '{qid}' has no gold record; excluded")
    for qid in missing:
        logger.warning(f"Question '{qid}' has no trace; excluded")
    return Matched(pairs=pairs, traces_without_gold=orphans, gold_without_traces=missing)


def read_indexing_tokens(index_dir: Path) -> int:
    """Indexing token total written next to the index, 0 when absent."""
    path = Path(index_dir) / "indexing_tokens.json"
    if not path.exists():
        logger.warning(f"{path} not found; indexing tokens counted as 0")
        return 0
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return int(data["total_tokens"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: unreadable indexing token file ({e})") from e


def _run_all(func: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return list(executor.map(func, items))


# Judge


def parse_verdict(text: str, mode: JudgeMode) -> Verdict:
    head = re.sub(r"^[\s\"'*`]+", "", text).lower()
    if re.match(r"yes\W*\s*partial", head):
        if mode == JudgeMode.LR1:
            raise LLMOutputError("partial verdict is not allowed in strict judging")
        return Verdict.PARTIAL
    if re.match(r"yes\b", head):
        return Verdict.YES
    if re.match(r"no\b", head):
        return Verdict.NO
    raise LLMOutputError(f"no verdict in {text[:40]!r}")


def judge(
    gateway: LLMGateway,
    question_id: str,
    question: str,
    prediction: str,
    gold_answers: Sequence[str],
    mode: JudgeMode,
) -> Verdict:
    """Ask the model whether the prediction agrees with the gold answers."""
    template = PromptName.JUDGE_LR1 if mode == JudgeMode.LR1 else PromptName.JUDGE_LR2
    prompt = render(template, question=question, prediction=prediction, ground_truths=" | ".join(gold_answers))
    session = QuestionSession(gateway, f"judge-{mode}/{question_id}")
    parsed = complete_parsed(session, Stage.JUDGE, prompt, lambda text: parse_verdict(text, mode))
    return parsed.value if parsed.value is not None else Verdict.UNPARSED


# Difficulty


@dataclass(frozen=True)
class DifficultyEstimate:
    question_id: str
    correct: int
    samples: int
    answers: tuple[str, ...] = ()

    @property
    def unsampled(self) -> bool:
        """No sample succeeded; r is the smoothed prior for n=1, c=0."""
        return not self.answers

    @property
    def r(self) -> float:
        return difficulty_from_counts(self.correct, self.samples)

    @property
    def w(self) -> float:
        return surprisal(self.r)


def closed_book_answer(text: str) -> str:
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        return ""
    return re.sub(r"^(a|answer)\s*:\s*", "", lines[0], flags=re.IGNORECASE).strip()


def estimate_difficulty(
    gateway: LLMGateway,
    question_id: str,
    question: str,
    gold_answers: Sequence[str],
    n: int = 10,
    temperature: float = 1.0,
) -> DifficultyEstimate:
    """Closed-book success rate over n samples.

    A sample whose backend call fails is retried once; if it fails again it
    is dropped and n shrinks accordingly (never below 1).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    prompt = render(PromptName.DIFFICULTY, question=question)
    request = CompletionRequest(
        user=prompt, stage=Stage.DIFFICULTY, temperature=temperature, question_id=f"difficulty/{question_id}"
    )

    answers: list[str] = []
    for sample in range(1, n + 1):
        for attempt in (1, 2):
            try:
                answers.append(closed_book_answer(gateway.complete(request).text))
                break
            except BackendError as e:
                logger.warning(f"Difficulty sample {sample} for '{question_id}' failed (attempt {attempt}): {e}")

    correct = sum(exact_match(answer, gold_answers) for answer in answers)
    samples = max(1, len(answers))
    if not answers:
        logger.warning(f"Question '{question_id}': every difficulty sample failed; r falls back to the n=1, c=0 prior")
    elif len(answers) < n:
        logger.warning(f"Question '{question_id}': {n - len(answers)} difficulty samples dropped")
    return DifficultyEstimate(question_id=question_id, correct=correct, samples=samples, answers=tuple(answers))


# QA


@dataclass
class EvalRecord:
    question_id: str
    prediction: str
    gold_answers: list[str]
    em: int
    f1: float
    tokens: Fraction
    judge_lr1: Verdict | None = None
    judge_lr2: Verdict | None = None
    r: float | None = None
    w: float | None = None
    retrieved_passage_ids: list[list[str]] = field(default_factory=list)
    failure: str | None = None

    def csv_row(self) -> list[str]:
        return [
            self.question_id,
            str(self.em),
            _fmt(self.f1),
            self.judge_lr1.value if self.judge_lr1 else "",
            self.judge_lr2.value if self.judge_lr2 else "",
            _fmt(float(self.tokens)),
            _fmt(self.r),
            _fmt(self.w),
        ]


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}".rstrip("0").rstrip(".")


def _rate(verdicts: Sequence[Verdict | None], accepted: set[Verdict]) -> tuple[float | None, int]:
    """Share of accepted verdicts among parsed ones, plus the unparsed count."""
    parsed = [v for v in verdicts if v is not None and v != Verdict.UNPARSED]
    unparsed = sum(1 for v in verdicts if v == Verdict.UNPARSED)
    return (sum(1 for v in parsed if v in accepted) / len(parsed) if parsed else None), unparsed


@dataclass
class QAReport:
    records: list[EvalRecord]
    matched: Matched
    indexing_tokens: int = 0

    def summary(self) -> dict[str, Any]:
        lr1, lr1_unparsed = _rate([r.judge_lr1 for r in self.records], {Verdict.YES})
        lr2_strict, lr2_unparsed = _rate([r.judge_lr2 for r in self.records], {Verdict.YES})
        lr2_lenient, _ = _rate([r.judge_lr2 for r in self.records], {Verdict.YES, Verdict.PARTIAL})
        return {
            "questions": len(self.records),
            "em": mean(r.em for r in self.records),
            "f1": mean(r.f1 for r in self.records),
            "judge": {
                "lr1_yes": lr1,
                "lr1_unparsed": lr1_unparsed,
                "lr2_yes": lr2_strict,
                "lr2_yes_or_partial": lr2_lenient,
                "lr2_unparsed": lr2_unparsed,
            },
            "failed_questions": sorted(r.question_id for r in self.records if r.failure),
            "total_tokens": float(sum((r.tokens for r in self.records), Fraction(0))),
            "indexing_tokens": self.indexing_tokens,
            "traces_without_gold": self.matched.traces_without_gold,
            "gold_without_traces": self.matched.gold_without_traces,
            "warnings": self.matched.warning_count,
        }


def evaluate_qa(
    traces: Mapping[str, TraceSummary],
    questions: Sequence[QuestionRecord],
    gateway: LLMGateway | None = None,
    indexing_tokens: int = 0,
    run_judge: bool = False,
    workers: int = 1,
) -> QAReport:
    """Score predictions; T_i is the trace's tokens plus an even share of indexing."""
    if run_judge and gateway is None:
        raise ValueError("judging needs a gateway")
    matched = match_traces(traces, questions)
    attributed = amortize(
        {t.question_id: (t.tokens.input, t.tokens.output) for t, _ in matched.pairs}, indexing_tokens
    ).questions

    def score(pair: tuple[TraceSummary, QuestionRecord]) -> EvalRecord:
        trace, gold = pair
        record = EvalRecord(
            question_id=gold.question_id,
            prediction=trace.final_answer,
            gold_answers=list(gold.gold_answers),
            em=exact_match(trace.final_answer, gold.gold_answers),
            f1=token_f1(trace.final_answer, gold.gold_answers),
            tokens=attributed[gold.question_id].total,
            retrieved_passage_ids=[s.retrieved_passage_ids for s in trace.sub_agents],
            failure=trace.failure,
        )
        if run_judge and gateway is not None:
            for mode in JudgeMode:
                verdict = judge(
                    gateway, gold.question_id, gold.question, trace.final_answer, gold.gold_answers, mode
                )
                if mode == JudgeMode.LR1:
                    record.judge_lr1 = verdict
                else:
                    record.judge_lr2 = verdict
        return record

    records = _run_all(score, matched.pairs, workers)
    logger.info(f"Scored {len(records)} questions ({matched.warning_count} id mismatches)")
    return QAReport(records=records, matched=matched, indexing_tokens=indexing_tokens)


# Economy


@dataclass
class EconomyReport:
    qa: QAReport
    economy: SuccessEconomyReport
    difficulty: dict[str, DifficultyEstimate]

    def summary(self) -> dict[str, Any]:
        return {
            "c_w": self.economy.c_w,
            "c_w_undefined": self.economy.undefined,
            "total_tokens": float(self.economy.total_tokens),
            "weighted_correct": self.economy.weighted_correct,
            "questions": len(self.qa.records),
            "correct": sum(r.em for r in self.qa.records),
            "unsampled_questions": sorted(qid for qid, e in self.difficulty.items() if e.unsampled),
            "warnings": self.qa.matched.warning_count,
        }


def evaluate_economy(
    qa: QAReport,
    questions: Sequence[QuestionRecord],
    gateway: LLMGateway,
    n: int = 10,
    temperature: float = 1.0,
    workers: int = 1,
) -> EconomyReport:
    """Sample closed-book difficulty for every scored question, then compute C_w."""
    by_id = {q.question_id: q for q in questions}

    def estimate(record: EvalRecord) -> DifficultyEstimate:
        gold = by_id[record.question_id]
        return estimate_difficulty(gateway, gold.question_id, gold.question, gold.gold_answers, n, temperature)

    estimates = _run_all(estimate, qa.records, workers)
    difficulty = {e.question_id: e for e in estimates}
    for record in qa.records:
        record.r = difficulty[record.question_id].r
        record.w = difficulty[record.question_id].w

    economy = success_economy(
        EconomyRecord(question_id=r.question_id, tokens=r.tokens, em=r.em, r=r.r) for r in qa.records
    )
    if economy.undefined:
        logger.warning("No question answered correctly; C_w is undefined")
    return EconomyReport(qa=qa, economy=economy, difficulty=difficulty)


# Retrieval


@dataclass(frozen=True)
class RetrievalRecord:
    question_id: str
    recall: float
    retrieved: tuple[str, ...]
    gold: tuple[str, ...]


@dataclass
class RetrievalReport:
    mode: RetrievalEvalMode
    k: int
    weighting: str
    records: list[RetrievalRecord]
    skipped: list[str] = field(default_factory=list)

    def summary(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "k": self.k,
            "weighting": self.weighting,
            "questions": len(self.records),
            "recall": mean(r.recall for r in self.records),
            "skipped": self.skipped,
        }


def evaluate_retrieval(
    retriever: Retriever,
    questions: Sequence[QuestionRecord],
    mode: RetrievalEvalMode = RetrievalEvalMode.SIMULATED_AGENTIC,
    k: int = 5,
) -> RetrievalReport:
    """Recall of gold passages without any LLM in the loop.

    Simulated-agentic retrieves k passages per gold sub-question and scores
    the union; single-pass retrieves k passages for the whole question.
    """
    records: list[RetrievalRecord] = []
    skipped: list[str] = []
    for q in questions:
        if not q.gold_passage_ids:
            logger.warning(f"Question '{q.question_id}' has no gold passages; skipped")
            skipped.append(q.question_id)
            continue
        if mode == RetrievalEvalMode.SIMULATED_AGENTIC:
            if not q.gold_sub_questions:
                logger.warning(f"Question '{q.question_id}' has no gold sub-questions; skipped")
                skipped.append(q.question_id)
                continue
            retrieved = list(
                dict.fromkeys(pid for sub in q.gold_sub_questions for pid in retriever.single_pass_retrieve(sub, k))
            )
            recall = recall_at_k(retrieved, q.gold_passage_ids)
        else:
            retrieved = retriever.single_pass_retrieve(q.question, k)
            recall = recall_at_k(retrieved, q.gold_passage_ids, k)
        records.append(
            RetrievalRecord(
                question_id=q.question_id, recall=recall, retrieved=tuple(retrieved), gold=tuple(q.gold_passage_ids)
            )
        )
        logger.debug(f"{q.question_id}: recall {recall:.3f}")
    return RetrievalReport(
        mode=mode, k=k, weighting=retriever.config.weighting.value, records=records, skipped=skipped
    )


# Planning


@dataclass
class PlanReport:
    rows: list[PlanAccuracyRow]
    skipped: list[str]
    matched: Matched

    def summary(self) -> dict[str, Any]:
        return {
            "rows": [
                {
                    "hops": row.label,
                    "questions": row.questions,
                    "plan_accuracy": row.accuracy,
                    "avg_deviation": row.avg_deviation,
                    "em_match": row.em_match,
                    "em_no_match": row.em_no_match,
                }
                for row in self.rows
            ],
            "skipped": self.skipped,
            "warnings": self.matched.warning_count,
        }


def evaluate_plans(traces: Mapping[str, TraceSummary], questions: Sequence[QuestionRecord]) -> PlanReport:
    """Planned step count against the true hop count, with EM split by agreement."""
    matched = match_traces(traces, questions)
    records: list[PlanRecord] = []
    skipped: list[str] = []
    for trace, gold in matched.pairs:
        if gold.hop_count is None:
            skipped.append(gold.question_id)
            continue
        records.append(
            PlanRecord(
                question_id=gold.question_id,
                planned=trace.planned_steps,
                hops=gold.hop_count,
                em=exact_match(trace.final_answer, gold.gold_answers),
            )
        )
    if skipped:
        logger.warning(f"{len(skipped)} questions have no hop count; left out of the planner table")
    return PlanReport(rows=plan_accuracy(records), skipped=skipped, matched=matched)


# Unit discriminability


@dataclass
class UnitsReport:
    scores: dict[str, float]
    skipped: list[str]

    def summary(self) -> dict[str, Any]:
        return {
            "questions": len(self.scores),
            "ndcg_at_5": mean(self.scores.values()),
            "per_question": self.scores,
            "skipped": self.skipped,
        }


def evaluate_units(index: GraphIndex, gateway: LLMGateway, questions: Sequence[QuestionRecord]) -> UnitsReport:
    """Rank every indexed unit by cosine to the question; relevant units come from gold passages."""
    if not index.frozen:
        raise DataError("unit evaluation needs a frozen index")
    ids = np.arange(len(index.propositions))
    scores: dict[str, float] = {}
    skipped: list[str] = []
    for q in questions:
        gold = set(q.gold_passage_ids)
        relevant = {p.prop_id for p in index.propositions if p.passage_id in gold}
        if not relevant:
            skipped.append(q.question_id)
            continue
        query = gateway.embed_texts([q.question], EmbeddingPurpose.STATEMENT)[0]
        cosines = index.prop_matrix @ query
        ranking = [int(i) for i in np.lexsort((ids, -cosines))[:5]]
        scores[q.question_id] = ndcg_at_5(ranking, relevant)
    if skipped:
        logger.warning(f"{len(skipped)} questions have no indexed units in their gold passages; skipped")
    return UnitsReport(scores=scores, skipped=skipped)


# Report files


def write_json(path: Path, data: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_records_csv(path: Path, records: Sequence[EvalRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(RECORDS_CSV_HEADER)
        for record in records:
            writer.writerow(record.csv_row())


def write_retrieval_csv(path: Path, report: RetrievalReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["question_id", "mode", "recall", "retrieved"])
        for record in report.records:
            writer.writerow([record.question_id, report.mode.value, _fmt(record.recall), " ".join(record.retrieved)])
