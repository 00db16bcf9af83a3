"""Answer and retrieval metrics. Everything here is pure."""

import math
import unicodedata
from collections import Counter
from collections.abc import Collection, Iterable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import DataError

ARTICLES = frozenset({"a", "an", "the"})


def normalize(answer: str) -> list[str]:
    """Lowercase, strip punctuation, drop articles, split on whitespace."""
    lowered = answer.lower()
    no_punct = "".join(ch for ch in lowered if not unicodedata.category(ch).startswith("P"))
    return [token for token in no_punct.split() if token not in ARTICLES]


def _check_gold(gold_answers: Sequence[str]) -> None:
    if not gold_answers:
        raise ValueError("at least one gold answer is required")


def exact_match(prediction: str, gold_answers: Sequence[str]) -> int:
    _check_gold(gold_answers)
    predicted = normalize(prediction)
    return int(any(predicted == normalize(gold) for gold in gold_answers))


def _f1(predicted: list[str], gold: list[str]) -> float:
    if not predicted or not gold:
        return float(predicted == gold)
    overlap = sum((Counter(predicted) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, gold_answers: Sequence[str]) -> float:
    """Best token-level F1 over the gold aliases."""
    _check_gold(gold_answers)
    predicted = normalize(prediction)
    return max(_f1(predicted, normalize(gold)) for gold in gold_answers)


def recall_at_k(retrieved: Sequence[str], gold: Collection[str], k: int | None = None) -> float:
    """Share of gold passages found among the first k retrieved (all when k is None)."""
    if not gold:
        raise ValueError("gold passage set must not be empty")
    window = retrieved if k is None else retrieved[:k]
    return len(set(window) & set(gold)) / len(set(gold))


def ndcg_at_k(ranking: Sequence[object], relevant: Collection[object], k: int = 5) -> float:
    """Binary-gain NDCG with a 1/log2(rank + 1) discount."""
    if not relevant:
        raise ValueError("relevant set must not be empty")
    dcg = sum(1.0 / math.log2(rank + 1) for rank, item in enumerate(ranking[:k], 1) if item in relevant)
    ideal = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


def ndcg_at_5(ranking: Sequence[object], relevant: Collection[object]) -> float:
    return ndcg_at_k(ranking, relevant, 5)


def difficulty_from_counts(correct: int, samples: int) -> float:
    """Smoothed closed-book success rate (c + 0.5) / (n + 1), always inside (0, 1)."""
    if samples < 1:
        raise ValueError("at least one sample is required")
    if not 0 <= correct <= samples:
        raise ValueError(f"correct count {correct} outside [0, {samples}]")
    return (correct + 0.5) / (samples + 1)


def surprisal(r: float) -> float:
    """Difficulty weight in bits: -log2(r)."""
    if not 0 < r <= 1:
        raise ValueError(f"success rate {r} outside (0, 1]")
    return -math.log2(r)


@dataclass(frozen=True)
class EconomyRecord:
    question_id: str
    tokens: Fraction | int
    em: int
    r: float | None = None

    @property
    def w(self) -> float | None:
        return surprisal(self.r) if self.r is not None else None


@dataclass(frozen=True)
class SuccessEconomyReport:
    total_tokens: Fraction
    weighted_correct: float
    records: list[EconomyRecord] = field(default_factory=list)

    @property
    def undefined(self) -> bool:
        return self.weighted_correct <= 0

    @property
    def c_w(self) -> float | None:
        """Tokens per weighted correct answer; None when nothing was answered correctly."""
        if self.undefined:
            return None
        return float(self.total_tokens) / self.weighted_correct


def success_economy(records: Iterable[EconomyRecord]) -> SuccessEconomyReport:
    """Total tokens over the difficulty-weighted count of exact matches.

    Raises:
        DataError: A correct record has no success rate
    """
    rows = list(records)
    missing = [r.question_id for r in rows if r.em == 1 and r.r is None]
    if missing:
        raise DataError(f"difficulty missing for correct answers: {', '.join(missing)}")

    total = sum((Fraction(r.tokens) for r in rows), Fraction(0))
    weighted = math.fsum(r.w or 0.0 for r in rows if r.em == 1)
    return SuccessEconomyReport(total_tokens=total, weighted_correct=weighted, records=rows)


@dataclass(frozen=True)
class PlanRecord:
    question_id: str
    planned: int
    hops: int
    em: int


@dataclass(frozen=True)
class PlanAccuracyRow:
    """One row of the planner table; ``hops`` is None for the overall row."""

    hops: int | None
    questions: int
    accuracy: float
    avg_deviation: float
    em_match: float | None
    em_no_match: float | None

    @property
    def label(self) -> str:
        return "overall" if self.hops is None else f"{self.hops}-hop"


def _mean(values: Sequence[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def _plan_row(hops: int | None, records: Sequence[PlanRecord]) -> PlanAccuracyRow:
    matched = [r.em for r in records if r.planned == r.hops]
    unmatched = [r.em for r in records if r.planned != r.hops]
    return PlanAccuracyRow(
        hops=hops,
        questions=len(records),
        accuracy=len(matched) / len(records),
        avg_deviation=math.fsum(r.planned - r.hops for r in records) / len(records),
        em_match=_mean(matched),
        em_no_match=_mean(unmatched),
    )


def plan_accuracy(records: Sequence[PlanRecord]) -> list[PlanAccuracyRow]:
    """Per-hop rows in ascending hop order, then the overall row."""
    if not records:
        return []
    by_hops: dict[int, list[PlanRecord]] = {}
    for record in records:
        by_hops.setdefault(record.hops, []).append(record)
    rows = [_plan_row(hops, by_hops[hops]) for hops in sorted(by_hops)]
    rows.append(_plan_row(None, records))
    return rows


def mean(values: Iterable[float]) -> float | None:
    return _mean(list(values))
