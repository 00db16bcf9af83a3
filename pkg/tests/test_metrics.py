"""Tests for answer and retrieval metrics."""

import math
import random
from fractions import Fraction

import pytest

from propgraph.errors import DataError
from propgraph.metrics import (
    EconomyRecord,
    PlanRecord,
    difficulty_from_counts,
    exact_match,
    ndcg_at_5,
    ndcg_at_k,
    normalize,
    plan_accuracy,
    recall_at_k,
    success_economy,
    surprisal,
    token_f1,
)


class TestAnswerMetrics:
    """Test normalization, EM and F1."""

    @pytest.mark.parametrize(
        ("answer", "expected"),
        [
            ("The 15th Century.", ["15th", "century"]),
            ("", []),
            ("Barcelona", ["barcelona"]),
            ("  an   apple,  a pear ", ["apple", "pear"]),
        ],
    )
    def test_normalize(self, answer, expected):
        assert normalize(answer) == expected

    @pytest.mark.parametrize(
        ("prediction", "gold", "expected"),
        [
            ("built in the 15th century", ["15th century"], 0),
            ("The 15th century", ["15th century"], 1),
            ("Barcelona", ["Madrid"], 0),
            ("Barcelona", ["Madrid", "barcelona!"], 1),
        ],
    )
    def test_exact_match(self, prediction, gold, expected):
        assert exact_match(prediction, gold) == expected

    def test_token_f1(self):
        assert token_f1("Barcelona", ["Barcelona"]) == 1.0
        assert token_f1("Madrid", ["Barcelona"]) == 0.0
        assert token_f1("built in the 15th century", ["15th century"]) == pytest.approx(2 / 3, abs=1e-4)

    def test_token_f1_best_alias(self):
        assert token_f1("15th century", ["built in 15th century", "15th century"]) == 1.0

    def test_empty_prediction(self):
        assert token_f1("", ["Barcelona"]) == 0.0
        assert token_f1("the", ["a"]) == 1.0

    def test_gold_required(self):
        with pytest.raises(ValueError):
            exact_match("x", [])
        with pytest.raises(ValueError):
            token_f1("x", [])

    def test_em_implies_full_f1(self):
        rng = random.Random(7)
        vocabulary = ["the", "a", "Barcelona", "15th", "century", "Aragon", "king", ",", "."]
        for _ in range(1000):
            prediction = " ".join(rng.choices(vocabulary, k=rng.randint(0, 4)))
            gold = [" ".join(rng.choices(vocabulary, k=rng.randint(1, 4))) for _ in range(rng.randint(1, 2))]
            if exact_match(prediction, gold):
                assert token_f1(prediction, gold) == 1.0


class TestRetrievalMetrics:
    """Test recall and NDCG."""

    def test_recall(self):
        assert recall_at_k(["a", "b"], {"a", "b"}) == 1.0
        assert recall_at_k(["a", "x"], {"a", "b"}) == 0.5
        assert recall_at_k(["x", "a"], {"a"}, k=1) == 0.0

    def test_recall_monotone_in_k(self):
        retrieved = ["x", "a", "y", "b", "c"]
        values = [recall_at_k(retrieved, {"a", "b", "c"}, k) for k in range(1, 6)]
        assert values == sorted(values)

    def test_recall_needs_gold(self):
        with pytest.raises(ValueError):
            recall_at_k(["a"], set())

    def test_ndcg(self):
        assert ndcg_at_5([1, 2, 3], {1}) == 1.0
        assert ndcg_at_5([2, 1, 3], {1}) == pytest.approx(1 / math.log2(3))
        assert ndcg_at_5([2, 3, 4, 5, 6, 1], {1}) == 0.0

    def test_ndcg_ideal_order(self):
        assert ndcg_at_5([1, 2, 9], {1, 2}) == pytest.approx(1.0)
        assert ndcg_at_5([1, 2, 3, 4, 5], set(range(1, 8))) == pytest.approx(1.0)
        assert ndcg_at_5([9, 1, 2], {1, 2}) < 1.0

    def test_ndcg_cut(self):
        assert ndcg_at_k([9, 1], {1}, k=1) == 0.0

    def test_ndcg_needs_relevant(self):
        with pytest.raises(ValueError):
            ndcg_at_5([1], set())


class TestDifficulty:
    """Test smoothed success rates and surprisal weights."""

    def test_half_right(self):
        r = difficulty_from_counts(5, 10)
        assert r == 0.5
        assert surprisal(r) == 1.0

    def test_all_right(self):
        r = difficulty_from_counts(10, 10)
        assert r == pytest.approx(10.5 / 11)
        assert surprisal(r) == pytest.approx(0.0671, abs=1e-3)

    def test_all_wrong_stays_finite(self):
        r = difficulty_from_counts(0, 10)
        assert r == pytest.approx(0.04545, abs=1e-5)
        assert surprisal(r) == pytest.approx(4.459, abs=1e-3)

    @pytest.mark.parametrize(("correct", "samples"), [(0, 1), (1, 1), (3, 7), (0, 30)])
    def test_weights_positive(self, correct, samples):
        w = surprisal(difficulty_from_counts(correct, samples))
        assert 0 < w < math.inf

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            difficulty_from_counts(3, 2)
        with pytest.raises(ValueError):
            difficulty_from_counts(0, 0)
        with pytest.raises(ValueError):
            surprisal(0.0)


class TestSuccessEconomy:
    """Test tokens per weighted correct answer."""

    def test_single_correct(self):
        report = success_economy(
            [
                EconomyRecord("q1", tokens=600, em=1, r=0.25),
                EconomyRecord("q2", tokens=400, em=0, r=None),
            ]
        )
        assert report.weighted_correct == 2.0
        assert report.c_w == 500.0

    def test_all_wrong(self):
        report = success_economy([EconomyRecord("q1", tokens=100, em=0)])
        assert report.undefined
        assert report.c_w is None

    def test_scale_consistent(self):
        records = [EconomyRecord("q1", Fraction(1000, 3), 1, 0.3), EconomyRecord("q2", 250, 1, 0.9)]
        doubled = [EconomyRecord(r.question_id, r.tokens * 2, r.em, r.r) for r in records]
        assert success_economy(doubled).c_w == pytest.approx(2 * success_economy(records).c_w, rel=1e-12)

    def test_missing_difficulty(self):
        with pytest.raises(DataError, match="q2"):
            success_economy([EconomyRecord("q1", 10, 1, 0.5), EconomyRecord("q2", 10, 1)])


class TestPlanAccuracy:
    """Test the planner table."""

    def test_perfect_planner(self):
        rows = plan_accuracy([PlanRecord("a", 2, 2, 1), PlanRecord("b", 3, 3, 0)])
        overall = rows[-1]
        assert overall.label == "overall"
        assert (overall.accuracy, overall.avg_deviation) == (1.0, 0.0)
        assert overall.em_no_match is None

    def test_constant_offset(self):
        rows = plan_accuracy([PlanRecord("a", 3, 2, 1), PlanRecord("b", 3, 2, 0)])
        assert [row.label for row in rows] == ["2-hop", "overall"]
        assert (rows[-1].accuracy, rows[-1].avg_deviation) == (0.0, 1.0)

    def test_mixed(self):
        rows = plan_accuracy(
            [
                PlanRecord("a", 2, 2, 1),
                PlanRecord("b", 3, 2, 0),
                PlanRecord("c", 3, 3, 1),
                PlanRecord("d", 2, 4, 1),
            ]
        )
        assert [row.label for row in rows] == ["2-hop", "3-hop", "4-hop", "overall"]
        two_hop = rows[0]
        assert (two_hop.questions, two_hop.accuracy, two_hop.avg_deviation) == (2, 0.5, 0.5)
        assert (two_hop.em_match, two_hop.em_no_match) == (1.0, 0.0)
        overall = rows[-1]
        assert overall.accuracy == 0.5
        assert overall.avg_deviation == pytest.approx(-0.25)
        assert (overall.em_match, overall.em_no_match) == (1.0, 0.5)

    def test_empty(self):
        assert plan_accuracy([]) == []
