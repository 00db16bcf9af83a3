"""Tests for question decomposition."""

import pytest

from propgraph.errors import LLMOutputError
from propgraph.llm_output import QuestionSession
from propgraph.planner import parse_plan, plan

from .worked_example import QUESTION, SUB_QUESTIONS

PLAN_TEXT = (
    """Rational Plan: Find the region of Perdiguera, then where its
king died, then when the building there was built.

Sub-questions:
"""
    + "\n".join(f"{i}. {q}" for i, q in enumerate(SUB_QUESTIONS, 1))
    + "\n"
)


class TestParsePlan:
    """Test planner output parsing."""

    def test_valid_plan(self):
        parsed = parse_plan(PLAN_TEXT)

        assert parsed.rational_plan.startswith("Find the region of Perdiguera, then where its king died")
        assert [q.index for q in parsed.sub_questions] == [1, 2, 3]
        assert parsed.sub_questions[1].dependencies == frozenset({1})
        assert parsed.sub_questions[2].dependencies == frozenset({2})
        assert not parsed.truncated

    def test_markdown_headers_and_parentheses(self):
        text = "**Rational Plan:** two steps\n### Sub-questions\n1) Who?\n2) Where did #1 live?"
        parsed = parse_plan(text)
        assert parsed.rational_plan == "two steps"
        assert [q.text for q in parsed.sub_questions] == ["Who?", "Where did #1 live?"]

    def test_truncates_long_plans(self):
        text = "\n".join(f"{i}. step {i}" for i in range(1, 7))
        parsed = parse_plan(text, max_sub_questions=4)
        assert len(parsed.sub_questions) == 4
        assert parsed.truncated

    def test_missing_rational_plan_is_tolerated(self):
        assert parse_plan("1. Only step").rational_plan == ""

    def test_no_sub_questions(self):
        with pytest.raises(LLMOutputError, match="no numbered sub-questions"):
            parse_plan("Rational Plan: think hard")

    def test_broken_numbering(self):
        with pytest.raises(LLMOutputError, match="numbering breaks at 3 \\(expected 2\\)"):
            parse_plan("1. first\n3. third")

    def test_forward_reference(self):
        with pytest.raises(LLMOutputError, match="sub-question 2 references #2"):
            parse_plan("1. first\n2. uses #2 itself")

    def test_to_dict(self):
        data = parse_plan(PLAN_TEXT).to_dict()
        assert data["sub_questions"][1] == {
            "index": 2,
            "text": SUB_QUESTIONS[1],
            "dependencies": [1],
        }


class TestPlan:
    """Test the planning call."""

    def test_plan_success(self, gateway, mock_chat):
        mock_chat.add(PLAN_TEXT)
        outcome = plan(QUESTION, QuestionSession(gateway, "q1"))

        assert outcome.failure is None
        assert [q.text for q in outcome.plan.sub_questions] == list(SUB_QUESTIONS)
        assert outcome.call_ids == ["q1:0001"]
        assert QUESTION in mock_chat.calls[0].user

    def test_plan_recovers_after_reprompt(self, gateway, mock_chat):
        mock_chat.add("I cannot plan this.")
        mock_chat.add(PLAN_TEXT)

        outcome = plan(QUESTION, QuestionSession(gateway, "q1"))

        assert outcome.plan is not None
        assert outcome.call_ids == ["q1:0001", "q1:0002"]

    def test_plan_failure(self, gateway, mock_chat):
        mock_chat.add("nothing")
        mock_chat.add("still nothing")

        outcome = plan(QUESTION, QuestionSession(gateway, "q1"))

        assert outcome.plan is None
        assert outcome.failure == "plan: planner output has no numbered sub-questions"

    def test_empty_question(self, gateway):
        with pytest.raises(ValueError, match="empty"):
            plan("   ", QuestionSession(gateway, "q1"))
