"""Tests for structured-output parsing helpers."""

import pytest

from propgraph.errors import LLMOutputError
from propgraph.llm_gateway import Stage
from propgraph.llm_output import (
    REPROMPT_SUFFIX,
    QuestionSession,
    complete_parsed,
    normalize_key,
    parse_int_list,
    parse_key_values,
    parse_keywords,
    strip_citations,
    strip_quotes,
)


def parse_number(text):
    if not text.strip().isdigit():
        raise LLMOutputError("not a number")
    return int(text)


class TestQuestionSession:
    """Test the per-question call recorder."""

    def test_records_calls(self, gateway, mock_chat):
        mock_chat.add({"text": "hello", "input_tokens": 5, "output_tokens": 1})
        session = QuestionSession(gateway, "q7")

        response = session.complete(Stage.PLANNING, "prompt")

        assert response.call_id == "q7:0001"
        (call,) = session.calls
        assert (call.stage, call.prompt, call.response) == ("planning", "prompt", "hello")
        assert (session.input_tokens, session.output_tokens) == (5, 1)


class TestCompleteParsed:
    """Test the parse-and-reprompt loop."""

    def test_first_reply_parses(self, gateway, mock_chat):
        mock_chat.add("42")
        parsed = complete_parsed(QuestionSession(gateway, "q"), Stage.SELECTION, "pick", parse_number)
        assert parsed.value == 42
        assert parsed.call_ids == ["q:0001"]
        assert not parsed.reprompted

    def test_reprompt_recovers(self, gateway, mock_chat):
        mock_chat.add("forty-two")
        mock_chat.add("42")

        parsed = complete_parsed(QuestionSession(gateway, "q"), Stage.SELECTION, "pick", parse_number)

        assert parsed.value == 42
        assert parsed.reprompted
        assert mock_chat.calls[1].user == "pick" + REPROMPT_SUFFIX.format(reason="not a number")

    def test_gives_up_after_one_reprompt(self, gateway, mock_chat):
        mock_chat.add("a")
        mock_chat.add("b")
        mock_chat.add("42")

        parsed = complete_parsed(QuestionSession(gateway, "q"), Stage.SELECTION, "pick", parse_number)

        assert parsed.value is None
        assert parsed.error == "not a number"
        assert parsed.call_ids == ["q:0001", "q:0002"]
        assert mock_chat.remaining() == 1


class TestParseKeyValues:
    """Test tolerant key/value extraction."""

    def test_plain_lines(self):
        text = "Action: DONE\nAnswer: Aragon"
        assert parse_key_values(text, {"action", "answer"}) == {"action": "DONE", "answer": "Aragon"}

    def test_markdown_decorations(self):
        text = "- **Action**: QUERY_AGAIN\n**Search Statement:** Martin of Aragon died in Barcelona"
        values = parse_key_values(text, {"action", "search_statement"})
        assert values == {"action": "QUERY_AGAIN", "search_statement": "Martin of Aragon died in Barcelona"}

    def test_continuation_lines(self):
        text = "Reasoning: first line\nsecond line\n\nAnswer: x"
        values = parse_key_values(text, {"reasoning", "answer"})
        assert values["reasoning"] == "first line second line"

    def test_unknown_keys_continue_previous(self):
        text = "Answer: Barcelona\nNote: see above"
        assert parse_key_values(text, {"answer"}) == {"answer": "Barcelona Note: see above"}

    def test_normalize_key(self):
        assert normalize_key(" Search-Statement ") == "search_statement"


class TestSmallParsers:
    """Test the string helpers."""

    @pytest.mark.parametrize(
        ("raw", "expected"),
        [
            ('"Aragon"', "Aragon"),
            ("'`x`'", "x"),
            ("**bold**", "bold"),
            ('"unbalanced', '"unbalanced'),
        ],
    )
    def test_strip_quotes(self, raw, expected):
        assert strip_quotes(raw) == expected

    def test_strip_citations(self):
        assert strip_citations("Aragon [ID: 3] and Spain [id:12]") == "Aragon and Spain"

    def test_parse_int_list(self):
        assert parse_int_list("[3, 7], and 12") == [3, 7, 12]

    def test_parse_keywords_json(self):
        assert parse_keywords('["Martin of Aragon", "death place"]') == ["Martin of Aragon", "death place"]

    def test_parse_keywords_text(self):
        assert parse_keywords('"Palau"; Barcelona [ID: 2], ') == ["Palau", "Barcelona"]

    def test_parse_keywords_broken_json(self):
        assert parse_keywords("[Palau, Barcelona") == ["Palau", "Barcelona"]
