"""Tests for the chat-completions client."""

import json

import pytest
import responses
from responses import registries

from propgraph.chat_client import ChatClient
from propgraph.errors import BackendError
from propgraph.llm_gateway import Stage

BASE_URL = "http://localhost:8000/v1"
COMPLETIONS_URL = f"{BASE_URL}/chat/completions"


def completion(text, prompt_tokens=12, completion_tokens=3):
    return {
        "id": "cmpl-1",
        "model": "test-chat",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
    }


@pytest.fixture
def client():
    return ChatClient(base_url=f"{BASE_URL}/", model="test-chat", api_key="test_key", backoff_factor=0)


class TestChatClient:
    """Test ChatClient class."""

    def test_init(self, client):
        """Test ChatClient initialization."""
        assert client.base_url == BASE_URL
        assert client.model == "test-chat"
        assert client.session.headers["Authorization"] == "Bearer test_key"

    def test_init_without_api_key(self):
        client = ChatClient(base_url=BASE_URL, model="m")
        assert "Authorization" not in client.session.headers

    @responses.activate
    def test_chat_success(self, client):
        """Test a completion returns text and reported usage."""
        responses.add(responses.POST, COMPLETIONS_URL, json=completion("Aragon", 120, 4), status=200)

        reply = client.chat("system prompt", "Where is Perdiguera?", 0.2, Stage.EVALUATION)

        assert reply.text == "Aragon"
        assert reply.input_tokens == 120
        assert reply.output_tokens == 4

        body = json.loads(responses.calls[0].request.body)
        assert body["model"] == "test-chat"
        assert body["temperature"] == 0.2
        assert body["messages"] == [
            {"role": "system", "content": "system prompt"},
            {"role": "user", "content": "Where is Perdiguera?"},
        ]

    @responses.activate
    def test_chat_without_system_message(self, client):
        responses.add(responses.POST, COMPLETIONS_URL, json=completion("ok"), status=200)
        client.chat("", "hi", 0.1, Stage.PLANNING)
        assert json.loads(responses.calls[0].request.body)["messages"] == [{"role": "user", "content": "hi"}]

    @responses.activate
    def test_extra_params_merged(self):
        client = ChatClient(base_url=BASE_URL, model="m", extra_params={"top_p": 0.9, "temperature": 5})
        responses.add(responses.POST, COMPLETIONS_URL, json=completion("ok"), status=200)

        client.chat("", "hi", 0.1, Stage.PLANNING)

        body = json.loads(responses.calls[0].request.body)
        assert body["top_p"] == 0.9
        assert body["temperature"] == 0.1

    @responses.activate
    def test_missing_usage_is_estimated(self, client):
        body = completion("two words")
        del body["usage"]
        responses.add(responses.POST, COMPLETIONS_URL, json=body, status=200)

        reply = client.chat("", "one two three", 0.1, Stage.SYNTHESIS)

        assert reply.input_tokens == 3
        assert reply.output_tokens == 2

    @responses.activate
    def test_malformed_body(self, client):
        responses.add(responses.POST, COMPLETIONS_URL, json={"choices": []}, status=200)
        with pytest.raises(BackendError, match="no choices") as exc_info:
            client.chat("", "hi", 0.1, Stage.PLANNING)
        assert exc_info.value.stage == "planning"

    @responses.activate
    def test_non_json_body(self, client):
        responses.add(responses.POST, COMPLETIONS_URL, body="<html>", status=200)
        with pytest.raises(BackendError, match="non-JSON"):
            client.chat("", "hi", 0.1, Stage.PLANNING)

    @responses.activate
    def test_client_error_not_retried(self, client):
        """Test a 4xx fails immediately and is not marked retryable."""
        responses.add(responses.POST, COMPLETIONS_URL, json={"error": "bad request"}, status=400)

        with pytest.raises(BackendError, match="HTTP 400") as exc_info:
            client.chat("", "hi", 0.1, Stage.PLANNING)

        assert exc_info.value.retryable is False
        assert len(responses.calls) == 1

    @responses.activate(registry=registries.OrderedRegistry)
    def test_transient_failure_retried(self, client):
        """Test a 503 followed by success is retried by the session."""
        responses.add(responses.POST, COMPLETIONS_URL, status=503)
        responses.add(responses.POST, COMPLETIONS_URL, json=completion("recovered"), status=200)

        reply = client.chat("", "hi", 0.1, Stage.PLANNING)

        assert reply.text == "recovered"
        assert len(responses.calls) == 2

    @responses.activate
    def test_retries_exhausted(self):
        client = ChatClient(base_url=BASE_URL, model="m", max_retries=2, backoff_factor=0)
        responses.add(responses.POST, COMPLETIONS_URL, status=500)

        with pytest.raises(BackendError, match="after retries") as exc_info:
            client.chat("", "hi", 0.1, Stage.PLANNING)

        assert exc_info.value.retryable is True
        assert len(responses.calls) == 3

    @responses.activate
    def test_test_connection(self, client):
        """Test connection check against the model listing."""
        responses.add(responses.GET, f"{BASE_URL}/models", json={"data": []}, status=200)
        assert client.test_connection() is True

    @responses.activate
    def test_test_connection_failure(self, client):
        responses.add(responses.GET, f"{BASE_URL}/models", status=401)
        assert client.test_connection() is False

    def test_context_manager_closes_session(self, mocker):
        with ChatClient(base_url=BASE_URL, model="m") as client:
            close = mocker.spy(client.session, "close")
        close.assert_called_once()
