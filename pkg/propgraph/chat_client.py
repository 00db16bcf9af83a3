"""HTTP client for chat-completions style servers."""

import contextlib
import logging
from types import TracebackType
from typing import Any

from .errors import BackendError
from .http_utils import create_session, request_json
from .llm_gateway import ChatReply, Stage, estimate_tokens
from .types import ChatCompletionJSON, ChatMessage

logger = logging.getLogger(__name__)


class ChatClient:
    """Client speaking the ``/chat/completions`` JSON protocol."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_factor: float = 1.0,
        backoff_jitter: float = 0.0,
        extra_params: dict[str, Any] | None = None,
    ):
        """Initialize the chat client.

        Args:
            base_url: Server base URL, e.g. ``http://localhost:8000/v1``
            model: Chat model name
            api_key: Bearer token, if the server requires one
            timeout: Per-request timeout in seconds
            max_retries: Retries for transient failures
            backoff_factor: Exponential backoff base in seconds
            backoff_jitter: Random jitter added to each backoff
            extra_params: Options merged verbatim into every request body
        """
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.extra_params = dict(extra_params or {})

        self.session = create_session(
            api_key, max_retries=max_retries, backoff_factor=backoff_factor, backoff_jitter=backoff_jitter
        )

    def _make_request(self, method: str, endpoint: str, stage: str | None = None, **kwargs: Any) -> Any:
        url = f"{self.base_url}/{endpoint.lstrip('/')}"
        kwargs.setdefault("timeout", self.timeout)
        return request_json(self.session, method, url, stage, **kwargs)

    def chat(self, system: str, user: str, temperature: float, stage: Stage, scope: str = "") -> ChatReply:
        """Run one completion.

        Returns:
            The reply text with usage counts (estimated when the server
            reports none)

        Raises:
            BackendError: On transport failure, HTTP error or a malformed body
        """
        messages: list[ChatMessage] = []
        if system:
            messages.append({"role": "system", "content": system})
        messages.append({"role": "user", "content": user})

        payload: dict[str, Any] = {**self.extra_params, "model": self.model, "messages": messages}
        payload["temperature"] = temperature

        data: ChatCompletionJSON = self._make_request("POST", "chat/completions", stage=stage.value, json=payload)
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError("completion response has no choices", stage=stage.value) from e

        usage = data.get("usage") or {}
        return ChatReply(
            text=text,
            input_tokens=int(usage.get("prompt_tokens", estimate_tokens(system, user))),
            output_tokens=int(usage.get("completion_tokens", estimate_tokens(text))),
        )

    def test_connection(self) -> bool:
        """Check that the server answers its model listing.

        Returns:
            True if connection is successful, False otherwise
        """
        try:
            self._make_request("GET", "models")
            logger.info(f"Connection to chat backend at {self.base_url} successful")
            return True
        except BackendError as e:
            logger.error(f"Connection to chat backend at {self.base_url} failed: {e}")
            return False

    # Resource management
    def close(self) -> None:
        """Close underlying HTTP session."""
        with contextlib.suppress(Exception):
            self.session.close()

    def __enter__(self) -> "ChatClient":
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        self.close()
