"""HTTP client for ``/embeddings`` endpoints."""

import contextlib
import logging
from collections.abc import Sequence
from types import TracebackType
from typing import Any

import numpy as np

from .errors import BackendError
from .http_utils import create_session, request_json
from .types import EmbeddingResponseJSON

logger = logging.getLogger(__name__)


class EmbeddingClient:
    """Client for an embeddings server returning one vector per input text."""

    def __init__(
        self,
        base_url: str,
        model: str,
        dimension: int,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_factor: float = 1.0,
        backoff_jitter: float = 0.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dimension = dimension
        self.timeout = timeout

        self.session = create_session(
            api_key, max_retries=max_retries, backoff_factor=backoff_factor, backoff_jitter=backoff_jitter
        )

    def _make_request(self, method: str, endpoint: str, **kwargs: Any) -> Any:
        url = f"{self.base_url}/{endpoint.lstrip('/')}"
        kwargs.setdefault("timeout", self.timeout)
        return request_json(self.session, method, url, "embedding", **kwargs)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Embed a batch of texts.

        Returns:
            Array of shape (len(texts), dimension), rows in input order

        Raises:
            BackendError: On transport failure or a response of the wrong shape
        """
        data: EmbeddingResponseJSON = self._make_request(
            "POST", "embeddings", json={"model": self.model, "input": list(texts)}
        )
        items = sorted(data.get("data") or [], key=lambda item: item["index"])
        if len(items) != len(texts):
            raise BackendError(f"expected {len(texts)} embeddings, got {len(items)}", stage="embedding")

        matrix = np.asarray([item["embedding"] for item in items], dtype=np.float64)
        if matrix.shape[1] != self.dimension:
            raise BackendError(
                f"embedding dimension {matrix.shape[1]} does not match configured {self.dimension}", stage="embedding"
            )
        logger.debug(f"Embedded {len(texts)} texts with {self.model}")
        return matrix

    # Resource management
    def close(self) -> None:
        """Close underlying HTTP session."""
        with contextlib.suppress(Exception):
            self.session.close()

    def __enter__(self) -> "EmbeddingClient":
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        self.close()
