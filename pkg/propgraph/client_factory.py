"""Factory functions for creating backend and gateway instances."""

import logging
from typing import TYPE_CHECKING

from .chat_client import ChatClient
from .embedding_client import EmbeddingClient
from .llm_gateway import ChatBackend, EmbeddingBackend, LLMGateway, TokenLedger
from .mock_backend import MockChatBackend, MockEmbedder, load_fixtures

if TYPE_CHECKING:
    from .config import BackendSettings, RunConfig

logger = logging.getLogger(__name__)


def create_backends(config: "RunConfig") -> tuple[ChatBackend, EmbeddingBackend]:
    """Create the chat and embedding backends a run is configured for.

    Args:
        config: Run configuration

    Returns:
        Tuple of (chat backend, embedding backend)
    """
    settings: BackendSettings = config.backend
    if settings.backend == "mock":
        fixtures = load_fixtures(config.fixtures_path) if config.fixtures_path else None
        chat = MockChatBackend(fixtures.responses if fixtures else ())
        seed = config.seed if settings.mock_seed is None else settings.mock_seed
        embedder = MockEmbedder(settings.embedding_dim, seed=seed, table=fixtures.embeddings if fixtures else None)
        logger.info(
            f"Using mock backend ({len(fixtures.responses) if fixtures else 0} scripted responses, "
            f"dimension {settings.embedding_dim}, seed {seed})"
        )
        return chat, embedder

    assert settings.base_url is not None  # enforced by BackendSettings
    client = ChatClient(
        base_url=settings.base_url,
        model=settings.chat_model,
        api_key=settings.api_key,
        timeout=settings.timeout,
        max_retries=settings.max_retries,
        backoff_factor=settings.backoff_factor,
        backoff_jitter=settings.backoff_jitter,
        extra_params=settings.extra_params,
    )
    embedding_client = EmbeddingClient(
        base_url=settings.base_url,
        model=settings.embedding_model,
        dimension=settings.embedding_dim,
        api_key=settings.api_key,
        timeout=settings.timeout,
        max_retries=settings.max_retries,
        backoff_factor=settings.backoff_factor,
        backoff_jitter=settings.backoff_jitter,
    )
    logger.info(f"Using HTTP backend at {settings.base_url} (chat: {settings.chat_model})")
    return client, embedding_client


def create_gateway(config: "RunConfig", ledger: TokenLedger | None = None) -> LLMGateway:
    """Create the gateway all pipeline stages talk through.

    Args:
        config: Run configuration
        ledger: Ledger to record into; a fresh one when omitted

    Returns:
        Configured LLMGateway instance
    """
    chat, embedder = create_backends(config)
    return LLMGateway(
        chat,
        embedder,
        ledger=ledger,
        max_in_flight=config.backend.max_in_flight,
        embedding_batch_size=config.backend.embedding_batch_size,
    )
