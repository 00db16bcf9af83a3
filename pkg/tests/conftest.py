"""Test configuration and fixtures for PropGraph-QA tests."""

import os
from unittest.mock import patch

import pytest

from propgraph.config import RetrievalConfig
from propgraph.llm_gateway import LLMGateway, TokenLedger
from propgraph.mock_backend import MockChatBackend, MockEmbedder

from .worked_example import DIMENSION, build_index, statement_vectors


@pytest.fixture(autouse=True)
def isolate_environment():
    """Automatically isolate environment variables for all tests.

    This fixture:
    1. Prevents loading of live .env files
    2. Clears all PROPGRAPH_* environment variables
    3. Restores original environment after test
    """
    original_env = dict(os.environ)

    for key in list(os.environ.keys()):
        if key.startswith("PROPGRAPH_"):
            del os.environ[key]

    with patch("propgraph.config.load_dotenv") as mock_load_dotenv:
        mock_load_dotenv.return_value = True

        try:
            yield
        finally:
            os.environ.clear()
            os.environ.update(original_env)


@pytest.fixture
def mock_chat():
    """An empty scripted chat backend."""
    return MockChatBackend()


@pytest.fixture
def mock_embedder():
    """A hash-seeded embedder of dimension 16."""
    return MockEmbedder(16)


@pytest.fixture
def gateway(mock_chat, mock_embedder):
    """A gateway over the mock backends with a fresh ledger."""
    return LLMGateway(mock_chat, mock_embedder, ledger=TokenLedger())


@pytest.fixture
def worked_index():
    """The frozen three-hop worked-example index."""
    return build_index()


@pytest.fixture
def worked_gateway(mock_chat):
    """A gateway whose embedder maps the worked-example statements onto hop directions."""
    return LLMGateway(mock_chat, MockEmbedder(DIMENSION, table=statement_vectors()), ledger=TokenLedger())


@pytest.fixture
def retrieval_config():
    """Default retrieval constants."""
    return RetrievalConfig()


@pytest.fixture
def env_vars():
    """Provide a set of valid environment variables for testing."""
    return {
        "PROPGRAPH_BACKEND": "http",
        "PROPGRAPH_BASE_URL": "http://test-llm:8000/v1",
        "PROPGRAPH_API_KEY": "test_api_key",
        "PROPGRAPH_CHAT_MODEL": "test-chat",
        "PROPGRAPH_EMBEDDING_MODEL": "test-embed",
        "PROPGRAPH_EMBEDDING_DIM": "32",
        "PROPGRAPH_MAX_IN_FLIGHT": "2",
    }
