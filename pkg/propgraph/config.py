"""Configuration management for PropGraph-QA using pydantic and pydantic-settings."""

import json
import logging
from enum import StrEnum
from pathlib import Path
from typing import Any

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_core import PydanticCustomError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

logger = logging.getLogger(__name__)


class SourceFormat(StrEnum):
    RETRIEVAL_SPLIT = "retrieval_split"
    LONGBENCH = "longbench"


class UnitKind(StrEnum):
    PROPOSITION = "proposition"
    SENTENCE = "sentence"


class Weighting(StrEnum):
    RANKVOTE = "rankvote"
    UNIFORM = "uniform"


class RetrievalMode(StrEnum):
    FULL = "full"
    DPR_BYPASS = "dpr_bypass"
    NO_ENTITY_SELECTION = "no_entity_selection"


class BackendSettings(BaseSettings):
    """Chat/embedding backend settings, read from PROPGRAPH_* environment variables."""

    backend: str = Field(default="mock", description="Backend kind (mock or http)")
    base_url: str | None = Field(default=None, description="Base URL of the chat-completions style server")
    api_key: str | None = Field(default=None, description="Bearer token for the HTTP backend")
    chat_model: str = Field(default="mock-chat", description="Chat model name")
    embedding_model: str = Field(default="mock-embedding", description="Embedding model name")
    embedding_dim: int = Field(default=64, description="Dimension of the embedding vectors")
    max_in_flight: int = Field(default=4, description="Maximum concurrent backend requests")
    timeout: float = Field(default=60.0, description="Per-request timeout in seconds")
    max_retries: int = Field(default=3, description="Retries for transient transport errors")
    backoff_factor: float = Field(default=1.0, description="Exponential backoff base in seconds")
    backoff_jitter: float = Field(default=0.5, description="Random jitter added to each backoff")
    embedding_batch_size: int = Field(default=64, description="Texts per embedding request")
    extra_params: dict[str, Any] = Field(
        default_factory=dict, description="Opaque backend options merged into every chat request"
    )
    mock_seed: int | None = Field(default=None, description="Seed of the mock embedder; the run seed when unset")

    model_config = SettingsConfigDict(
        env_prefix="PROPGRAPH_",
        case_sensitive=False,
        env_file=None,  # load_dotenv() is called explicitly so tests can patch it
        extra="ignore",
    )

    @field_validator("backend")
    @classmethod
    def validate_backend(cls, v: str) -> str:
        """Validate that backend is either 'mock' or 'http'."""
        if v.lower() not in ["mock", "http"]:
            raise ValueError("backend must be either 'mock' or 'http'")
        return v.lower()

    @field_validator("embedding_dim", "max_in_flight", "embedding_batch_size")
    @classmethod
    def validate_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @field_validator("max_retries")
    @classmethod
    def validate_retries(cls, v: int) -> int:
        if v < 0:
            raise ValueError("max_retries must not be negative")
        return v

    @model_validator(mode="after")
    def _require_url_for_http(self) -> "BackendSettings":
        if self.backend == "http" and not self.base_url:
            raise PydanticCustomError(
                "missing_setting", "base_url is required when backend is 'http'", {"setting": "base_url"}
            )
        return self


class IndexConfig(BaseModel):
    """Graph construction settings."""

    tau: float = Field(default=0.7, description="Type-similarity threshold for entity merging")
    batch_size: int | None = Field(default=None, description="Passages per extraction call (format default if unset)")
    unit: UnitKind = Field(default=UnitKind.PROPOSITION, description="Retrieval unit kind")
    longbench_delimiter: str = Field(
        default=r"Passage \d+:[ \t]*\n", description="Regex separating passages inside a LongBench context"
    )
    embed_passages: bool = Field(default=True, description="Embed whole passages for the dense-passage ablation")
    min_sentence_tokens: int = Field(default=3, description="Shortest sentence kept in sentence mode")

    @field_validator("tau")
    @classmethod
    def validate_tau(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("tau must be within [0, 1]")
        return v

    @field_validator("batch_size")
    @classmethod
    def validate_batch_size(cls, v: int | None) -> int | None:
        if v is not None and v < 1:
            raise ValueError("batch_size must be at least 1")
        return v

    def batch_size_for(self, source_format: SourceFormat) -> int:
        """Resolve the extraction batch size for a corpus format."""
        if self.batch_size is not None:
            return self.batch_size
        return 1 if source_format == SourceFormat.LONGBENCH else 10


class RetrievalConfig(BaseModel):
    """Constants of the hybrid retrieval stack."""

    model_config = ConfigDict(populate_by_name=True)

    lambda_: float = Field(default=0.2, alias="lambda", description="Lexical weight")
    m: int = Field(default=50, description="Proposition pool size")
    k_entities: int = Field(default=5, description="Candidate entities per iteration")
    d_passages: int = Field(default=2, description="Passages returned per iteration")
    weighting: Weighting = Field(default=Weighting.RANKVOTE, description="Passage vote weighting")
    mode: RetrievalMode = Field(default=RetrievalMode.FULL, description="Retrieval mode / ablation")

    @field_validator("m", "k_entities", "d_passages")
    @classmethod
    def validate_counts(cls, v: int) -> int:
        if v < 1:
            raise ValueError("counts must be at least 1")
        return v

    @field_validator("lambda_")
    @classmethod
    def validate_lambda(cls, v: float) -> float:
        if v < 0:
            raise ValueError("lambda must not be negative")
        return v


class AgentConfig(BaseModel):
    """Constants of the planner and sub-agent loop."""

    max_iterations: int = Field(default=2, description="Traversal iterations per sub-agent")
    max_sub_questions: int = Field(default=4, description="Upper bound on planned sub-questions")

    @field_validator("max_iterations", "max_sub_questions")
    @classmethod
    def validate_counts(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v


class EvalConfig(BaseModel):
    """Evaluation toggles."""

    judge: bool = Field(default=False, description="Run the LLM judge")
    difficulty_n: int = Field(default=10, description="Closed-book samples per question")
    difficulty_temperature: float = Field(default=1.0, description="Sampling temperature for difficulty")
    retrieval_k: int = Field(default=5, description="Passages per retrieval query in retrieval evaluation")

    @field_validator("difficulty_n", "retrieval_k")
    @classmethod
    def validate_counts(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v


class RunConfig(BaseModel):
    """A reproducible run: paths, constants and backend."""

    corpus_path: Path | None = Field(default=None, description="Corpus JSONL file")
    questions_path: Path | None = Field(default=None, description="Question set JSONL file")
    source_format: SourceFormat = Field(default=SourceFormat.RETRIEVAL_SPLIT, description="Input schema")
    index_dir: Path = Field(default=Path("index"), description="Persisted index directory")
    traces_dir: Path = Field(default=Path("traces"), description="Per-question trace directory")
    output_dir: Path = Field(default=Path("results"), description="Metric report directory")
    fixtures_path: Path | None = Field(default=None, description="Scripted responses for the mock backend")
    log_level: str = Field(default="INFO", description="Log level (DEBUG, INFO, WARNING, ERROR)")
    seed: int = Field(default=0, description="Random seed")
    workers: int = Field(default=1, description="Questions answered concurrently")

    index: IndexConfig = Field(default_factory=IndexConfig)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    backend: BackendSettings = Field(default_factory=BackendSettings)

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"log_level must be one of {valid_levels}")
        return v.upper()

    @field_validator("workers")
    @classmethod
    def validate_workers(cls, v: int) -> int:
        if v < 1:
            raise ValueError("workers must be at least 1")
        return v

    def resolved_summary(self) -> dict[str, Any]:
        """Return the resolved configuration as JSON-safe data, secrets masked."""
        data = self.model_dump(mode="json", by_alias=True)
        if data["backend"].get("api_key"):
            data["backend"]["api_key"] = "***"
        return data


def _apply_overrides(data: dict[str, Any], overrides: dict[str, Any]) -> None:
    """Apply dotted-path overrides (``retrieval.lambda``) to nested config data.

    ``None`` values mean "flag not given" and are skipped.
    """
    for dotted, value in overrides.items():
        if value is None:
            continue
        target = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            target = target.setdefault(part, {})
        target[leaf] = value


def get_config(config_path: Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load the run configuration.

    Precedence is flags > config file > environment (backend only) > defaults.

    - Loads a .env if present via python-dotenv (tests patch this out).
    - The API key is only ever read from PROPGRAPH_API_KEY.
    """
    load_dotenv()

    data: dict[str, Any] = {}
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {config_path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config file {config_path} must contain a JSON object")

    _apply_overrides(data, overrides or {})

    backend_data = data.pop("backend", {}) or {}
    if "api_key" in backend_data:
        raise ConfigError("api_key must not be set in config files; use PROPGRAPH_API_KEY")

    backend = BackendSettings(**backend_data)
    config = RunConfig.model_validate({**data, "backend": backend})

    logger.debug(f"Resolved configuration with backend '{config.backend.backend}'")
    return config
