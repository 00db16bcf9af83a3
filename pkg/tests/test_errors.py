"""Tests for error types and configuration error reporting."""

import pytest
from pydantic import ValidationError

from propgraph.config import BackendSettings, RunConfig
from propgraph.corpus import Passage
from propgraph.errors import (
    EXIT_BACKEND,
    EXIT_DATA,
    EXIT_USAGE,
    BackendError,
    ConfigError,
    DataError,
    IndexStoreError,
    LLMOutputError,
    exit_code_for,
    format_missing_env_vars,
    format_validation_error,
    handle_config_error,
)


class TestErrorTypes:
    """Test error classes and the exit-code contract."""

    def test_exit_codes(self):
        assert exit_code_for(ConfigError("x")) == EXIT_USAGE
        assert exit_code_for(DataError("x")) == EXIT_DATA
        assert exit_code_for(IndexStoreError("x")) == EXIT_DATA
        assert exit_code_for(BackendError("x")) == EXIT_BACKEND
        assert exit_code_for(LLMOutputError("x")) == EXIT_BACKEND
        assert exit_code_for(RuntimeError("x")) == EXIT_DATA

    def test_validation_error_is_usage(self):
        with pytest.raises(ValidationError) as exc_info:
            BackendSettings(backend="grpc")
        assert exit_code_for(exc_info.value) == EXIT_USAGE

    def test_data_error_record_index(self):
        error = DataError("missing field 'text'", record_index=3)
        assert error.record_index == 3
        assert str(error) == "record 3: missing field 'text'"

    def test_index_store_error_line_number(self):
        error = IndexStoreError("bad record in entities.jsonl", line_number=12)
        assert str(error) == "bad record in entities.jsonl (line 12)"

    def test_backend_error_stage(self):
        error = BackendError("timed out", stage="planning", retryable=True)
        assert error.retryable is True
        assert str(error) == "[planning] timed out"


class TestErrorFormatting:
    """Test error formatting functions."""

    def test_nested_run_config_errors(self):
        """Test validator messages keep their dotted config path."""
        with pytest.raises(ValidationError) as exc_info:
            RunConfig.model_validate({"log_level": "LOUD", "retrieval": {"m": 0}})

        formatted = format_validation_error(exc_info.value)

        assert "❌ log_level: log_level must be one of ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']" in formatted
        assert "❌ retrieval.m: counts must be at least 1" in formatted
        assert "Value error," not in formatted
        assert "input_value=" not in formatted

    def test_backend_kind_error(self):
        with pytest.raises(ValidationError) as exc_info:
            BackendSettings(backend="grpc")

        assert "❌ backend: backend must be either 'mock' or 'http'" in format_validation_error(exc_info.value)

    def test_missing_record_fields(self):
        """Test missing required fields are reported by name."""
        with pytest.raises(ValidationError) as exc_info:
            Passage.model_validate({"title": "Alcazar"})

        formatted = format_validation_error(exc_info.value)

        assert "❌ passage_id: 'passage_id' is required" in formatted
        assert "❌ text: 'text' is required" in formatted
        assert "Field required" not in formatted

    def test_format_validation_error_empty_errors(self):
        """Test formatting validation error with empty errors list."""
        try:
            raise ValidationError.from_exception_data("test", [])
        except ValidationError as e:
            assert format_validation_error(e) == "Configuration validation failed"

    def test_wrong_type_in_config_file(self):
        """Test the 'Input should be' pattern on a numeric setting."""
        with pytest.raises(ValidationError) as exc_info:
            RunConfig.model_validate({"agent": {"max_iterations": "many"}})

        formatted = format_validation_error(exc_info.value)

        assert "agent.max_iterations" in formatted
        assert "should be a valid integer" in formatted

    def test_format_missing_env_vars(self):
        """Test formatting missing environment variables."""
        formatted = format_missing_env_vars(["base_url", "embedding_dim"])

        assert "PROPGRAPH_BASE_URL" in formatted
        assert "PROPGRAPH_EMBEDDING_DIM" in formatted
        assert "❌ Missing required configuration:" in formatted
        assert "💡 Example configuration:" in formatted
        assert "export PROPGRAPH_BASE_URL=http://localhost:8000/v1" in formatted
        assert "export PROPGRAPH_EMBEDDING_DIM=768" in formatted
        assert "🔗 See the README.md for complete configuration details." in formatted

    def test_format_missing_env_vars_unknown_var(self):
        formatted = format_missing_env_vars(["seed"])
        assert "export PROPGRAPH_SEED=your_value_here" in formatted

    def test_format_missing_env_vars_empty(self):
        """Test formatting with empty missing variables list."""
        assert format_missing_env_vars([]) == ""

    def test_handle_config_error_with_validation_error(self, capsys):
        """Test an http backend without a URL prints the missing-variable help."""
        with pytest.raises(ValidationError) as exc_info:
            BackendSettings(backend="http")

        handle_config_error(exc_info.value)

        captured = capsys.readouterr()
        assert "📋 Configuration Error:" in captured.err
        assert "❌" in captured.err
        assert "❌ base_url is required when backend is 'http'" in captured.err
        assert "PROPGRAPH_BASE_URL" in captured.err
        assert "export PROPGRAPH_BASE_URL=http://localhost:8000/v1" in captured.err

    def test_handle_config_error_with_other_exception(self, capsys):
        """Test handle_config_error with other exceptions."""
        handle_config_error(ConfigError("config file not found: run.json"))

        captured = capsys.readouterr()
        assert "❌ Configuration Error: config file not found: run.json" in captured.err
        assert "💡 Check your config file, flags and PROPGRAPH_* environment variables." in captured.err
