"""Deterministic chat and embedding backends for tests and offline runs."""

import hashlib
import json
import logging
import threading
from collections import deque
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import BackendError, DataError
from .llm_gateway import ChatReply, Stage, estimate_tokens
from .types import ScriptedResponse

logger = logging.getLogger(__name__)

Responder = Callable[[Stage, str, str], str | None]


@dataclass(frozen=True)
class RecordedCall:
    stage: Stage
    scope: str
    system: str
    user: str
    temperature: float


class MockChatBackend:
    """Replays scripted responses.

    Lookup order for a call is: queue for (question, stage), queue for the
    question, queue for the stage, the shared queue, then ``responder``.
    Token counts come from the script when given, else from a whitespace
    count of prompt and reply.
    """

    def __init__(self, responses: Iterable[ScriptedResponse | str] = (), responder: Responder | None = None):
        self._lock = threading.Lock()
        self._queues: dict[tuple[str | None, str | None], deque[ScriptedResponse]] = {}
        self.responder = responder
        self.calls: list[RecordedCall] = []
        for response in responses:
            self.add(response)

    def add(self, response: ScriptedResponse | str, stage: Stage | None = None, question_id: str | None = None) -> None:
        scripted: ScriptedResponse = {"text": response} if isinstance(response, str) else ScriptedResponse(**response)
        if stage is not None:
            scripted["stage"] = stage.value
        key = (question_id or scripted.get("question_id"), scripted.get("stage"))
        with self._lock:
            self._queues.setdefault(key, deque()).append(scripted)

    def remaining(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())

    def chat(self, system: str, user: str, temperature: float, stage: Stage, scope: str) -> ChatReply:
        with self._lock:
            self.calls.append(RecordedCall(stage, scope, system, user, temperature))
            scripted = None
            for key in ((scope, stage.value), (scope, None), (None, stage.value), (None, None)):
                queue = self._queues.get(key)
                if queue:
                    scripted = queue.popleft()
                    break

        if scripted is None and self.responder is not None:
            text = self.responder(stage, system, user)
            if text is not None:
                scripted = {"text": text}
        if scripted is None:
            raise BackendError("mock backend has no scripted response left", stage=stage.value)

        text = scripted["text"]
        return ChatReply(
            text=text,
            input_tokens=scripted.get("input_tokens", estimate_tokens(system, user)),
            output_tokens=scripted.get("output_tokens", estimate_tokens(text)),
        )


class MockEmbedder:
    """Hash-seeded pseudo-random unit vectors, overridable per text.

    Identical text always yields the identical vector for a given seed and
    dimension. Entries in ``table`` replace the hash for controlled-similarity
    fixtures.
    """

    def __init__(self, dimension: int, seed: int = 0, table: Mapping[str, Sequence[float]] | None = None):
        if dimension < 1:
            raise ValueError("dimension must be at least 1")
        self.dimension = dimension
        self.seed = seed
        self.table: dict[str, np.ndarray] = {}
        for text, vector in (table or {}).items():
            self.inject(text, vector)

    def inject(self, text: str, vector: Sequence[float] | np.ndarray) -> None:
        array = np.asarray(vector, dtype=np.float64)
        if array.shape != (self.dimension,):
            raise ValueError(f"injected vector for '{text}' has shape {array.shape}, expected ({self.dimension},)")
        if not np.any(array):
            raise ValueError(f"injected vector for '{text}' is zero")
        self.table[text] = array

    def vector(self, text: str) -> np.ndarray:
        if text in self.table:
            raw = self.table[text]
        else:
            digest = hashlib.sha256(f"{self.seed}:{text}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            raw = rng.standard_normal(self.dimension)
        return raw / np.linalg.norm(raw)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension), dtype=np.float64)
        return np.vstack([self.vector(text) for text in texts])


@dataclass
class Fixtures:
    """Scripted responses and injected vectors loaded from a JSON file."""

    responses: list[ScriptedResponse]
    embeddings: dict[str, list[float]]


def load_fixtures(path: Path) -> Fixtures:
    """Read ``{"responses": [...], "embeddings": {text: vector}}``.

    A bare JSON list is read as the responses.

    Raises:
        DataError: If the file is missing or malformed
    """
    try:
        raw: Any = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"fixtures file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"fixtures file {path} is not valid JSON: {e.msg}") from e

    if isinstance(raw, list):
        raw = {"responses": raw}
    if not isinstance(raw, dict):
        raise DataError(f"fixtures file {path} must hold an object or a list")

    responses = []
    for i, item in enumerate(raw.get("responses", [])):
        if isinstance(item, str):
            item = {"text": item}
        if not isinstance(item, dict) or not isinstance(item.get("text"), str):
            raise DataError("scripted response needs a 'text' string", record_index=i)
        if "stage" in item and item["stage"] not in {s.value for s in Stage}:
            raise DataError(f"unknown stage '{item['stage']}'", record_index=i)
        responses.append(item)

    embeddings = raw.get("embeddings", {})
    if not isinstance(embeddings, dict):
        raise DataError("'embeddings' must map text to a vector")
    logger.debug(f"Loaded {len(responses)} scripted responses and {len(embeddings)} vectors from {path}")
    return Fixtures(responses=responses, embeddings=embeddings)
