"""Chat and embedding backends.

``OpenAIBackend`` talks to any OpenAI-compatible endpoint over HTTP.
``MockBackend`` replays a script keyed by ``"role/round"`` and derives
embeddings from a hash of the input, so protocol tests run offline and
deterministically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx
import numpy as np

from .core import MDTError

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_MAX_TOKENS = 1024
DEFAULT_CHAT_MODEL = "gpt-4-turbo"
DEFAULT_EMBEDDING_MODEL = "text-embedding-3-small"
DEFAULT_BASE_URL = "https://api.openai.com"
MOCK_EMBEDDING_DIM = 256


class BackendError(MDTError):
    pass


class TransportError(BackendError):
    pass


class AuthError(BackendError):
    pass


class RateLimitedError(BackendError):
    pass


class BadResponseError(BackendError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    """One chat completion call.

    ``tags`` carry routing metadata (role, round, case id, attempt, whether a
    knowledge block is present). They never go over the wire; the mock uses
    them to pick a scripted reply.
    """

    system_prompt: str
    user_prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    model_name: str = DEFAULT_CHAT_MODEL
    tags: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.system_prompt.strip() or not self.user_prompt.strip():
            raise ValueError("prompts must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def payload(self, model: str | None = None) -> dict[str, Any]:
        return {
            "model": model or self.model_name,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": self.user_prompt},
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_name: str = DEFAULT_EMBEDDING_MODEL

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not values:
            raise ValueError("embedding must have at least one component")
        if not all(math.isfinite(v) for v in values):
            raise ValueError("embedding has non-finite components")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


class Backend:
    """Shared surface for chat + embedding backends.

    ``max_concurrency`` caps in-flight calls across every thread that shares
    the backend.
    """

    def __init__(self, max_concurrency: int = 8):
        self.max_concurrency = max_concurrency
        self._gate = threading.BoundedSemaphore(max_concurrency)

    def __deepcopy__(self, memo):
        # A backend is a shared connection, not a value; copies share it.
        return self

    def chat(self, request: ChatRequest) -> str:
        with self._gate:
            return self._chat(request)

    def embed(self, text: str) -> EmbeddingVector:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        with self._gate:
            return self._embed(text)

    def _chat(self, request: ChatRequest) -> str:
        raise NotImplementedError

    def _embed(self, text: str) -> EmbeddingVector:
        raise NotImplementedError


def chat(backend: Backend, request: ChatRequest) -> str:
    return backend.chat(request)


def embed(backend: Backend, text: str) -> EmbeddingVector:
    return backend.embed(text)


class OpenAIBackend(Backend):
    """Client for ``/v1/chat/completions`` and ``/v1/embeddings``."""

    def __init__(
        self,
        api_key: str | None = None,
        base_url: str | None = None,
        model: str = DEFAULT_CHAT_MODEL,
        embedding_model: str = DEFAULT_EMBEDDING_MODEL,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        timeout: float = 60.0,
        max_concurrency: int = 8,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        jitter: Callable[[], float] = random.random,
    ):
        super().__init__(max_concurrency=max_concurrency)
        self.api_key = api_key if api_key is not None else os.environ.get("MDT_API_KEY", "")
        self.base_url = (base_url or os.environ.get("MDT_BASE_URL") or DEFAULT_BASE_URL).rstrip("/")
        if self.base_url.endswith("/v1"):
            self.base_url = self.base_url[: -len("/v1")]
        self.model = model
        self.embedding_model = embedding_model
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._jitter = jitter
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, body: dict[str, Any]) -> dict[str, Any]:
        url = f"{self.base_url}{path}"
        headers = {"Authorization": f"Bearer {self.api_key}", "Content-Type": "application/json"}
        content = json.dumps(body, ensure_ascii=False).encode("utf-8")
        last: BackendError | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                delay = self.backoff_base * (2 ** (attempt - 1)) * (1.0 + self._jitter())
                logger.warning("retrying %s in %.2fs after: %s", path, delay, last)
                self._sleep(delay)
            try:
                resp = self._client.post(url, content=content, headers=headers)
            except httpx.HTTPError as exc:
                last = TransportError(f"{type(exc).__name__}: {exc}")
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"HTTP {resp.status_code} from {url}")
            if resp.status_code == 429:
                last = RateLimitedError(f"HTTP 429 from {url}")
                continue
            if resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code} from {url}")
                continue
            if resp.status_code >= 400:
                raise BadResponseError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BadResponseError(f"non-JSON body from {url}") from exc
        assert last is not None
        raise last

    def _chat(self, request: ChatRequest) -> str:
        data = self._post("/v1/chat/completions", request.payload(self.model))
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BadResponseError("response lacks choices[0].message.content") from exc
        if not isinstance(content, str):
            raise BadResponseError("message content is not text")
        return content

    def _embed(self, text: str) -> EmbeddingVector:
        data = self._post("/v1/embeddings", {"model": self.embedding_model, "input": text})
        try:
            values = data["data"][0]["embedding"]
            return EmbeddingVector(tuple(values), model_name=self.embedding_model)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise BadResponseError("response lacks data[0].embedding") from exc


def hash_embedding(text: str, dim: int = MOCK_EMBEDDING_DIM) -> np.ndarray:
    """Unit vector from a PRNG seeded with the SHA-256 of the UTF-8 bytes."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


Responder = Callable[[ChatRequest], "str | None"]


class MockBackend(Backend):
    """Deterministic scripted backend.

    Script keys are ``"role/round"``, optionally scoped by case
    (``"case_id/role/round"``), with ``*`` as a round wildcard. A ``+kb``
    suffix selects the reply used when a retrieved-experience block is in the
    prompt, and ``#n`` selects the reply to the n-th re-ask. Unmatched
    requests go to ``responder`` and then to ``fallback``.

    Every request is appended to ``calls``.
    """

    def __init__(
        self,
        script: Mapping[str, str] | None = None,
        fallback: str | None = None,
        responder: Responder | None = None,
        embedding_dim: int = MOCK_EMBEDDING_DIM,
        embeddings: Mapping[str, Sequence[float]] | None = None,
        max_concurrency: int = 64,
    ):
        super().__init__(max_concurrency=max_concurrency)
        self.script = dict(script or {})
        self.fallback = fallback
        self.responder = responder
        self.embedding_dim = embedding_dim
        self.embeddings = dict(embeddings or {})
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "MockBackend":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        fallback = data.pop("_fallback", None) if isinstance(data, dict) else None
        return cls(script=data, fallback=fallback, **kwargs)

    def candidate_keys(self, request: ChatRequest) -> list[str]:
        tags = request.tags
        role = str(tags.get("role", ""))
        rnd = tags.get("round")
        case_id = tags.get("case_id")
        attempt = int(tags.get("attempt", 0))
        kb = bool(tags.get("kb", False))
        suffixes = []
        if kb and attempt:
            suffixes.append(f"+kb#{attempt}")
        if kb:
            suffixes.append("+kb")
        if attempt:
            suffixes.append(f"#{attempt}")
        suffixes.append("")
        rounds = [str(rnd), "*"] if rnd is not None else ["*"]
        scopes = [f"{case_id}/", ""] if case_id is not None else [""]
        return [f"{scope}{role}/{r}{suffix}" for scope in scopes for r in rounds for suffix in suffixes]

    def _chat(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls.append(request)
        for key in self.candidate_keys(request):
            if key in self.script:
                return self.script[key]
        if self.responder is not None:
            reply = self.responder(request)
            if reply is not None:
                return reply
        if self.fallback is not None:
            return self.fallback
        raise BadResponseError(f"mock script has no reply for {self.candidate_keys(request)[0]!r}")

    def _embed(self, text: str) -> EmbeddingVector:
        if text in self.embeddings:
            return EmbeddingVector(tuple(self.embeddings[text]), model_name="mock")
        return EmbeddingVector(tuple(hash_embedding(text, self.embedding_dim)), model_name="mock")
