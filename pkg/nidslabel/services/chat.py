"""
Chat-completion clients.

All clients take a ChatRequest (messages + temperature) and return the reply
text. Three implementations:

    HttpChatClient       OpenAI-compatible chat-completion endpoint over httpx
    ScriptedChatClient   replays a JSONL transcript; fully offline
    RecordingChatClient  wraps another client and writes a replayable transcript

Transcript format (JSONL, one object per request):
    {"ordinal": 1, "expect_fingerprint": "<sha256 hex>"?, "reply": "...", "fault": "transport"?}
"""

import hashlib
import json
import threading
import time
from collections import deque
from collections.abc import Callable
from pathlib import Path
from typing import Literal, Protocol

import httpx
from pydantic import BaseModel, ConfigDict, Field, SecretStr, ValidationError

from nidslabel.core.errors import (
    ConfigError,
    ProviderError,
    TranscriptError,
    TransportError,
    format_validation_error,
)
from nidslabel.core.logging import get_logger

logger = get_logger(__name__)

ProviderName = Literal["openai", "anthropic", "gemini", "custom"]

# OpenAI-compatible chat-completion endpoints and default models
PROVIDER_PRESETS: dict[str, tuple[str, str]] = {
    "openai": ("https://api.openai.com/v1/chat/completions", "gpt-4o"),
    "anthropic": ("https://api.anthropic.com/v1/chat/completions", "claude-3-5-sonnet-latest"),
    "gemini": (
        "https://generativelanguage.googleapis.com/v1beta/openai/chat/completions",
        "gemini-1.5-pro",
    ),
}


class ChatMessage(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: Literal["system", "user", "assistant"]
    content: str


class ChatRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    messages: tuple[ChatMessage, ...]
    temperature: float = Field(default=0.0, ge=0.0, le=2.0)

    @classmethod
    def user(cls, content: str, temperature: float = 0.0) -> "ChatRequest":
        return cls(messages=(ChatMessage(role="user", content=content),), temperature=temperature)

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON form of messages and temperature."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ChatResponse(BaseModel):
    text: str


class ChatClient(Protocol):
    """Anything that answers chat requests. `sequential` clients must not be called concurrently."""

    sequential: bool

    def send(self, request: ChatRequest) -> ChatResponse: ...

    def close(self) -> None: ...


class ProviderSettings(BaseModel):
    """Provider adapter settings; the API key itself comes from LLM_API_KEY."""

    model_config = ConfigDict(extra="forbid")

    provider: ProviderName = "openai"
    endpoint: str | None = None
    model: str | None = None
    timeout_s: float = Field(default=60.0, gt=0)
    max_in_flight: int = Field(default=4, ge=1)
    requests_per_minute: int = Field(default=60, ge=1)
    max_retries: int = Field(default=3, ge=0)
    backoff_base_s: float = Field(default=1.0, ge=0)
    backoff_max_s: float = Field(default=30.0, ge=0)

    def resolved_endpoint(self) -> str:
        if self.endpoint:
            return self.endpoint
        if self.provider in PROVIDER_PRESETS:
            return PROVIDER_PRESETS[self.provider][0]
        raise ConfigError("provider 'custom' requires an endpoint")

    def resolved_model(self) -> str:
        if self.model:
            return self.model
        if self.provider in PROVIDER_PRESETS:
            return PROVIDER_PRESETS[self.provider][1]
        raise ConfigError("provider 'custom' requires a model name")


# ── HTTP adapter ─────────────────────────────────────────────────────────────


class RateLimiter:
    """Sliding one-minute window limiter shared by all threads of one client."""

    def __init__(
        self,
        per_minute: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.per_minute = per_minute
        self._clock = clock
        self._sleep = sleep
        self._sent: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._sent and now - self._sent[0] >= 60.0:
                    self._sent.popleft()
                if len(self._sent) < self.per_minute:
                    self._sent.append(now)
                    return
                wait = 60.0 - (now - self._sent[0])
            self._sleep(wait)


class HttpChatClient:
    """
    Chat-completion adapter for OpenAI-compatible endpoints.

    Bounds concurrent requests with a semaphore and applies the provider's
    requests-per-minute limit. Rate limiting (429), server errors (5xx),
    timeouts and connection failures raise TransportError (retryable);
    any other error status or an unusable body raises ProviderError.
    """

    sequential = False

    def __init__(
        self,
        settings: ProviderSettings,
        api_key: SecretStr | None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if api_key is None or not api_key.get_secret_value():
            raise ConfigError("LLM_API_KEY is required for a live provider")
        self.settings = settings
        self.endpoint = settings.resolved_endpoint()
        self.model = settings.resolved_model()
        self._slots = threading.BoundedSemaphore(settings.max_in_flight)
        self._limiter = RateLimiter(settings.requests_per_minute, sleep=sleep)
        self._client = httpx.Client(
            timeout=settings.timeout_s,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key.get_secret_value()}"},
        )

    def close(self) -> None:
        self._client.close()

    def send(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.model,
            "messages": [m.model_dump() for m in request.messages],
            "temperature": request.temperature,
        }
        with self._slots:
            self._limiter.acquire()
            try:
                response = self._client.post(self.endpoint, json=payload)
            except httpx.HTTPError as exc:
                raise TransportError(f"request to {self.settings.provider} failed: {exc}") from exc

        if response.status_code == 429 or response.status_code >= 500:
            raise TransportError(f"{self.settings.provider} returned HTTP {response.status_code}")
        if response.status_code >= 400:
            raise ProviderError(
                f"{self.settings.provider} rejected the request: HTTP {response.status_code}"
            )
        try:
            text = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed response from {self.settings.provider}") from exc
        if not isinstance(text, str):
            raise ProviderError(f"non-text reply from {self.settings.provider}")
        return ChatResponse(text=text)


# ── Transcripts ──────────────────────────────────────────────────────────────


class TranscriptEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ordinal: int = Field(ge=1)
    expect_fingerprint: str | None = None
    reply: str = ""
    fault: Literal["transport"] | None = None


def load_transcript(path: str | Path) -> list[TranscriptEntry]:
    """
    Read a JSONL transcript. Ordinals must be exactly 1..n.

    Raises:
        TranscriptError: Malformed line or non-contiguous ordinals
    """
    entries: list[TranscriptEntry] = []
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entries.append(TranscriptEntry.model_validate_json(line))
        except ValidationError as exc:
            raise TranscriptError(f"{path}:{number}: {format_validation_error(exc)}") from exc

    entries.sort(key=lambda e: e.ordinal)
    ordinals = [e.ordinal for e in entries]
    if ordinals != list(range(1, len(entries) + 1)):
        raise TranscriptError(f"{path}: ordinals must run 1..{len(entries)} without gaps")
    return entries


class ScriptedChatClient:
    """
    Replays a transcript: the n-th request gets entry n's reply.

    In strict mode an entry's expect_fingerprint must equal the request's
    fingerprint. Requests beyond the transcript raise TranscriptError.
    """

    sequential = True

    def __init__(self, entries: list[TranscriptEntry], strict: bool = True) -> None:
        self._entries = entries
        self._strict = strict
        self._sent = 0
        self._lock = threading.Lock()

    @property
    def requests_sent(self) -> int:
        return self._sent

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self._sent += 1
            ordinal = self._sent
        if ordinal > len(self._entries):
            raise TranscriptError(
                f"transcript exhausted: request {ordinal} but only {len(self._entries)} entries"
            )

        entry = self._entries[ordinal - 1]
        if (
            self._strict
            and entry.expect_fingerprint is not None
            and entry.expect_fingerprint != request.fingerprint()
        ):
            raise TranscriptError(f"prompt fingerprint mismatch at ordinal {ordinal}")
        if entry.fault == "transport":
            raise TransportError(f"scripted transport fault at ordinal {ordinal}")
        return ChatResponse(text=entry.reply)

    def close(self) -> None:
        pass


def scripted_client(transcript: str | Path, strict: bool = True) -> ScriptedChatClient:
    return ScriptedChatClient(load_transcript(transcript), strict=strict)


class RecordingChatClient:
    """Passes requests to another client and appends each exchange to a transcript file."""

    def __init__(self, inner: ChatClient, path: str | Path) -> None:
        self.inner = inner
        self.sequential = True
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")
        self._ordinal = 0
        self._lock = threading.Lock()

    def _append(self, entry: TranscriptEntry) -> None:
        line = json.dumps(entry.model_dump(exclude_none=True), sort_keys=True, ensure_ascii=False)
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(line + "\n")

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self._ordinal += 1
            entry = TranscriptEntry(ordinal=self._ordinal, expect_fingerprint=request.fingerprint())
            try:
                response = self.inner.send(request)
            except TransportError:
                self._append(entry.model_copy(update={"fault": "transport"}))
                raise
            self._append(entry.model_copy(update={"reply": response.text}))
            return response

    def close(self) -> None:
        self.inner.close()


def build_client(
    settings: ProviderSettings,
    api_key: SecretStr | None,
    mock: str | Path | None = None,
    record: str | Path | None = None,
    strict: bool = True,
) -> ChatClient:
    """Scripted client when a transcript is given, otherwise the HTTP adapter."""
    if mock is not None:
        logger.info("Using scripted chat client from %s", mock)
        return scripted_client(mock, strict=strict)

    client: ChatClient = HttpChatClient(settings, api_key)
    logger.info("Using %s provider at %s", settings.provider, settings.resolved_endpoint())
    if record is not None:
        return RecordingChatClient(client, record)
    return client
