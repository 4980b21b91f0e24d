"""Uniform access to model providers: live HTTP endpoints and replay fixtures.

Every call goes through `invoke`, which owns the retry policy and returns a
response or a typed failure instead of raising. Credentials are only ever
read from the environment via the variable named in the provider config.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

import requests

from .core import ExtractionResult, Failure, SpecSchema, validate_spec_document

logger = logging.getLogger(__name__)

__all__ = [
    "KIND_HTTP",
    "KIND_REPLAY",
    "PROVIDER_KINDS",
    "ROLE_TAGS",
    "FAIL_TIMEOUT",
    "FAIL_TRANSPORT",
    "FAIL_AUTH",
    "FAIL_RATE_LIMITED",
    "FAIL_EXHAUSTED",
    "ProviderConfig",
    "PromptRequest",
    "ProviderResponse",
    "ProviderFailure",
    "ReplayBackend",
    "HttpBackend",
    "fixture_key",
    "fixture_path",
    "invoke",
    "extract_first_json_object",
    "parse_structured_output",
    "failure_to_result",
]

KIND_HTTP = "http_openai_compatible"
KIND_REPLAY = "replay_fixture"
PROVIDER_KINDS = frozenset({KIND_HTTP, KIND_REPLAY})

ROLE_EXTRACTION = "extraction"
ROLE_RESEARCH = "research"
ROLE_SYNTHESIS = "synthesis"
ROLE_TAGS = frozenset({ROLE_EXTRACTION, ROLE_RESEARCH, ROLE_SYNTHESIS})

FAIL_TIMEOUT = "timeout"
FAIL_TRANSPORT = "transport"
FAIL_AUTH = "auth"
FAIL_RATE_LIMITED = "rate_limited"
FAIL_EXHAUSTED = "exhausted_retries"

BACKOFF_BASE_S = 0.5
BACKOFF_FACTOR = 2.0


@dataclass(frozen=True)
class ProviderConfig:
    """One model endpoint in the roster.

    `credentials_env` names an environment variable; the key itself never
    appears in configuration. Replay providers read canned responses from
    `fixtures_dir` instead of the network.
    """

    model_id: str
    kind: str
    endpoint: str | None = None
    credentials_env: str | None = None
    timeout: float = 60.0
    max_retries: int = 2
    role_tags: frozenset[str] = frozenset({ROLE_EXTRACTION})
    fixtures_dir: str | None = None

    def __post_init__(self) -> None:
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if self.kind not in PROVIDER_KINDS:
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        unknown = set(self.role_tags) - ROLE_TAGS
        if unknown:
            raise ValueError(f"unknown role tags: {sorted(unknown)}")
        if not self.role_tags:
            raise ValueError("a provider needs at least one role tag")
        if self.kind == KIND_HTTP and not self.endpoint:
            raise ValueError(f"provider {self.model_id!r} is http but has no endpoint")
        if self.kind == KIND_REPLAY and not self.fixtures_dir:
            raise ValueError(f"provider {self.model_id!r} is replay but has no fixtures_dir")
        object.__setattr__(self, "role_tags", frozenset(self.role_tags))


@dataclass(frozen=True)
class PromptRequest:
    system_text: str
    user_text: str
    response_schema: SpecSchema | None = None
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ProviderResponse:
    model_id: str
    raw_text: str
    latency: float
    attempt_count: int


@dataclass(frozen=True)
class ProviderFailure:
    model_id: str
    kind: str
    detail: str
    attempt_count: int


class BackendError(Exception):
    """Base for backend call failures; `retryable` drives the retry loop."""

    retryable = False
    failure_kind = FAIL_TRANSPORT


class TransportError(BackendError):
    retryable = True
    failure_kind = FAIL_TRANSPORT


class RateLimitedError(BackendError):
    retryable = True
    failure_kind = FAIL_RATE_LIMITED


class AuthError(BackendError):
    failure_kind = FAIL_AUTH


class BackendTimeout(BackendError):
    failure_kind = FAIL_TIMEOUT


class FixtureMissing(BackendError):
    # A missing fixture will stay missing; retrying would only waste time.
    failure_kind = FAIL_TRANSPORT


class Backend(Protocol):
    def complete(self, request: PromptRequest) -> str: ...


def fixture_key(model_id: str, user_text: str) -> str:
    """Stable fixture filename stem for a (model, prompt) pair."""
    digest = hashlib.sha256()
    digest.update(model_id.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(user_text.encode("utf-8"))
    return digest.hexdigest()[:16]


def fixture_path(fixtures_dir: str | Path, model_id: str, user_text: str) -> Path:
    return Path(fixtures_dir) / model_id / f"{fixture_key(model_id, user_text)}.txt"


@dataclass(frozen=True)
class ReplayBackend:
    """Serves canned completions from per-model fixture files."""

    config: ProviderConfig

    def complete(self, request: PromptRequest) -> str:
        assert self.config.fixtures_dir is not None
        path = fixture_path(self.config.fixtures_dir, self.config.model_id, request.user_text)
        if not path.is_file():
            raise FixtureMissing(f"no fixture at {path}")
        return path.read_text(encoding="utf-8")


class HttpBackend:
    """Calls a chat-completions endpoint and returns the first choice's text."""

    def __init__(
        self,
        config: ProviderConfig,
        env: Mapping[str, str] | None = None,
        session: Any | None = None,
    ) -> None:
        self._config = config
        self._env = os.environ if env is None else env
        self._session = session if session is not None else requests

    def complete(self, request: PromptRequest) -> str:
        config = self._config
        headers = {"Content-Type": "application/json"}
        if config.credentials_env:
            key = self._env.get(config.credentials_env)
            if not key:
                raise AuthError(f"environment variable {config.credentials_env!r} is not set")
            headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": config.model_id,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
        }
        try:
            response = self._session.post(
                config.endpoint, json=payload, headers=headers, timeout=config.timeout
            )
        except requests.Timeout as exc:
            raise BackendTimeout(str(exc)) from exc
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc

        status = response.status_code
        if status in (401, 403):
            raise AuthError(f"HTTP {status}")
        if status == 429:
            raise RateLimitedError("HTTP 429")
        if status != 200:
            raise TransportError(f"HTTP {status}")
        try:
            body = response.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion body: {exc}") from exc
        if not isinstance(content, str):
            raise TransportError("completion content is not a string")
        return content


def resolve_backend(config: ProviderConfig, env: Mapping[str, str] | None = None) -> Backend:
    if config.kind == KIND_REPLAY:
        return ReplayBackend(config)
    return HttpBackend(config, env=env)


def invoke(
    config: ProviderConfig,
    request: PromptRequest,
    *,
    backend: Backend | None = None,
    sleep: Callable[[float], None] = time.sleep,
    env: Mapping[str, str] | None = None,
) -> ProviderResponse | ProviderFailure:
    """Call one provider with retries; never raises for provider trouble.

    Transport and rate-limit errors retry with exponential backoff (0.5s
    base, doubling) up to max_retries extra attempts; timeouts and auth
    problems fail immediately. A retry budget that runs out reports
    "exhausted_retries" with the last underlying error in the detail.
    """
    if backend is None:
        backend = resolve_backend(config, env)
    started = time.perf_counter()
    delay = BACKOFF_BASE_S
    attempts = 0
    while True:
        attempts += 1
        try:
            text = backend.complete(request)
        except BackendError as exc:
            if not exc.retryable:
                return ProviderFailure(config.model_id, exc.failure_kind, str(exc), attempts)
            if attempts > config.max_retries:
                return ProviderFailure(
                    config.model_id,
                    FAIL_EXHAUSTED,
                    f"{exc.failure_kind}: {exc}",
                    attempts,
                )
            logger.debug("retrying %s after %s (attempt %d)", config.model_id, exc, attempts)
            sleep(delay)
            delay *= BACKOFF_FACTOR
        except Exception as exc:  # noqa: BLE001 - a broken backend must not sink the phase
            return ProviderFailure(
                config.model_id, FAIL_TRANSPORT, f"unexpected backend error: {exc}", attempts
            )
        else:
            latency = time.perf_counter() - started
            return ProviderResponse(config.model_id, text, latency, attempts)


def extract_first_json_object(text: str) -> Any | None:
    """Pull the first decodable JSON object out of free-form model text."""
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            value, _end = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            start = text.find("{", start + 1)
            continue
        if isinstance(value, dict):
            return value
        start = text.find("{", start + 1)
    return None


def parse_structured_output(
    response: ProviderResponse, schema: SpecSchema, phase: str
) -> ExtractionResult:
    """Turn raw model text into a validated extraction result.

    Output with no decodable JSON object becomes a parse_error failure; the
    raw text is preserved either way for audit.
    """
    document = extract_first_json_object(response.raw_text)
    if document is None:
        return ExtractionResult(
            model_id=response.model_id,
            phase=phase,
            claims=(),
            schema_valid=False,
            raw_output=response.raw_text,
            failure=Failure("parse_error", "no JSON object found in model output"),
        )
    return validate_spec_document(
        document, schema, response.model_id, phase, raw_output=response.raw_text
    )


def failure_to_result(failure: ProviderFailure, phase: str) -> ExtractionResult:
    """Record a provider failure as an empty, invalid extraction result."""
    return ExtractionResult(
        model_id=failure.model_id,
        phase=phase,
        claims=(),
        schema_valid=False,
        raw_output="",
        failure=Failure(failure.kind, failure.detail),
    )
