"""Completion backends with per-position candidate-token log-probabilities.

Three realizations of one contract: an HTTP client for OpenAI-compatible
completion endpoints, a deterministic replay backend serving pre-recorded
responses keyed by request content, and a cache wrapper that makes warm
reruns free. Responses are immutable; the cache serializes writes and
allows concurrent reads.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence, runtime_checkable

import httpx

from .exceptions import CapabilityError, DataError, ProtocolError, TransportError

API_KEY_ENV_VAR = "DIALOSCOPE_API_KEY"
DEFAULT_TEMPERATURE = 0.7
DEFAULT_TOP_LOGPROBS = 5
MAX_TOP_LOGPROBS = 20

_RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    model: str
    max_new_tokens: int
    temperature: float = DEFAULT_TEMPERATURE
    top_logprobs: int = DEFAULT_TOP_LOGPROBS

    def __post_init__(self) -> None:
        if not self.model:
            raise DataError("request model must be non-empty")
        if self.max_new_tokens < 1:
            raise DataError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.temperature < 0:
            raise DataError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 <= self.top_logprobs <= MAX_TOP_LOGPROBS:
            raise DataError(
                f"top_logprobs must be in 0..{MAX_TOP_LOGPROBS}, got {self.top_logprobs}"
            )


@dataclass(frozen=True)
class TokenCandidates:
    """Candidate tokens and log-probabilities at one generated position."""

    position: int
    candidates: dict[str, float]

    def __post_init__(self) -> None:
        if self.position < 0:
            raise DataError(f"position must be >= 0, got {self.position}")
        if not self.candidates:
            raise DataError(f"position {self.position}: empty candidate map")
        total = 0.0
        for token, logprob in self.candidates.items():
            if not math.isfinite(logprob) or logprob > 0.0:
                raise DataError(
                    f"position {self.position}: token {token!r} logprob {logprob} "
                    "must be finite and <= 0"
                )
            total += math.exp(logprob)
        if total > 1.0 + 1e-6:
            raise DataError(
                f"position {self.position}: candidate probabilities sum to {total} > 1"
            )


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    token_candidates: tuple[TokenCandidates, ...]
    backend_id: str
    cached: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "token_candidates", tuple(self.token_candidates))


@runtime_checkable
class CompletionBackend(Protocol):
    """Anything that can answer a CompletionRequest."""

    backend_id: str

    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


def request_key_fields(request: CompletionRequest) -> dict:
    """The request fields that identify a response, for fixtures and caching."""
    return {
        "model": request.model,
        "prompt": request.prompt,
        "max_new_tokens": request.max_new_tokens,
        "temperature": request.temperature,
        "top_logprobs": request.top_logprobs,
    }


def _digest(payload: Mapping) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    ).hexdigest()


@dataclass(frozen=True)
class CacheKey:
    digest: str

    @classmethod
    def from_request(cls, backend_id: str, request: CompletionRequest) -> "CacheKey":
        fields = {"backend_id": backend_id, **request_key_fields(request)}
        return cls(digest=_digest(fields))


def response_to_dict(response: CompletionResponse) -> dict:
    # cached is deliberately omitted: warm and cold runs must serialize alike
    return {
        "text": response.text,
        "top_logprobs": [dict(tc.candidates) for tc in response.token_candidates],
        "backend_id": response.backend_id,
    }


def response_from_dict(payload: Mapping, cached: bool = False) -> CompletionResponse:
    try:
        text = payload["text"]
        top_logprobs = payload.get("top_logprobs") or []
        backend_id = payload.get("backend_id", "")
        candidates = tuple(
            TokenCandidates(position=i, candidates=dict(entry))
            for i, entry in enumerate(top_logprobs)
        )
        return CompletionResponse(
            text=text, token_candidates=candidates, backend_id=backend_id, cached=cached
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise DataError(f"malformed response payload: {exc}") from exc


class HttpBackend:
    """Client for the OpenAI-compatible completions subset.

    POSTs {base_url}/v1/completions with {"model", "prompt", "max_tokens",
    "temperature", "logprobs"} and reads choices[0].text plus
    choices[0].logprobs.top_logprobs. Bearer auth comes from the
    DIALOSCOPE_API_KEY environment variable unless a key is given.
    Transient failures (connect/timeout, 429, 5xx) are retried with
    exponential backoff.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_seconds: float = 0.5,
    ):
        self.base_url = base_url.rstrip("/")
        self.backend_id = f"http:{self.base_url}"
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV_VAR)
        self._max_retries = max_retries
        self._backoff_seconds = backoff_seconds
        self._client = httpx.Client(timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def _post(self, payload: dict) -> httpx.Response:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        last_exc: Exception | None = None
        last_response: httpx.Response | None = None
        for attempt in range(self._max_retries + 1):
            if attempt > 0:
                time.sleep(self._backoff_seconds * 2 ** (attempt - 1))
            try:
                response = self._client.post(
                    f"{self.base_url}/v1/completions", json=payload, headers=headers
                )
            except httpx.HTTPError as exc:
                last_exc = exc
                continue
            if response.status_code in _RETRYABLE_STATUS:
                last_response = response
                continue
            return response
        if last_response is not None:
            raise ProtocolError(
                f"completion endpoint kept failing with HTTP {last_response.status_code}: "
                f"{last_response.text[:200]}",
                status_code=last_response.status_code,
                body=last_response.text[:500],
            )
        raise TransportError(
            f"completion request failed after {self._max_retries + 1} attempts: {last_exc}"
        )

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        payload = {
            "model": request.model,
            "prompt": request.prompt,
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
            "logprobs": request.top_logprobs,
        }
        response = self._post(payload)
        if response.status_code < 200 or response.status_code >= 300:
            raise ProtocolError(
                f"completion endpoint returned HTTP {response.status_code}: "
                f"{response.text[:200]}",
                status_code=response.status_code,
                body=response.text[:500],
            )
        try:
            data = response.json()
            choice = data["choices"][0]
            text = choice["text"]
        except (ValueError, LookupError, TypeError) as exc:
            raise ProtocolError(f"malformed completion response: {exc}") from exc
        candidates: tuple[TokenCandidates, ...] = ()
        if request.top_logprobs > 0:
            logprobs = (choice.get("logprobs") or {}).get("top_logprobs")
            if not logprobs:
                raise CapabilityError(
                    f"backend {self.backend_id} returned no top_logprobs although "
                    f"{request.top_logprobs} were requested"
                )
            try:
                candidates = tuple(
                    TokenCandidates(position=i, candidates=dict(entry))
                    for i, entry in enumerate(logprobs)
                )
            except (TypeError, AttributeError) as exc:
                raise ProtocolError(f"malformed top_logprobs payload: {exc}") from exc
        return CompletionResponse(
            text=text, token_candidates=candidates, backend_id=self.backend_id
        )


class ReplayBackend:
    """Deterministic backend serving pre-recorded responses.

    The fixture is JSONL of {"key_fields": {...}, "response": {...}}, keyed
    by the request_key_fields tuple. Unknown requests raise CapabilityError
    naming the missing key.
    """

    backend_id = "replay"

    def __init__(self, fixture_path: str | Path):
        path = Path(fixture_path)
        if not path.exists():
            raise DataError(f"replay fixture not found: {path}")
        self._responses: dict[str, dict] = {}
        with path.open(encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    key_fields = record["key_fields"]
                    response = record["response"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"replay fixture line {line_no}: {exc}") from exc
                self._responses[_digest(key_fields)] = response

    def __len__(self) -> int:
        return len(self._responses)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        fields = request_key_fields(request)
        digest = _digest(fields)
        if digest not in self._responses:
            raise CapabilityError(
                f"replay fixture has no entry for key {digest[:16]}... "
                f"(prompt starts {request.prompt[:60]!r})"
            )
        payload = dict(self._responses[digest])
        payload.setdefault("backend_id", self.backend_id)
        return response_from_dict(payload)


def fixture_entry(
    request: CompletionRequest,
    text: str,
    top_logprobs: Sequence[Mapping[str, float]] = (),
) -> dict:
    """One replay-fixture record answering `request` with the given output."""
    return {
        "key_fields": request_key_fields(request),
        "response": {
            "text": text,
            "top_logprobs": [dict(entry) for entry in top_logprobs],
        },
    }


def write_fixture(path: str | Path, entries: Iterable[Mapping]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for entry in entries:
            handle.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")


class ResponseCache:
    """Append-only JSONL response store keyed by request digest.

    Records are {"key": digest, "response": {...}}; the last record for a
    key wins. Lookups are lock-free against an in-memory map; writes are
    serialized.
    """

    def __init__(self, path: str | Path):
        self._path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}
        if self._path.exists():
            with self._path.open(encoding="utf-8") as handle:
                for line_no, line in enumerate(handle, start=1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                        key = record["key"]
                        response = record["response"]
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise DataError(
                            f"corrupt cache record at {self._path}:{line_no}: {exc}"
                        ) from exc
                    self._entries[key] = response

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, key: CacheKey) -> CompletionResponse | None:
        payload = self._entries.get(key.digest)
        if payload is None:
            return None
        return response_from_dict(payload, cached=True)

    def put(self, key: CacheKey, response: CompletionResponse) -> None:
        payload = response_to_dict(response)
        record = json.dumps(
            {"key": key.digest, "response": payload}, ensure_ascii=False, sort_keys=True
        )
        with self._lock:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            with self._path.open("a", encoding="utf-8", newline="\n") as handle:
                handle.write(record + "\n")
            self._entries[key.digest] = payload


class CachedBackend:
    """Cache wrapper around any backend; concurrent completes are safe."""

    def __init__(self, inner: CompletionBackend, cache: ResponseCache):
        self._inner = inner
        self._cache = cache
        self.backend_id = inner.backend_id

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        key = CacheKey.from_request(self.backend_id, request)
        hit = self._cache.lookup(key)
        if hit is not None:
            return hit
        response = self._inner.complete(request)
        self._cache.put(key, response)
        return response
