"""Model-provider abstraction: every agent call goes through `complete`.

Two built-in providers: a deterministic scripted provider (tests, replay)
and a generic HTTP chat-completion adapter. Structured output is validated
locally; a malformed completion is a typed error, never a half-parsed value.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import httpx

DEFAULT_TIMEOUT_MS = 20_000
UNSCRIPTED_TEXT = "UNSCRIPTED"


class ProviderError(Exception):
    """Base for everything a provider call can raise."""


class ProviderTimeout(ProviderError):
    pass


class ProviderTransportError(ProviderError):
    pass


class MalformedStructuredOutput(ProviderError):
    """A completion arrived but did not parse against the requested schema."""


@dataclass(frozen=True)
class ModelRequest:
    system_instructions: str
    conversation: tuple[tuple[str, str], ...] = ()
    response_schema: str | None = None
    max_latency_hint_ms: int | None = None

    def __post_init__(self) -> None:
        if not self.system_instructions:
            raise ValueError("system_instructions must be non-empty")

    def full_text(self) -> str:
        """All request text, used by substring match rules and scope-isolation checks."""
        return "\n".join([self.system_instructions, *(t for _, t in self.conversation)])


@dataclass(frozen=True)
class ModelResponse:
    text: str
    structured: Mapping[str, Any] | None = None
    latency_ms: int = 0


class Provider(Protocol):
    def complete(self, request: ModelRequest) -> ModelResponse: ...


def _parse_structured(text: str) -> Mapping[str, Any]:
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedStructuredOutput(f"completion is not valid JSON: {exc}") from exc
    if not isinstance(parsed, dict):
        raise MalformedStructuredOutput("structured completion must be a JSON object")
    return parsed


@dataclass(frozen=True)
class ScriptedBehavior:
    """One scripted rule: a match predicate plus the canned response."""

    substring: str | None = None
    schema: str | None = None
    response_text: str = ""
    structured: Mapping[str, Any] | None = None
    delay_ms: int = 0
    failure_mode: str | None = None  # "timeout" | "malformed_output"

    def __post_init__(self) -> None:
        if self.delay_ms < 0:
            raise ValueError("delay_ms must be >= 0")
        if self.failure_mode not in (None, "timeout", "malformed_output"):
            raise ValueError(f"unknown failure_mode {self.failure_mode!r}")

    def matches(self, request: ModelRequest) -> bool:
        if self.substring is not None and self.substring not in request.full_text():
            return False
        if self.schema is not None and self.schema != request.response_schema:
            return False
        return self.substring is not None or self.schema is not None

    @staticmethod
    def from_dict(d: Mapping[str, Any]) -> "ScriptedBehavior":
        match = d.get("match", {})
        return ScriptedBehavior(
            substring=match.get("substring"),
            schema=match.get("schema"),
            response_text=d.get("response_text", ""),
            structured=d.get("structured"),
            delay_ms=int(d.get("delay_ms", 0)),
            failure_mode=d.get("failure_mode"),
        )

    def to_dict(self) -> dict[str, Any]:
        match: dict[str, Any] = {}
        if self.substring is not None:
            match["substring"] = self.substring
        if self.schema is not None:
            match["schema"] = self.schema
        d: dict[str, Any] = {"match": match, "response_text": self.response_text}
        if self.structured is not None:
            d["structured"] = dict(self.structured)
        if self.delay_ms:
            d["delay_ms"] = self.delay_ms
        if self.failure_mode:
            d["failure_mode"] = self.failure_mode
        return d


class ScriptedProvider:
    """Deterministic provider: behaviors evaluated in order, first match wins.

    No match yields the fixed text "UNSCRIPTED" so an unplanned call fails a
    test loudly instead of flaking. Matching state is read-only after load;
    concurrent calls are safe.
    """

    def __init__(self, behaviors: Sequence[ScriptedBehavior] = (), timeout_ms: int = DEFAULT_TIMEOUT_MS):
        self.behaviors = tuple(behaviors)
        self.timeout_ms = timeout_ms
        self._calls: list[ModelRequest] = []
        self._lock = threading.Lock()

    @property
    def calls(self) -> list[ModelRequest]:
        """Captured requests, in arrival order (for scope-isolation assertions)."""
        with self._lock:
            return list(self._calls)

    def calls_with_schema(self, schema: str) -> list[ModelRequest]:
        return [c for c in self.calls if c.response_schema == schema]

    def complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            self._calls.append(request)
        started = time.monotonic()
        behavior = next((b for b in self.behaviors if b.matches(request)), None)
        if behavior is None:
            return self._finish(request, UNSCRIPTED_TEXT, None, started)

        if behavior.failure_mode == "timeout":
            budget = min(behavior.delay_ms or self.timeout_ms, self.timeout_ms)
            time.sleep(budget / 1000.0)
            raise ProviderTimeout(f"scripted timeout after {budget} ms")

        if behavior.delay_ms:
            time.sleep(behavior.delay_ms / 1000.0)

        if behavior.failure_mode == "malformed_output":
            if request.response_schema is not None:
                raise MalformedStructuredOutput("scripted malformed structured output")
            return self._finish(request, behavior.response_text or "{not json", None, started)

        return self._finish(request, behavior.response_text, behavior.structured, started)

    def _finish(
        self,
        request: ModelRequest,
        text: str,
        structured: Mapping[str, Any] | None,
        started: float,
    ) -> ModelResponse:
        if request.response_schema is not None and structured is None:
            structured = _parse_structured(text)
        latency = int((time.monotonic() - started) * 1000)
        return ModelResponse(text=text, structured=structured, latency_ms=latency)


def load_script(path: str | Path, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ScriptedProvider:
    """Load a JSON array of scripted behaviors; parse errors carry the line number."""
    raw = Path(path).read_text()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, list):
        raise ValueError(f"{path}:1: script must be a JSON array of behaviors")
    behaviors = []
    for i, entry in enumerate(data):
        try:
            behaviors.append(ScriptedBehavior.from_dict(entry))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: behavior #{i}: {exc}") from exc
    return ScriptedProvider(behaviors, timeout_ms=timeout_ms)


class HttpChatProvider:
    """Generic chat-completion adapter; vendor identity is pure configuration.

    Config via env: PROVIDER_BASE_URL, PROVIDER_API_KEY, PROVIDER_MODEL.
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout_ms: int = DEFAULT_TIMEOUT_MS,
    ):
        self.base_url = (base_url or os.environ.get("PROVIDER_BASE_URL", "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("PROVIDER_API_KEY", "")
        self.model = model or os.environ.get("PROVIDER_MODEL", "default")
        self.timeout_ms = timeout_ms
        if not self.base_url:
            raise ValueError("HTTP provider needs a base URL (PROVIDER_BASE_URL)")

    def complete(self, request: ModelRequest) -> ModelResponse:
        role_map = {"student": "user", "tutor": "assistant"}
        messages = [{"role": "system", "content": request.system_instructions}]
        messages += [
            {"role": role_map.get(role, role), "content": text} for role, text in request.conversation
        ]
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        started = time.monotonic()
        try:
            resp = httpx.post(
                f"{self.base_url}/chat/completions",
                json={"model": self.model, "messages": messages},
                headers=headers,
                timeout=self.timeout_ms / 1000.0,
            )
            resp.raise_for_status()
            body = resp.json()
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(str(exc)) from exc
        except (httpx.HTTPError, json.JSONDecodeError) as exc:
            raise ProviderTransportError(str(exc)) from exc
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderTransportError(f"unexpected completion body shape: {exc}") from exc
        structured = _parse_structured(text) if request.response_schema is not None else None
        latency = int((time.monotonic() - started) * 1000)
        return ModelResponse(text=text, structured=structured, latency_ms=latency)
