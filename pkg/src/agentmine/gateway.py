"""Uniform interface to text-generation backends.

Two backends implement the same two-call surface (``generate`` and
``generate_with_tools``): a deterministic scripted :class:`MockBackend` for
tests and offline runs, and a generic :class:`HttpBackend` speaking a
chat-completion-style JSON protocol to a single configurable endpoint.

Contract notes that callers rely on:

* When generation halts on a stop sequence, ``Turn.text`` INCLUDES the stop
  sequence, so downstream tag parsing always sees a well-formed closing tag.
  Providers that strip it get it re-appended by the HTTP adapter.
* Context overflow and provider faults are raised as exceptions
  (:class:`ContextOverflowError`, :class:`ProviderError`), never encoded in a
  Turn; callers map them to :class:`FailureKind` values.
* Cache markers on messages are honored where supported and silently ignored
  otherwise.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

import yaml

logger = logging.getLogger(__name__)

#: Environment variables read by the HTTP backend.
ENDPOINT_ENV = "AGENTMINE_ENDPOINT"
API_KEY_ENV = "AGENTMINE_API_KEY"


def estimate_tokens(text: str) -> int:
    """Characters/4 heuristic. Used for cache-marker placement and the mock
    backend's accounting, never for billing real runs (billing uses
    provider-reported usage)."""
    return math.ceil(len(text) / 4)


@dataclass(frozen=True)
class Message:
    """One ordered prompt part. ``cache=True`` marks a cache point covering
    the prefix up to and including this message."""

    role: str  # "system" | "user" | "assistant"
    content: str
    cache: bool = False


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 1.0
    max_output_tokens: int = 4096
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0
    cache_read_tokens: int = 0
    cache_write_tokens: int = 0

    def __post_init__(self) -> None:
        for name in ("input_tokens", "output_tokens", "cache_read_tokens", "cache_write_tokens"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(
            input_tokens=self.input_tokens + other.input_tokens,
            output_tokens=self.output_tokens + other.output_tokens,
            cache_read_tokens=self.cache_read_tokens + other.cache_read_tokens,
            cache_write_tokens=self.cache_write_tokens + other.cache_write_tokens,
        )

    def to_dict(self) -> dict[str, int]:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "cache_read_tokens": self.cache_read_tokens,
            "cache_write_tokens": self.cache_write_tokens,
        }

    @classmethod
    def from_dict(cls, d: dict[str, int]) -> "Usage":
        return cls(**{k: int(d.get(k, 0)) for k in (
            "input_tokens", "output_tokens", "cache_read_tokens", "cache_write_tokens")})


class StopReason(str, Enum):
    STOP_SEQUENCE = "stop_sequence"
    END = "end"
    TOOL_CALL = "tool_call"
    LENGTH = "length"


class FailureKind(str, Enum):
    CONTEXT_OVERFLOW = "context_overflow"
    INVALID_CATEGORY = "invalid_category"
    STEP_LIMIT = "step_limit"
    PROVIDER_ERROR = "provider_error"

    @property
    def is_fatal(self) -> bool:
        """Fatal per the error taxonomy: the experiment itself is invalid.
        step_limit and provider_error also preclude a prediction but are
        reported in their own columns."""
        return self in (FailureKind.CONTEXT_OVERFLOW, FailureKind.INVALID_CATEGORY)


@dataclass(frozen=True)
class Turn:
    """One backend response. At most one native tool call per turn."""

    text: str
    usage: Usage
    stop_reason: StopReason
    native_tool_call: tuple[str, dict[str, Any]] | None = None

    def __post_init__(self) -> None:
        has_call = self.native_tool_call is not None
        if has_call != (self.stop_reason is StopReason.TOOL_CALL):
            raise ValueError("native_tool_call present iff stop_reason is tool_call")


class GatewayError(Exception):
    """Base class for backend failures."""

    kind = FailureKind.PROVIDER_ERROR


class ContextOverflowError(GatewayError):
    kind = FailureKind.CONTEXT_OVERFLOW


class ProviderError(GatewayError):
    kind = FailureKind.PROVIDER_ERROR


#: The single tool the agent approaches declare.
RUN_BASH_TOOL: dict[str, Any] = {
    "name": "run-bash",
    "description": "Run one bash command inside the sandboxed repository workspace.",
    "parameters": {
        "type": "object",
        "properties": {"command": {"type": "string"}},
        "required": ["command"],
    },
}


def _check_tool_schema(tool_schema: Sequence[dict[str, Any]]) -> None:
    if len(tool_schema) != 1 or tool_schema[0].get("name") != "run-bash":
        raise ValueError("tool_schema must declare exactly one tool: run-bash(command)")


_OVERFLOW_PATTERNS = (
    "too long",
    "too large",
    "context length",
    "context_length",
    "context window",
    "maximum context",
    "prompt is too",
)


def map_provider_error(status: int | None, body: str = "") -> FailureKind:
    """Deterministic classification of a raw provider error response.

    Context-window complaints map to context_overflow; everything else
    (rate limits, 5xx, timeouts, unknown codes) is a retryable provider_error.
    """
    lowered = body.lower()
    if status is not None and 400 <= status < 500 and status != 429:
        if any(p in lowered for p in _OVERFLOW_PATTERNS):
            return FailureKind.CONTEXT_OVERFLOW
    if any(p in lowered for p in _OVERFLOW_PATTERNS):
        return FailureKind.CONTEXT_OVERFLOW
    return FailureKind.PROVIDER_ERROR


# ---------------------------------------------------------------------------
# Scripted mock backend


@dataclass(frozen=True)
class _Reply:
    text: str = ""
    tool: str | None = None
    error: str | None = None


def _normalize_reply(raw: Any, where: str) -> _Reply:
    if isinstance(raw, str):
        return _Reply(text=raw)
    if isinstance(raw, dict):
        error = raw.get("error")
        if error is not None:
            if error not in ("context_overflow", "provider_error"):
                raise ValueError(f"{where}: unknown scripted error {error!r}")
            return _Reply(error=error)
        tool = raw.get("tool")
        tools = raw.get("tools")
        if tools is not None:
            if not isinstance(tools, list) or not tools:
                raise ValueError(f"{where}: 'tools' must be a non-empty list")
            if len(tools) > 1:
                logger.warning("%s: script emits %d tool calls in one turn; "
                               "surfacing only the first (limit is one per step)",
                               where, len(tools))
            tool = tools[0]
        return _Reply(text=str(raw.get("text", "")), tool=tool)
    raise ValueError(f"{where}: reply must be a string or mapping, got {type(raw).__name__}")


class MockBackend:
    """Deterministic scripted backend.

    ``script`` maps turn index to reply; the turn index is derived from the
    message list itself (the number of assistant messages), so identical
    inputs always produce identical Turns. A reply is a plain string, or a
    mapping with ``text``/``tool``/``tools``/``error`` keys.

    Cache accounting simulates a well-behaved prefix cache as a pure function
    of the request: with markers at cumulative estimated-token positions
    t1 < ... < tk, the response reports cache_read = t(k-1) (the prefix
    written by the previous call), cache_write = tk - t(k-1), and fresh
    input = total - tk.
    """

    def __init__(self, script: Sequence[Any], context_window: int = 200_000,
                 loop: bool = False) -> None:
        self._script = [_normalize_reply(r, f"script[{i}]") for i, r in enumerate(script)]
        if not self._script:
            raise ValueError("mock script must contain at least one reply")
        self.context_window = context_window
        self.loop = loop

    # -- internals ----------------------------------------------------------

    def _reply_for(self, messages: Sequence[Message]) -> _Reply:
        index = sum(1 for m in messages if m.role == "assistant")
        if index >= len(self._script):
            if self.loop:
                index %= len(self._script)
            else:
                raise ProviderError(f"mock script exhausted at turn {index}")
        return self._script[index]

    def _input_usage(self, messages: Sequence[Message]) -> tuple[int, int, int]:
        sizes = [estimate_tokens(m.content) for m in messages]
        total = sum(sizes)
        if total > self.context_window:
            raise ContextOverflowError(
                f"prompt of ~{total} tokens exceeds mock context window {self.context_window}")
        marks = [sum(sizes[: i + 1]) for i, m in enumerate(messages) if m.cache]
        if not marks:
            return total, 0, 0
        read = marks[-2] if len(marks) > 1 else 0
        write = marks[-1] - read
        return total - marks[-1], read, write

    def _finish(self, reply: _Reply, messages: Sequence[Message],
                params: GenerationParams, allow_tool: bool) -> Turn:
        if reply.error == "context_overflow":
            raise ContextOverflowError("scripted context overflow")
        if reply.error == "provider_error":
            raise ProviderError("scripted provider error")

        fresh, read, write = self._input_usage(messages)

        if allow_tool and reply.tool is not None:
            usage = Usage(fresh, estimate_tokens(reply.text) + estimate_tokens(reply.tool),
                          read, write)
            return Turn(text=reply.text, usage=usage, stop_reason=StopReason.TOOL_CALL,
                        native_tool_call=("run-bash", {"command": reply.tool}))

        text = reply.text
        stop_reason = StopReason.END
        cut = min((i for i in (text.find(s) for s in params.stop_sequences if s) if i >= 0),
                  default=-1)
        if cut >= 0:
            stop = next(s for s in params.stop_sequences if text.find(s) == cut)
            text = text[: cut + len(stop)]  # inclusive: the closing tag stays visible
            stop_reason = StopReason.STOP_SEQUENCE
        elif estimate_tokens(text) > params.max_output_tokens:
            text = text[: params.max_output_tokens * 4]
            stop_reason = StopReason.LENGTH

        return Turn(text=text, usage=Usage(fresh, estimate_tokens(text), read, write),
                    stop_reason=stop_reason)

    # -- backend surface ----------------------------------------------------

    def generate(self, messages: Sequence[Message], params: GenerationParams) -> Turn:
        if not messages:
            raise ValueError("messages must be non-empty")
        return self._finish(self._reply_for(messages), messages, params, allow_tool=False)

    def generate_with_tools(self, messages: Sequence[Message],
                            tool_schema: Sequence[dict[str, Any]],
                            params: GenerationParams) -> Turn:
        if not messages:
            raise ValueError("messages must be non-empty")
        _check_tool_schema(tool_schema)
        return self._finish(self._reply_for(messages), messages, params, allow_tool=True)


class ScriptBook:
    """Mock-script fixture: maps experiment keys to reply scripts.

    YAML layout::

        context_window: 200000
        scripts:
          default: ["ANSWER: unclear"]
          "levin/*/simple_cot": ["... ANSWER: corrective"]
          "levin/lev-001/agent_stopseq":
            loop: true
            replies: ["<bash>ls</bash>"]

    Lookup order: exact ``task/sample/kind``, then ``task/*/kind``, then
    ``*/*/kind``, then ``default``.
    """

    def __init__(self, scripts: dict[str, Any], context_window: int = 200_000) -> None:
        self._scripts = scripts
        self.context_window = context_window

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "ScriptBook":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        return cls(data.get("scripts", {}), int(data.get("context_window", 200_000)))

    def backend_for(self, task_id: str, sample_id: str, kind: str) -> MockBackend:
        for key in (f"{task_id}/{sample_id}/{kind}", f"{task_id}/*/{kind}",
                    f"*/*/{kind}", "default"):
            if key in self._scripts:
                entry = self._scripts[key]
                if isinstance(entry, dict):
                    return MockBackend(entry["replies"], self.context_window,
                                       loop=bool(entry.get("loop", False)))
                return MockBackend(entry, self.context_window)
        raise KeyError(f"no mock script for {task_id}/{sample_id}/{kind} and no default")


# ---------------------------------------------------------------------------
# Generic HTTP backend


class HttpBackend:
    """Client for a single chat-completion-style JSON endpoint.

    The endpoint URL and credential come from ``AGENTMINE_ENDPOINT`` /
    ``AGENTMINE_API_KEY`` unless given explicitly. Provider faults are
    retried (default 3 attempts, exponential backoff) and then surfaced as
    :class:`ProviderError`; context-window errors surface immediately as
    :class:`ContextOverflowError`. Vendor-specific conversation APIs are out
    of scope: this client defines its own framing.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 model: str = "default", timeout_s: float = 120.0,
                 max_attempts: int = 3, backoff_s: float = 0.5) -> None:
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV, "")
        if not self.endpoint:
            raise ValueError(f"no endpoint configured (set {ENDPOINT_ENV})")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.model = model
        self.timeout_s = timeout_s
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s

    def _body(self, messages: Sequence[Message], params: GenerationParams,
              tool_schema: Sequence[dict[str, Any]] | None) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [
                {"role": m.role, "content": m.content, **({"cache": True} if m.cache else {})}
                for m in messages
            ],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        if params.stop_sequences:
            body["stop"] = list(params.stop_sequences)
        if tool_schema is not None:
            body["tools"] = list(tool_schema)
        return body

    def _post(self, body: dict[str, Any]) -> dict[str, Any]:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                resp = requests.post(self.endpoint, json=body, headers=headers,
                                     timeout=self.timeout_s)
            except requests.RequestException as exc:
                last = ProviderError(f"transport error: {exc}")
            else:
                if resp.status_code == 200:
                    return resp.json()
                kind = map_provider_error(resp.status_code, resp.text)
                if kind is FailureKind.CONTEXT_OVERFLOW:
                    raise ContextOverflowError(resp.text[:500])
                last = ProviderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            if attempt + 1 < self.max_attempts:
                time.sleep(self.backoff_s * (2 ** attempt))
        assert last is not None
        raise last

    def _turn(self, data: dict[str, Any], params: GenerationParams) -> Turn:
        try:
            choice = data["choices"][0]
            message = choice.get("message", {})
            text = message.get("content") or ""
            finish = choice.get("finish_reason", "stop")
            raw_usage = data.get("usage", {})
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed provider response: {exc}") from exc

        usage = Usage(
            input_tokens=int(raw_usage.get("prompt_tokens", raw_usage.get("input_tokens", 0))),
            output_tokens=int(raw_usage.get("completion_tokens", raw_usage.get("output_tokens", 0))),
            cache_read_tokens=int(raw_usage.get("cache_read_tokens", 0)),
            cache_write_tokens=int(raw_usage.get("cache_write_tokens", 0)),
        )

        calls = message.get("tool_calls") or []
        if calls:
            if len(calls) > 1:
                logger.warning("provider returned %d tool calls; surfacing only the first",
                               len(calls))
            fn = calls[0].get("function", {})
            args = fn.get("arguments", {})
            if isinstance(args, str):
                try:
                    args = json.loads(args)
                except json.JSONDecodeError as exc:
                    raise ProviderError(f"unparsable tool arguments: {exc}") from exc
            return Turn(text=text, usage=usage, stop_reason=StopReason.TOOL_CALL,
                        native_tool_call=(fn.get("name", "run-bash"), args))

        if finish == "length":
            return Turn(text=text, usage=usage, stop_reason=StopReason.LENGTH)
        matched = choice.get("stop_sequence") or next(
            (s for s in params.stop_sequences if text.endswith(s)), None)
        if finish in ("stop_sequence", "stop") and matched and params.stop_sequences:
            if not text.endswith(matched):
                text += matched  # keep the closing tag visible to the parser
            return Turn(text=text, usage=usage, stop_reason=StopReason.STOP_SEQUENCE)
        return Turn(text=text, usage=usage, stop_reason=StopReason.END)

    def generate(self, messages: Sequence[Message], params: GenerationParams) -> Turn:
        if not messages:
            raise ValueError("messages must be non-empty")
        return self._turn(self._post(self._body(messages, params, None)), params)

    def generate_with_tools(self, messages: Sequence[Message],
                            tool_schema: Sequence[dict[str, Any]],
                            params: GenerationParams) -> Turn:
        if not messages:
            raise ValueError("messages must be non-empty")
        _check_tool_schema(tool_schema)
        return self._turn(self._post(self._body(messages, params, tool_schema)), params)
