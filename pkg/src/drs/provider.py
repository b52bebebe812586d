"""Gateway to chat-completion services, plus a deterministic scripted mock.

A handle bundles endpoint/model/role with its limits; `complete` enforces the
concurrency cap and per-minute budget, retries transport failures with
exponential backoff, and, when the request carries a reply schema, re-asks
exactly once on a malformed reply before giving up.  No silent repair of
truncated output: the quality-control loop owns semantic failure, so masking
provider defects here would hide real problems.

Every call (including retries and re-asks) lands in the handle's call log
with monotonic start/end times, which is what the rate-limit tests audit.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, NamedTuple

import jsonschema

API_KEY_ENV = "DRS_API_KEY"
API_BASE_ENV = "DRS_API_BASE"


class Role(str, Enum):
    GENERATOR_VLM = "generator_vlm"
    BLIND_LLM_1 = "blind_llm_1"
    BLIND_LLM_2 = "blind_llm_2"
    JUDGE_LLM = "judge_llm"
    REVIEWER_VLM = "reviewer_vlm"


class ProviderError(RuntimeError):
    pass


class Timeout(ProviderError):
    pass


class RateLimited(ProviderError):
    pass


class MalformedReply(ProviderError):
    pass


class AuthFailure(ProviderError):
    pass


class UnscriptedRequest(ProviderError):
    """The mock received a request its script does not cover."""


# Transport-level signals; `complete` maps them to the public errors above.
class TransientTransportError(Exception):
    pass


class RateLimitSignal(Exception):
    pass


@dataclass(frozen=True)
class Limits:
    max_concurrent: int = 4
    requests_per_minute: int = 120
    max_retries: int = 2
    timeout_seconds: float = 30.0
    retry_backoff_s: float = 0.5

    def __post_init__(self):
        if min(self.max_concurrent, self.requests_per_minute) < 1:
            raise ValueError("concurrency and rate limits must be positive")
        if self.max_retries < 0 or self.timeout_seconds <= 0:
            raise ValueError("max_retries must be >= 0 and timeout positive")


@dataclass(frozen=True)
class ChatRequest:
    system: str = ""
    user: str = ""
    images: tuple[str, ...] = ()
    schema: Any = None  # jsonschema dict; None disables reply validation

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))


@dataclass(frozen=True)
class ChatReply:
    raw: str
    parsed: Any
    prompt_tokens: int
    completion_tokens: int
    latency_s: float


class TransportResult(NamedTuple):
    text: str
    prompt_tokens: int
    completion_tokens: int


@dataclass
class CallLogEntry:
    request_digest: str
    request_text: str
    reply_text: str | None
    error: str | None
    t_start: float
    t_end: float


def request_text(req: ChatRequest) -> str:
    parts = []
    if req.system:
        parts.append("[system] " + req.system)
    parts.append("[user] " + req.user)
    for image in req.images:
        parts.append("[image] " + image)
    return "\n".join(parts)


def request_digest(req: ChatRequest) -> str:
    return hashlib.sha256(request_text(req).encode("utf-8")).hexdigest()


class ProviderHandle:
    """Shareable, internally synchronized handle to one provider role."""

    def __init__(
        self,
        *,
        role: Role,
        model: str,
        endpoint: str = "",
        api_key_env: str = API_KEY_ENV,
        limits: Limits = Limits(),
        transport: Callable[["ProviderHandle", ChatRequest], TransportResult] | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.role = role
        self.model = model
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.limits = limits
        self.transport = transport if transport is not None else http_transport
        self.clock = clock
        self.sleep = sleep
        self.call_log: list[CallLogEntry] = []
        self._sem = threading.BoundedSemaphore(limits.max_concurrent)
        self._lock = threading.Lock()
        self._window: deque[float] = deque()

    @property
    def is_mock(self) -> bool:
        return isinstance(self.transport, MockTransport)

    def _wait_for_rate_slot(self):
        while True:
            with self._lock:
                now = self.clock()
                while self._window and now - self._window[0] >= 60.0:
                    self._window.popleft()
                if len(self._window) < self.limits.requests_per_minute:
                    self._window.append(now)
                    return
                wait = 60.0 - (now - self._window[0])
            self.sleep(max(wait, 1e-3))


def _send_once(handle: ProviderHandle, req: ChatRequest) -> TransportResult:
    handle._wait_for_rate_slot()
    entry = CallLogEntry(
        request_digest=request_digest(req),
        request_text=request_text(req),
        reply_text=None,
        error=None,
        t_start=handle.clock(),
        t_end=0.0,
    )
    try:
        result = handle.transport(handle, req)
        entry.reply_text = result.text
        return result
    except Exception as exc:
        entry.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        entry.t_end = handle.clock()
        with handle._lock:
            handle.call_log.append(entry)


def _send_with_retries(handle: ProviderHandle, req: ChatRequest) -> TransportResult:
    attempts = handle.limits.max_retries + 1
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            return _send_once(handle, req)
        except (TransientTransportError, RateLimitSignal) as exc:
            last = exc
            if attempt + 1 < attempts:
                handle.sleep(handle.limits.retry_backoff_s * (2**attempt))
    if isinstance(last, RateLimitSignal):
        raise RateLimited(f"{handle.role.value}: rate limited after {attempts} attempts") from last
    raise Timeout(f"{handle.role.value}: transport failed after {attempts} attempts") from last


_VALIDATORS: dict[int, Any] = {}


def _validator_for(schema: Any):
    key = id(schema)
    validator = _VALIDATORS.get(key)
    if validator is None:
        validator = jsonschema.Draft202012Validator(schema)
        _VALIDATORS[key] = validator
    return validator


def parse_strict_json(raw: str, schema: Any) -> Any:
    """The whole reply must be one JSON value that validates against schema."""
    text = raw.strip()
    parsed = json.loads(text)
    if schema is not None:
        error = next(_validator_for(schema).iter_errors(parsed), None)
        if error is not None:
            raise jsonschema.ValidationError(error.message)
    return parsed


_STRICT_JSON_SUFFIX = (
    "\n\nYour previous reply was not valid strict JSON for the requested shape. "
    "Reply with strict JSON only: no prose, no code fences, no extra keys."
)


def complete(handle: ProviderHandle, req: ChatRequest) -> ChatReply:
    """Send one request; blocking; returns a validated reply.

    On a schema-parse failure the request is re-asked exactly once with a
    strict-JSON reminder appended; a second failure raises MalformedReply.
    """
    with handle._sem:
        t0 = handle.clock()
        result = _send_with_retries(handle, req)
        if req.schema is None:
            return ChatReply(result.text, None, result.prompt_tokens, result.completion_tokens, handle.clock() - t0)
        try:
            parsed = parse_strict_json(result.text, req.schema)
            return ChatReply(result.text, parsed, result.prompt_tokens, result.completion_tokens, handle.clock() - t0)
        except (json.JSONDecodeError, jsonschema.ValidationError):
            pass
        retry_req = replace(req, user=req.user + _STRICT_JSON_SUFFIX)
        result2 = _send_with_retries(handle, retry_req)
        try:
            parsed = parse_strict_json(result2.text, req.schema)
        except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
            raise MalformedReply(
                f"{handle.role.value}: reply failed schema twice: {result2.text[:200]!r}"
            ) from exc
        return ChatReply(result2.text, parsed, result2.prompt_tokens, result2.completion_tokens, handle.clock() - t0)


# ---------------------------------------------------------------------------
# HTTP transport (chat-completions wire format)
# ---------------------------------------------------------------------------

_MIME_BY_SUFFIX = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".webp": "image/webp"}


def _image_part(path: str) -> dict[str, Any]:
    data = Path(path).read_bytes()
    mime = _MIME_BY_SUFFIX.get(Path(path).suffix.lower(), "image/png")
    encoded = base64.b64encode(data).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{encoded}"}}


def wire_payload(handle: ProviderHandle, req: ChatRequest) -> dict[str, Any]:
    messages = []
    if req.system:
        messages.append({"role": "system", "content": [{"type": "text", "text": req.system}]})
    user_content: list[dict[str, Any]] = [{"type": "text", "text": req.user}]
    user_content.extend(_image_part(p) for p in req.images)
    messages.append({"role": "user", "content": user_content})
    return {"model": handle.model, "messages": messages, "temperature": 0}


def http_transport(handle: ProviderHandle, req: ChatRequest) -> TransportResult:
    import requests

    api_key = os.environ.get(handle.api_key_env, "")
    if not api_key:
        raise AuthFailure(
            f"{handle.role.value}: no API key; set {handle.api_key_env} for live providers"
        )
    base = handle.endpoint or os.environ.get(API_BASE_ENV, "")
    if not base:
        raise AuthFailure(f"{handle.role.value}: no endpoint; set {API_BASE_ENV} or configure one")
    try:
        resp = requests.post(
            base.rstrip("/") + "/chat/completions",
            headers={"Authorization": f"Bearer {api_key}"},
            json=wire_payload(handle, req),
            timeout=handle.limits.timeout_seconds,
        )
    except requests.Timeout as exc:
        raise TransientTransportError(f"timeout: {exc}") from exc
    except requests.RequestException as exc:
        raise TransientTransportError(f"connection: {exc}") from exc
    if resp.status_code in (401, 403):
        raise AuthFailure(f"{handle.role.value}: HTTP {resp.status_code}")
    if resp.status_code == 429:
        raise RateLimitSignal("HTTP 429")
    if resp.status_code >= 500:
        raise TransientTransportError(f"HTTP {resp.status_code}")
    if resp.status_code != 200:
        raise ProviderError(f"{handle.role.value}: HTTP {resp.status_code}: {resp.text[:200]}")
    body = resp.json()
    content = body["choices"][0]["message"]["content"]
    if isinstance(content, list):  # some providers return content parts
        content = "".join(part.get("text", "") for part in content)
    usage = body.get("usage", {})
    return TransportResult(
        content, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))
    )


# ---------------------------------------------------------------------------
# Scripted mock
# ---------------------------------------------------------------------------


@dataclass
class ScriptEntry:
    """One matcher with a queue of replies, consumed one reply per hit.

    `match` is a substring of the request text, a predicate over the request,
    or None (matches anything).  Replies may be strings, callables producing
    strings, or exception instances to raise (scripted transport failures).
    """

    match: str | Callable[[ChatRequest], bool] | None
    replies: list[Any] = field(default_factory=list)

    def matches(self, req: ChatRequest) -> bool:
        if not self.replies:
            return False
        if self.match is None:
            return True
        if callable(self.match):
            return bool(self.match(req))
        return self.match in request_text(req)


class MockTransport:
    def __init__(self, entries: Iterable[ScriptEntry]):
        self.entries = list(entries)
        self._lock = threading.Lock()

    def __call__(self, handle: ProviderHandle, req: ChatRequest) -> TransportResult:
        with self._lock:
            entry = next((e for e in self.entries if e.matches(req)), None)
            if entry is None:
                raise UnscriptedRequest(request_text(req)[:300])
            reply = entry.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        text = reply(req) if callable(reply) else str(reply)
        return TransportResult(text, len(request_text(req)) // 4, len(text) // 4)


def _normalize_script(script: Iterable[Any]) -> list[ScriptEntry]:
    entries = []
    for item in script:
        if isinstance(item, ScriptEntry):
            entries.append(ScriptEntry(item.match, list(item.replies)))
        elif isinstance(item, dict):
            entries.append(ScriptEntry(item.get("match"), list(item["replies"])))
        else:
            match, replies = item
            if not isinstance(replies, list):
                replies = [replies]
            entries.append(ScriptEntry(match, list(replies)))
    return entries


MOCK_LIMITS = Limits(
    max_concurrent=8, requests_per_minute=1_000_000, max_retries=2, retry_backoff_s=0.0
)


def mock_provider(
    script: Iterable[Any],
    role: Role = Role.JUDGE_LLM,
    *,
    model: str = "mock",
    limits: Limits = MOCK_LIMITS,
    clock: Callable[[], float] = time.monotonic,
    sleep: Callable[[float], None] = time.sleep,
) -> ProviderHandle:
    """A deterministic offline handle driven by an ordered script."""
    return ProviderHandle(
        role=role,
        model=model,
        limits=limits,
        transport=MockTransport(_normalize_script(script)),
        clock=clock,
        sleep=sleep,
    )


def recorded_script(handle: ProviderHandle) -> list[dict[str, str]]:
    """Digest/reply pairs of every successful call, for later replay."""
    return [
        {"digest": entry.request_digest, "reply": entry.reply_text}
        for entry in handle.call_log
        if entry.reply_text is not None
    ]


def replay_script(recording: Iterable[dict[str, str]]) -> list[ScriptEntry]:
    """Rebuild a script that matches requests by digest, in recorded order."""
    queues: dict[str, list[Any]] = {}
    order: list[str] = []
    for item in recording:
        digest = item["digest"]
        if digest not in queues:
            queues[digest] = []
            order.append(digest)
        queues[digest].append(item["reply"])
    entries = []
    for digest in order:
        matcher = (lambda d: (lambda req: request_digest(req) == d))(digest)
        entries.append(ScriptEntry(matcher, queues[digest]))
    return entries


# ---------------------------------------------------------------------------
# Config-driven handle construction
# ---------------------------------------------------------------------------

_TRANSPORT_ERROR_SENTINELS = {
    "transport_error": TransientTransportError,
    "rate_limited": RateLimitSignal,
}


def _script_from_file(path: Path) -> list[ScriptEntry]:
    raw = json.loads(path.read_text(encoding="utf-8"))
    entries = []
    for item in raw:
        replies: list[Any] = []
        for reply in item["replies"]:
            if isinstance(reply, dict):
                kind = next((k for k in _TRANSPORT_ERROR_SENTINELS if reply.get(k)), None)
                if kind is None:
                    raise ValueError(f"bad scripted reply: {reply!r}")
                replies.append(_TRANSPORT_ERROR_SENTINELS[kind]("scripted"))
            else:
                replies.append(reply)
        entries.append(ScriptEntry(item.get("match"), replies))
    return entries


def handles_from_config(
    providers_cfg: dict[str, Any],
    *,
    base_dir: Path | None = None,
    clock: Callable[[], float] = time.monotonic,
    sleep: Callable[[float], None] = time.sleep,
) -> dict[Role, ProviderHandle]:
    """Build one handle per configured role.

    A role entry is live ({model, endpoint?, api_key_env?, limits?}) or a mock
    ({mock_script: path} or inline {script: [...]}).  Live entries require
    their API key env var to be set before any network call.
    """
    base_dir = base_dir or Path(".")
    handles: dict[Role, ProviderHandle] = {}
    for role_name, entry in providers_cfg.items():
        role = Role(role_name)
        limits = Limits(**entry["limits"]) if "limits" in entry else None
        if "mock_script" in entry or "script" in entry:
            if "mock_script" in entry:
                script = _script_from_file(base_dir / entry["mock_script"])
            else:
                script = _normalize_script(entry["script"])
            handles[role] = mock_provider(
                script,
                role,
                model=entry.get("model", "mock"),
                limits=limits or MOCK_LIMITS,
                clock=clock,
                sleep=sleep,
            )
        else:
            api_key_env = entry.get("api_key_env", API_KEY_ENV)
            if not os.environ.get(api_key_env):
                raise AuthFailure(
                    f"provider {role.value} is live but {api_key_env} is not set; "
                    f"export {api_key_env} or configure a mock_script"
                )
            handles[role] = ProviderHandle(
                role=role,
                model=entry["model"],
                endpoint=entry.get("endpoint", ""),
                api_key_env=api_key_env,
                limits=limits or Limits(),
                clock=clock,
                sleep=sleep,
            )
    return handles
