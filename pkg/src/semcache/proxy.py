"""OpenAI-compatible caching proxy.

``POST /v1/chat/completions`` answers from the semantic cache when the last
user message (with the earlier user messages as its conversation history)
hits; otherwise it forwards to the upstream LLM service, caches the answer and
returns it. ``X-Cache: HIT|MISS`` tells the caller which path served it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
import uuid
from collections import OrderedDict
from contextlib import asynccontextmanager
from dataclasses import asdict, dataclass
from typing import Any

import httpx
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from .cache import LookupConfig, SemanticCache
from .errors import SemcacheError, UnknownEntry, UpstreamBadStatus, UpstreamUnreachable

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProxyConfig:
    listen_addr: str = "127.0.0.1:8080"
    upstream_base_url: str = "mock"
    cache_path: str | None = None
    # overrides the cache's own lookup config when set
    lookup: LookupConfig | None = None
    session_ttl_s: int = 3600
    mock_latency_ms: float = 0.0
    autosave_every: int = 50

    def __post_init__(self):
        self.host_port()
        if self.session_ttl_s <= 0:
            raise ValueError("session_ttl_s must be positive")

    def host_port(self) -> tuple[str, int]:
        host, sep, port = self.listen_addr.rpartition(":")
        if not sep or not host or not port.isdigit():
            raise ValueError(f"listen_addr must look like host:port, got {self.listen_addr!r}")
        return host, int(port)


@dataclass(frozen=True)
class UpstreamResponse:
    text: str
    latency_ms: float
    served_from: str
    usage: dict | None = None


class UpstreamClient:
    """LLM web-service client; ``base_url="mock"`` answers locally.

    The mock reply is a deterministic function of the message texts, delayed
    by ``latency_ms``. ``calls`` counts every upstream request.
    """

    def __init__(self, base_url: str = "mock", latency_ms: float = 0.0, timeout: float = 60.0,
                 http: httpx.Client | None = None):
        self.base_url = base_url
        self.latency_ms = latency_ms
        self._http = http if http is not None or base_url == "mock" else httpx.Client(timeout=timeout)
        self._lock = threading.Lock()
        self.calls = 0

    @property
    def is_mock(self) -> bool:
        return self.base_url == "mock"

    def _endpoint(self) -> str:
        base = self.base_url.rstrip("/")
        return base + ("/chat/completions" if base.endswith("/v1") else "/v1/chat/completions")

    def query(self, messages: list[dict], body: dict | None = None) -> UpstreamResponse:
        with self._lock:
            self.calls += 1
        t0 = time.perf_counter()
        if self.is_mock:
            joined = "\n".join(f"{m.get('role')}:{m.get('content')}" for m in messages)
            tag = hashlib.sha256(joined.encode("utf-8")).hexdigest()[:12]
            last = next((m["content"] for m in reversed(messages) if m.get("role") == "user"), "")
            if self.latency_ms > 0:
                time.sleep(self.latency_ms / 1000.0)
            text = f"[mock {tag}] answer to: {last}"
            return UpstreamResponse(text, (time.perf_counter() - t0) * 1000.0, "upstream")
        payload = dict(body) if body is not None else {"messages": messages}
        try:
            resp = self._http.post(self._endpoint(), json=payload)
        except httpx.TransportError as exc:
            raise UpstreamUnreachable(f"cannot reach {self.base_url}: {exc}") from exc
        if resp.status_code >= 400:
            raise UpstreamBadStatus(resp.status_code, resp.text[:200])
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise UpstreamBadStatus(resp.status_code, f"malformed completion body ({exc})") from exc
        return UpstreamResponse(text, (time.perf_counter() - t0) * 1000.0, "upstream", data.get("usage"))


def upstream_query(client: UpstreamClient, messages: list[dict]) -> UpstreamResponse:
    return client.query(messages)


class ProxyMetrics:
    FIELDS = ("lookups", "hits", "misses", "inserts", "upstream_errors")

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = dict.fromkeys(self.FIELDS, 0)

    def incr(self, name: str, by: int = 1) -> None:
        with self._lock:
            self._counts[name] += by

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)


class SessionStore:
    """Per-session query history for clients that only send their newest message."""

    def __init__(self, ttl_s: int, max_sessions: int = 10_000):
        self.ttl_s = ttl_s
        self.max_sessions = max_sessions
        self._lock = threading.Lock()
        self._data: OrderedDict[str, tuple[float, list[str]]] = OrderedDict()

    def history(self, session_id: str) -> list[str]:
        with self._lock:
            item = self._data.get(session_id)
            if item is None or time.monotonic() - item[0] > self.ttl_s:
                self._data.pop(session_id, None)
                return []
            return list(item[1])

    def append(self, session_id: str, query: str) -> None:
        with self._lock:
            _, hist = self._data.pop(session_id, (0.0, []))
            self._data[session_id] = (time.monotonic(), hist + [query])
            while len(self._data) > self.max_sessions:
                self._data.popitem(last=False)


class BadRequest(ValueError):
    pass


def parse_messages(body: Any) -> tuple[list[dict], str, list[str]]:
    """Validate a chat body; returns (messages, query, user history oldest first)."""
    if not isinstance(body, dict):
        raise BadRequest("request body must be a JSON object")
    messages = body.get("messages")
    if not isinstance(messages, list) or not messages:
        raise BadRequest("'messages' must be a non-empty array")
    for m in messages:
        if not isinstance(m, dict) or not isinstance(m.get("role"), str) or not isinstance(m.get("content"), str):
            raise BadRequest("each message needs string 'role' and 'content'")
    user_turns = [m["content"] for m in messages if m["role"] == "user"]
    if not user_turns or not user_turns[-1].strip():
        raise BadRequest("the last user message is missing or empty")
    history = [t for t in user_turns[:-1] if t.strip()]
    return messages, user_turns[-1], history


def completion_body(text: str, model: str, usage: dict | None = None) -> dict:
    return {
        "id": f"chatcmpl-{uuid.uuid4().hex[:24]}",
        "object": "chat.completion",
        "created": int(time.time()),
        "model": model,
        "choices": [
            {"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}
        ],
        "usage": usage or {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
    }


class ProxyService:
    """Transport-independent request handling; the FastAPI app wraps it."""

    def __init__(self, cache: SemanticCache, upstream: UpstreamClient, config: ProxyConfig = ProxyConfig()):
        self.cache = cache
        self.upstream = upstream
        self.config = config
        if config.lookup is not None:
            cache.lookup_config = config.lookup
        self.metrics = ProxyMetrics()
        self.sessions = SessionStore(config.session_ttl_s)
        self._inserts_since_save = 0

    def handle_chat_completion(self, body: Any, session_id: str | None = None) -> tuple[int, dict, dict]:
        """Returns ``(status, json_body, headers)``."""
        try:
            messages, query, history = parse_messages(body)
        except BadRequest as exc:
            return 400, {"error": {"message": str(exc), "type": "invalid_request_error"}}, {}
        if not history and session_id:
            history = self.sessions.history(session_id)
        model = str(body.get("model") or "semcache")

        outcome = None
        try:
            outcome = self.cache.lookup(query, history)
        except Exception:  # a cache fault must not block the upstream path
            logger.exception("cache lookup failed; forwarding to upstream")
        if outcome is not None:
            self.metrics.incr("lookups")
            self.metrics.incr("hits" if outcome.hit else "misses")
        if session_id:
            self.sessions.append(session_id, query)
        if outcome is not None and outcome.hit:
            headers = {"X-Cache": "HIT", "X-Cache-Entry-Id": str(outcome.entry.id),
                       "X-Cache-Similarity": f"{outcome.similarity:.6f}"}
            return 200, completion_body(outcome.entry.response_text, model), headers

        try:
            up = self.upstream.query(messages, body if not self.upstream.is_mock else None)
        except (UpstreamUnreachable, UpstreamBadStatus) as exc:
            self.metrics.incr("upstream_errors")
            return 502, {"error": {"message": str(exc), "type": "upstream_error"}}, {"X-Cache": "MISS"}
        headers = {"X-Cache": "MISS"}
        if up.text:
            try:
                entry_id = self.cache.insert(query, up.text, history)
                self.metrics.incr("inserts")
                headers["X-Cache-Entry-Id"] = str(entry_id)
                self._maybe_autosave()
            except SemcacheError:
                logger.exception("could not cache the upstream answer")
        return 200, completion_body(up.text, model, up.usage), headers

    def handle_feedback(self, body: Any) -> tuple[int, dict]:
        if not isinstance(body, dict) or "entry_id" not in body:
            return 400, {"error": "body must contain entry_id and judgment"}
        try:
            pair = self.cache.record_feedback(int(body["entry_id"]), str(body.get("judgment", "")))
        except UnknownEntry as exc:
            return 404, {"error": str(exc)}
        except (ValueError, TypeError) as exc:
            return 400, {"error": str(exc)}
        return 200, {"logged": asdict(pair), "feedback_count": len(self.cache.feedback_log)}

    def _maybe_autosave(self) -> None:
        if not self.config.cache_path:
            return
        self._inserts_since_save += 1
        if self._inserts_since_save >= self.config.autosave_every:
            self.save()

    def save(self) -> None:
        if self.config.cache_path:
            self.cache.save(self.config.cache_path)
            self._inserts_since_save = 0


def create_app(service: ProxyService) -> FastAPI:
    @asynccontextmanager
    async def lifespan(_app):
        yield
        service.save()

    app = FastAPI(title="semcache proxy", lifespan=lifespan)
    app.state.service = service

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        raw = await request.body()
        try:
            body = json.loads(raw) if raw else None
        except ValueError:
            return JSONResponse({"error": {"message": "body is not valid JSON"}}, status_code=400)
        status, payload, headers = await run_in_threadpool(
            service.handle_chat_completion, body, request.headers.get("x-session-id")
        )
        return JSONResponse(payload, status_code=status, headers=headers)

    @app.post("/feedback")
    async def feedback(request: Request):
        try:
            body = await request.json()
        except ValueError:
            return JSONResponse({"error": "body is not valid JSON"}, status_code=400)
        status, payload = service.handle_feedback(body)
        return JSONResponse(payload, status_code=status)

    @app.get("/metrics")
    def metrics():
        return service.metrics.snapshot()

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "entries": len(service.cache)}

    return app
