"""Chat-completion transport for remote judges and agents.

Speaks the common ``/v1/chat/completions`` JSON protocol over plain HTTP, with
retries for transient failures, a bound on in-flight requests, and a replay
mode keyed by request hash so tests never touch the network.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable

log = logging.getLogger(__name__)

API_KEY_ENV = "VERIGAP_JUDGE_API_KEY"
BASE_URL_ENV = "VERIGAP_JUDGE_BASE_URL"

TRANSIENT_STATUS = {408, 409, 429, 500, 502, 503, 504}


class RemoteUnavailable(RuntimeError):
    pass


def build_request(model: str, user: str, system: str | None = None, temperature: float = 0.0) -> dict:
    messages = []
    if system:
        messages.append({"role": "system", "content": system})
    messages.append({"role": "user", "content": user})
    return {"model": model, "messages": messages, "temperature": temperature}


def request_hash(body: dict) -> str:
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def response_content(payload: dict) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ValueError(f"malformed chat-completion response: {exc!r}") from None
    return content or ""


class HttpTransport:
    """POST chat-completion requests with retry and a concurrency bound."""

    def __init__(self, base_url: str | None = None, api_key: str | None = None, timeout: float = 30.0,
                 max_retries: int = 3, backoff: float = 0.5, max_in_flight: int = 4):
        base_url = base_url or os.environ.get(BASE_URL_ENV)
        if not base_url:
            raise ValueError(f"no base URL given and {BASE_URL_ENV} is unset")
        self.url = base_url.rstrip("/") + "/v1/chat/completions"
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _post_once(self, body: dict) -> dict:
        data = json.dumps(body).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.url, data=data, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def __call__(self, body: dict) -> str:
        last = None
        for attempt in range(self.max_retries + 1):
            try:
                with self._slots:
                    return response_content(self._post_once(body))
            except urllib.error.HTTPError as exc:
                if exc.code not in TRANSIENT_STATUS:
                    raise RemoteUnavailable(f"HTTP {exc.code} from {self.url}") from exc
                last = exc
            except (urllib.error.URLError, TimeoutError, ConnectionError, json.JSONDecodeError, ValueError) as exc:
                last = exc
            log.warning("chat request failed (attempt %d/%d): %s", attempt + 1, self.max_retries + 1, last)
            if attempt < self.max_retries:
                time.sleep(self.backoff * 2**attempt)
        raise RemoteUnavailable(f"{self.url} unavailable after {self.max_retries + 1} attempts: {last}")


class ReplayTransport:
    """Answer requests from a JSONL fixture of ``{"request_hash", "response"}`` records."""

    def __init__(self, records: dict[str, str], fallback: Callable[[dict], str] | None = None):
        self.records = dict(records)
        self.fallback = fallback

    @classmethod
    def load(cls, path, fallback=None) -> "ReplayTransport":
        records = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    records[obj["request_hash"]] = obj["response"]
        return cls(records, fallback)

    def __call__(self, body: dict) -> str:
        key = request_hash(body)
        if key in self.records:
            return self.records[key]
        if self.fallback is not None:
            return self.fallback(body)
        raise RemoteUnavailable(f"no recorded response for request {key[:12]}")


class RecordingTransport:
    """Wrap a transport and append every exchange to a replay fixture."""

    def __init__(self, inner: Callable[[dict], str], path):
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()

    def __call__(self, body: dict) -> str:
        content = self.inner(body)
        line = json.dumps({"request_hash": request_hash(body), "response": content}, ensure_ascii=False)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        return content


# --------------------------------------------------------------------------- stub server


@dataclass
class _Reply:
    status: int
    content: str


class MockChatServer:
    """Local chat-completion endpoint driven by a Python callable.

    ``responder(body) -> str`` produces the assistant message; return an
    ``int`` instead to answer with that HTTP status. Use as a context manager::

        with MockChatServer(lambda body: "incorrect") as srv:
            judge = RemoteJudge(template, HttpTransport(srv.base_url), model="m")
    """

    def __init__(self, responder: Callable[[dict], str | int], host: str = "127.0.0.1"):
        self.responder = responder
        self.requests: list[dict] = []
        self.auth_headers: list[str | None] = []
        owner = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                owner.requests.append(body)
                owner.auth_headers.append(self.headers.get("Authorization"))
                if self.path != "/v1/chat/completions":
                    reply = _Reply(404, "")
                else:
                    out = owner.responder(body)
                    reply = _Reply(out, "") if isinstance(out, int) else _Reply(200, out)
                payload = json.dumps({
                    "id": "mock",
                    "object": "chat.completion",
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": reply.content},
                                 "finish_reason": "stop"}],
                }).encode("utf-8")
                self.send_response(reply.status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer((host, 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "MockChatServer":
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
