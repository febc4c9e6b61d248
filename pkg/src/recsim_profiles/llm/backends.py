"""Completion backends: live HTTP, scripted, and a record/replay cache."""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol

import httpx
import yaml

from ..errors import BackendError, CacheMissError, ConfigError
from .types import PromptRequest, PromptResponse, cache_key

logger = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://api.openai.com"
DEFAULT_API_KEY_ENV = "OPENAI_API_KEY"
DEFAULT_TRANSPORT_ATTEMPTS = 3


class Backend(Protocol):
    def complete(self, request: PromptRequest) -> PromptResponse: ...


def _rough_tokens(text: str) -> int:
    return len(text.split())


# ------------------------------------------------------------------- live

class LiveBackend:
    """OpenAI-compatible ``POST /v1/chat/completions`` client.

    ``max_attempts`` bounds the total number of HTTP calls per request;
    transport errors, 429 and 5xx are retried with exponential backoff.
    """

    def __init__(
        self,
        base_url: str = DEFAULT_BASE_URL,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        max_attempts: int = DEFAULT_TRANSPORT_ATTEMPTS,
        backoff_base: float = 1.0,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.sleep = sleep
        self.calls = 0
        self._lock = threading.Lock()
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    @staticmethod
    def payload(request: PromptRequest) -> dict:
        body = {
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_message},
                {"role": "user", "content": request.user_message},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.request_seed is not None:
            body["seed"] = request.request_seed
        return body

    def complete(self, request: PromptRequest) -> PromptResponse:
        url = f"{self.base_url}/v1/chat/completions"
        body = self.payload(request)
        last_error = "no attempt made"
        start = time.monotonic()
        for attempt in range(self.max_attempts):
            if attempt:
                self.sleep(self.backoff_base * 2 ** (attempt - 1))
            with self._lock:
                self.calls += 1
            try:
                resp = self._client.post(url, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                logger.warning("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, last_error)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("attempt %d/%d failed: %s", attempt + 1, self.max_attempts, last_error)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                data = resp.json()
                text = data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"unexpected chat-completion payload: {exc}") from None
            if text is None:
                raise BackendError("chat-completion returned no content")
            usage = data.get("usage") or {}
            return PromptResponse(
                text=text,
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
                latency_ms=int((time.monotonic() - start) * 1000),
                backend="live",
            )
        raise BackendError(f"transport retries exhausted after {self.max_attempts} attempts ({last_error})")

    def close(self) -> None:
        self._client.close()


# --------------------------------------------------------------- scripted

Responder = Callable[[PromptRequest], str]


class ScriptedBackend:
    """Canned responses keyed by ``(tag, digest)``, falling back to ``(tag, None)``.

    An optional ``responder`` callable answers anything the table does not
    cover; it must be a pure function of the request.
    """

    def __init__(
        self,
        table: Mapping[tuple[str, Optional[str]], str] | None = None,
        responder: Responder | None = None,
    ):
        self.table = dict(table or {})
        self.responder = responder
        self.calls = 0

    def complete(self, request: PromptRequest) -> PromptResponse:
        self.calls += 1
        digest = cache_key(request)
        text = self.table.get((request.tag, digest))
        if text is None:
            text = self.table.get((request.tag, None))
        if text is None and self.responder is not None:
            text = self.responder(request)
        if text is None:
            raise ConfigError(f"no scripted response for tag {request.tag!r} digest {digest}")
        return PromptResponse(
            text=text,
            prompt_tokens=_rough_tokens(request.system_message) + _rough_tokens(request.user_message),
            completion_tokens=_rough_tokens(text),
            latency_ms=0,
            backend="scripted",
        )


def load_scripted_table(path) -> dict[tuple[str, Optional[str]], str]:
    """Load ``responses: [{tag, digest?, response}]`` from YAML or JSON."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read scripted table {path}: {exc}") from None
    entries = data.get("responses") if isinstance(data, dict) else data
    if not isinstance(entries, list):
        raise ConfigError(f"{path}: expected a list under 'responses'")
    table = {}
    for entry in entries:
        if not isinstance(entry, dict) or "tag" not in entry or "response" not in entry:
            raise ConfigError(f"{path}: every entry needs 'tag' and 'response'")
        table[(str(entry["tag"]), entry.get("digest"))] = str(entry["response"])
    return table


# ----------------------------------------------------------------- replay

REPLAY_MODES = ("record", "replay", "strict")


def _b64(obj: dict) -> str:
    raw = json.dumps(obj, ensure_ascii=False, sort_keys=True).encode("utf-8")
    return base64.b64encode(raw).decode("ascii")


def _unb64(s: str) -> dict:
    return json.loads(base64.b64decode(s).decode("utf-8"))


class ReplayBackend:
    """Append-only cache in front of another backend.

    Modes: ``record`` serves hits and forwards+persists misses; ``replay``
    serves hits and forwards misses without persisting; ``strict`` raises
    :class:`CacheMissError` on a miss and never touches ``inner``.
    """

    def __init__(self, path, inner: Backend | None = None, mode: str = "record"):
        if mode not in REPLAY_MODES:
            raise ConfigError(f"replay mode must be one of {REPLAY_MODES}, got {mode!r}")
        if mode != "strict" and inner is None:
            raise ConfigError(f"replay mode {mode!r} needs an inner backend")
        self.path = Path(path)
        self.inner = inner
        self.mode = mode
        self.hits = 0
        self.misses = 0
        self._write_lock = threading.Lock()
        self._snapshot: dict[str, PromptResponse] = self._load()

    def _load(self) -> dict[str, PromptResponse]:
        entries: dict[str, PromptResponse] = {}
        if not self.path.exists():
            return entries
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    entries[rec["digest"]] = PromptResponse.from_record(_unb64(rec["response"]))
                except (ValueError, KeyError, TypeError):
                    # a torn final line from an interrupted writer
                    logger.warning("ignoring unreadable cache line %d in %s", lineno, self.path)
        return entries

    def __len__(self) -> int:
        return len(self._snapshot)

    def complete(self, request: PromptRequest) -> PromptResponse:
        digest = cache_key(request)
        hit = self._snapshot.get(digest)
        if hit is not None:
            self.hits += 1
            return PromptResponse(hit.text, hit.prompt_tokens, hit.completion_tokens, 0, "replay")
        self.misses += 1
        if self.mode == "strict":
            raise CacheMissError(digest)
        response = self.inner.complete(request)
        if self.mode == "record":
            self._append(digest, request, response)
        return response

    def _append(self, digest: str, request: PromptRequest, response: PromptResponse) -> None:
        record = {
            "digest": digest,
            "request": _b64(request.to_record()),
            "response": _b64(response.to_record()),
        }
        with self._write_lock:
            if digest in self._snapshot:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
                fh.flush()
            # copy-on-write keeps concurrent readers on an immutable dict
            snapshot = dict(self._snapshot)
            snapshot[digest] = response
            self._snapshot = snapshot
