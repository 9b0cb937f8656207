"""Chat-completion backends: HTTP (OpenAI-compatible), scripted mock, record/replay cache."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import httpx

from .core import ImageRef
from .errors import (
    AuthError,
    BackendError,
    ConfigError,
    ImageUnsupported,
    ReplayMiss,
    TransportError,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "MAMMQA_API_KEY"


@dataclass(frozen=True)
class GenParams:
    temperature: float = 0.3
    top_p: float = 0.7
    max_output_tokens: int = 1024

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must lie in [0, 2], got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if int(self.max_output_tokens) != self.max_output_tokens or self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be a positive integer")

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_output_tokens": self.max_output_tokens,
        }


ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    """A chat turn; ``parts`` holds plain strings and ``ImageRef`` attachments in order."""

    role: str
    parts: tuple[str | ImageRef, ...]

    def __post_init__(self):
        if isinstance(self.parts, (str, ImageRef)):
            object.__setattr__(self, "parts", (self.parts,))
        else:
            object.__setattr__(self, "parts", tuple(self.parts))
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.parts:
            raise ValueError("a message needs at least one part")
        if self.role != "user" and any(isinstance(p, ImageRef) for p in self.parts):
            raise ValueError("image parts are only allowed in user messages")

    @property
    def text(self) -> str:
        return "".join(p for p in self.parts if isinstance(p, str))

    @property
    def images(self) -> list[ImageRef]:
        return [p for p in self.parts if isinstance(p, ImageRef)]


def has_images(messages: Iterable[ChatMessage]) -> bool:
    return any(m.images for m in messages)


@dataclass(frozen=True)
class BackendId:
    kind: str
    model_name: str
    endpoint_label: str = ""

    def __post_init__(self):
        if self.kind not in ("http", "scripted", "replay"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not self.model_name:
            raise ValueError("http backends need a model name")

    @property
    def label(self) -> str:
        return self.endpoint_label or self.model_name


def _image_digest(image: ImageRef) -> str:
    return hashlib.sha256(image.read_bytes()).hexdigest()


def canonical_payload(messages: Sequence[ChatMessage], params: GenParams, model_name: str) -> str:
    msgs = []
    for m in messages:
        parts = []
        for p in m.parts:
            if isinstance(p, ImageRef):
                parts.append({"type": "image", "media_type": p.media_type, "sha256": _image_digest(p)})
            else:
                parts.append({"type": "text", "text": p})
        msgs.append({"role": m.role, "parts": parts})
    doc = {"model": model_name, "params": params.to_dict(), "messages": msgs}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def prompt_hash(messages: Sequence[ChatMessage], params: GenParams, model_name: str) -> str:
    """SHA-256 hex digest of the canonical (model, params, messages) serialization."""
    payload = canonical_payload(messages, params, model_name)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_hash: str
    latency_ms: float = 0.0
    cached: bool = False
    attempts: int = 1


class Backend:
    """Base class. Subclasses implement ``_complete``; callers use ``complete`` or ``chat``."""

    def __init__(self, backend_id: BackendId, text_only: bool = False):
        self.id = backend_id
        self.text_only = text_only

    @property
    def label(self) -> str:
        return self.id.label

    @property
    def model_name(self) -> str:
        return self.id.model_name

    def complete(self, messages: Sequence[ChatMessage], params: GenParams) -> Completion:
        if not messages:
            raise ValueError("messages must be non-empty")
        if self.text_only and has_images(messages):
            raise ImageUnsupported(f"backend {self.label!r} is text-only")
        key = prompt_hash(messages, params, self.model_name)
        return self._complete(messages, params, key)

    def chat(self, messages: Sequence[ChatMessage], params: GenParams) -> str:
        return self.complete(messages, params).text

    def _complete(self, messages, params, key: str) -> Completion:
        raise NotImplementedError


Responder = Callable[[Sequence[ChatMessage], GenParams], str]


class ScriptedBackend(Backend):
    """Deterministic mock.

    Responses are looked up by prompt hash in ``responses``; otherwise the
    ``responder`` callable is consulted, then ``default``. Every call is logged
    in ``calls`` as ``(prompt_hash, messages)``.
    """

    def __init__(
        self,
        responses: Mapping[str, str] | None = None,
        responder: Responder | None = None,
        default: str | None = None,
        model_name: str = "scripted",
        label: str = "",
        text_only: bool = False,
    ):
        super().__init__(BackendId("scripted", model_name, label), text_only=text_only)
        self.responses = dict(responses or {})
        self.responder = responder
        self.default = default
        self.calls: list[tuple[str, tuple[ChatMessage, ...]]] = []
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def _complete(self, messages, params, key):
        with self._lock:
            self.calls.append((key, tuple(messages)))
        if key in self.responses:
            text = self.responses[key]
        elif self.responder is not None:
            text = self.responder(messages, params)
        elif self.default is not None:
            text = self.default
        else:
            raise BackendError(f"scripted backend has no response for prompt {key[:12]}")
        return Completion(text=text, prompt_hash=key)


def _wire_part(part: str | ImageRef) -> dict:
    if isinstance(part, ImageRef):
        data = base64.b64encode(part.read_bytes()).decode("ascii")
        return {"type": "image_url", "image_url": {"url": f"data:{part.media_type};base64,{data}"}}
    return {"type": "text", "text": part}


def wire_messages(messages: Sequence[ChatMessage]) -> list[dict]:
    out = []
    for m in messages:
        if len(m.parts) == 1 and isinstance(m.parts[0], str):
            out.append({"role": m.role, "content": m.parts[0]})
        else:
            out.append({"role": m.role, "content": [_wire_part(p) for p in m.parts]})
    return out


class HttpBackend(Backend):
    """OpenAI-compatible ``POST {endpoint}/chat/completions`` client.

    Retries transport failures, 5xx and 429 with exponential backoff; 401/403
    raise ``AuthError`` immediately.
    """

    def __init__(
        self,
        model_name: str,
        endpoint: str,
        label: str = "",
        text_only: bool = False,
        api_key: str | None = None,
        api_key_env: str = API_KEY_ENV,
        max_attempts: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(BackendId("http", model_name, label), text_only=text_only)
        self.endpoint = endpoint.rstrip("/")
        self._api_key = api_key if api_key is not None else os.environ.get(api_key_env, "")
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self):
        self._client.close()

    def request_body(self, messages, params: GenParams) -> dict:
        return {
            "model": self.model_name,
            "messages": wire_messages(messages),
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_output_tokens,
        }

    def _complete(self, messages, params, key):
        body = self.request_body(messages, params)
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        url = f"{self.endpoint}/chat/completions"
        last: Exception | None = None
        start = time.perf_counter()
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._client.post(url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last = exc
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"{self.label}: credential rejected ({resp.status_code})")
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = BackendError(f"HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise BackendError(f"{self.label}: HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    text = _completion_text(resp)
                    latency = (time.perf_counter() - start) * 1000.0
                    return Completion(text=text, prompt_hash=key, latency_ms=latency, attempts=attempt)
            if attempt < self.max_attempts:
                delay = self.backoff * 2 ** (attempt - 1)
                logger.warning("%s: attempt %d failed (%s); retrying in %.1fs", self.label, attempt, last, delay)
                self._sleep(delay)
        raise TransportError(f"{self.label}: giving up after {self.max_attempts} attempts: {last}")


def _completion_text(resp: httpx.Response) -> str:
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"malformed completion payload: {exc}") from exc
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    return content or ""


@dataclass
class CacheEntry:
    hash: str
    response: str
    timestamp: float
    latency_ms: float = 0.0


class ResponseCache:
    """Append-only JSONL store of ``{hash, response, timestamp, latency_ms}``.

    The last entry for a hash wins on load. Writes are serialized.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, CacheEntry] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        d = json.loads(line)
                        self._entries[d["hash"]] = CacheEntry(
                            d["hash"], d["response"], d.get("timestamp", 0.0), d.get("latency_ms", 0.0)
                        )

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> CacheEntry | None:
        return self._entries.get(key)

    def put(self, key: str, response: str, latency_ms: float = 0.0, timestamp: float | None = None):
        entry = CacheEntry(key, response, time.time() if timestamp is None else timestamp, latency_ms)
        with self._lock:
            self._entries[key] = entry
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(json.dumps(entry.__dict__, ensure_ascii=False) + "\n")
        return entry


class CachingBackend(Backend):
    """Wraps another backend with a ``ResponseCache``.

    ``mode="record"``: hits are served from the cache, misses go to ``inner``
    and are appended. ``mode="replay"``: hits only; a miss raises ``ReplayMiss``
    when ``strict`` (or when there is no inner backend to fall through to).
    """

    def __init__(
        self,
        cache: ResponseCache,
        inner: Backend | None = None,
        mode: str = "replay",
        strict: bool = True,
        model_name: str | None = None,
        label: str = "",
        text_only: bool | None = None,
    ):
        if mode not in ("record", "replay"):
            raise ValueError(f"unknown cache mode {mode!r}")
        if inner is None and mode == "record":
            raise ValueError("record mode needs an inner backend")
        name = model_name or (inner.model_name if inner else "")
        kind = "replay" if mode == "replay" else (inner.id.kind if inner else "replay")
        super().__init__(
            BackendId(kind, name, label or (inner.label if inner else name)),
            text_only=inner.text_only if text_only is None and inner else bool(text_only),
        )
        self.cache = cache
        self.inner = inner
        self.mode = mode
        self.strict = strict
        self.misses = 0

    def _complete(self, messages, params, key):
        hit = self.cache.get(key)
        if hit is not None:
            return Completion(hit.response, key, latency_ms=hit.latency_ms, cached=True)
        if self.mode == "replay" and (self.strict or self.inner is None):
            raise ReplayMiss(f"no recorded response for prompt {key[:16]}")
        self.misses += 1
        result = self.inner.complete(messages, params)
        self.cache.put(key, result.text, latency_ms=result.latency_ms)
        return result


@dataclass
class BackendSpec:
    label: str
    kind: str
    model_name: str
    endpoint: str = ""
    text_only: bool = False
    api_key_env: str = API_KEY_ENV
    extra: dict = field(default_factory=dict)


def load_backend_config(path: str | Path) -> dict[str, BackendSpec]:
    """Parse a JSON document mapping labels to ``{kind, model_name, endpoint, text_only}``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read backend config {path}: {exc}") from exc
    if not isinstance(doc, dict) or not doc:
        raise ConfigError("backend config must be a non-empty JSON object")
    specs = {}
    for label, d in doc.items():
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError(f"backend {label!r}: missing 'kind'")
        known = {"kind", "model_name", "endpoint", "text_only", "api_key_env"}
        specs[label] = BackendSpec(
            label=label,
            kind=d["kind"],
            model_name=d.get("model_name", ""),
            endpoint=d.get("endpoint", ""),
            text_only=bool(d.get("text_only", False)),
            api_key_env=d.get("api_key_env", API_KEY_ENV),
            extra={k: v for k, v in d.items() if k not in known},
        )
    return specs


def build_backend(
    spec: BackendSpec,
    cache: ResponseCache | None = None,
    cache_mode: str | None = None,
    base_dir: Path | None = None,
) -> Backend:
    """Instantiate a backend from its config entry, optionally behind a cache.

    In replay mode no inner backend is constructed at all, so a replay run can
    never reach the network.
    """
    if cache_mode == "replay":
        return CachingBackend(cache, None, mode="replay", model_name=spec.model_name or spec.label,
                              label=spec.label, text_only=spec.text_only)
    if spec.kind == "http":
        if not spec.endpoint:
            raise ConfigError(f"backend {spec.label!r}: http backends need an endpoint")
        inner: Backend = HttpBackend(spec.model_name, spec.endpoint, label=spec.label,
                                     text_only=spec.text_only, api_key_env=spec.api_key_env)
    elif spec.kind == "scripted":
        responses = spec.extra.get("responses") or {}
        if isinstance(responses, str):
            p = Path(responses)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            rows = [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]
            responses = {r["hash"]: r["response"] for r in rows}
        inner = ScriptedBackend(responses, default=spec.extra.get("default"),
                                model_name=spec.model_name or spec.label, label=spec.label,
                                text_only=spec.text_only)
    elif spec.kind == "replay":
        cache_path = spec.extra.get("cache")
        if not cache_path:
            raise ConfigError(f"backend {spec.label!r}: replay backends need a 'cache' path")
        p = Path(cache_path)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        inner = CachingBackend(ResponseCache(p), None, mode="replay",
                               model_name=spec.model_name or spec.label, label=spec.label,
                               text_only=spec.text_only)
    else:
        raise ConfigError(f"backend {spec.label!r}: unknown kind {spec.kind!r}")
    if cache is not None and cache_mode == "record":
        return CachingBackend(cache, inner, mode="record")
    return inner
