"""Model backends: text embeddings and chat/vision completions.

Real clients speak the de-facto ``/embeddings`` and ``/chat/completions`` JSON
shapes over HTTP. The mocks are bit-deterministic and never touch the network.
This is the only module that performs network I/O.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import httpx
import numpy as np

log = logging.getLogger(__name__)

MOCK_DIM = 256
SYNONYM_COSINE = 0.9


class ProviderError(RuntimeError):
    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.status = status


class MockScriptExhausted(RuntimeError):
    pass


class Embedder(Protocol):
    name: str

    def embed_text(self, texts: Sequence[str]) -> List[np.ndarray]: ...


class ChatClient(Protocol):
    def chat(self, messages: Sequence[dict]) -> str: ...


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass
class ProviderConfig:
    endpoint: str = "http://localhost:8000/v1"
    api_key_env: str = "GRAPHGROUND_API_KEY"
    model: str = ""
    timeout: float = 30.0
    max_retries: int = 2
    rpm: float = 60.0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.rpm <= 0:
            raise ValueError("rpm must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ProviderConfig":
        known = {k: d[k] for k in ("endpoint", "api_key_env", "model", "timeout", "max_retries", "rpm") if k in d}
        return cls(**known)


class TokenBucket:
    """Client-side rate limiter; the one synchronization point shared by concurrent calls."""

    def __init__(self, rpm: float, burst: int = 1, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.rate = rpm / 60.0
        self.capacity = float(max(1, burst))
        self.tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Take one token, sleeping if needed. Returns the time waited."""
        with self._lock:
            now = self._clock()
            self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate)
            self._last = now
            wait = 0.0
            if self.tokens < 1.0:
                wait = (1.0 - self.tokens) / self.rate
                self._sleep(wait)
                self._last = self._clock()
                self.tokens = 0.0
            else:
                self.tokens -= 1.0
            return wait


def _redact(headers: dict) -> dict:
    return {k: ("***" if k.lower() == "authorization" else v) for k, v in headers.items()}


class HTTPProvider:
    """Embeddings + chat client for any server exposing the chat-completions JSON shape."""

    def __init__(self, config: ProviderConfig, transport: Optional[httpx.BaseTransport] = None,
                 transcript: Optional[List[dict]] = None, limiter: Optional[TokenBucket] = None):
        self.config = config
        self.name = f"http:{config.model}"
        self._client = httpx.Client(base_url=config.endpoint.rstrip("/") + "/", transport=transport)
        self._limiter = limiter or TokenBucket(config.rpm)
        self.transcript = transcript

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, path: str, body: dict) -> dict:
        cfg = self.config
        deadline = time.monotonic() + cfg.timeout * (cfg.max_retries + 1)
        last_status = None
        last_err = "no attempt made"
        headers = self._headers()
        for attempt in range(cfg.max_retries + 1):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            self._limiter.acquire()
            try:
                resp = self._client.post(path, json=body, headers=headers,
                                         timeout=min(cfg.timeout, max(remaining, 1e-3)))
            except httpx.HTTPError as exc:
                last_err = f"{type(exc).__name__}: {exc}"
                last_status = None
                log.warning("%s attempt %d failed: %s", path, attempt + 1, last_err)
                continue
            if self.transcript is not None:
                self.transcript.append({"path": path, "headers": _redact(headers), "request": body,
                                        "status": resp.status_code, "response": resp.text})
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError:
                    last_err, last_status = "response is not JSON", resp.status_code
                    continue
            last_status = resp.status_code
            last_err = f"HTTP {resp.status_code}"
            if resp.status_code < 500 and resp.status_code != 429:
                break
        raise ProviderError(f"{path} failed after {cfg.max_retries + 1} attempt(s): {last_err}", last_status)

    def embed_text(self, texts: Sequence[str]) -> List[np.ndarray]:
        if not texts:
            raise ValueError("embed_text needs at least one text")
        data = self._post("embeddings", {"model": self.config.model, "input": list(texts)})
        try:
            rows = sorted(data["data"], key=lambda r: r.get("index", 0))
            vecs = [np.asarray(r["embedding"], dtype=np.float64) for r in rows]
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"malformed embeddings response: {exc}") from exc
        if len(vecs) != len(texts):
            raise ProviderError(f"expected {len(texts)} embeddings, got {len(vecs)}")
        if len({v.shape for v in vecs}) != 1:
            raise ProviderError("embedding dimension inconsistent within batch")
        out = []
        for v in vecs:
            n = np.linalg.norm(v)
            if n == 0:
                raise ProviderError("server returned a zero embedding")
            out.append(v / n)
        return out

    def chat(self, messages: Sequence[dict]) -> str:
        if not messages:
            raise ValueError("chat needs at least one message")
        body = {"model": self.config.model, "messages": [_wire_message(m) for m in messages]}
        data = self._post("chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed chat response: {exc}") from exc

    def close(self):
        self._client.close()


def encode_image(image: Union[np.ndarray, bytes, str]) -> str:
    """Return a base64 PNG data URL for an RGB array, raw PNG bytes or a file path."""
    if isinstance(image, str):
        with open(image, "rb") as fh:
            raw = fh.read()
    elif isinstance(image, (bytes, bytearray)):
        raw = bytes(image)
    else:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
        raw = buf.getvalue()
    return "data:image/png;base64," + base64.b64encode(raw).decode("ascii")


def _wire_message(m: dict) -> dict:
    image = m.get("image")
    if image is None:
        return {"role": m["role"], "content": m["text"]}
    return {
        "role": m["role"],
        "content": [
            {"type": "text", "text": m["text"]},
            {"type": "image_url", "image_url": {"url": encode_image(image)}},
        ],
    }


# --- hermetic mocks --------------------------------------------------------

def _load_synonyms() -> Dict[str, str]:
    raw = resources.files("graphground").joinpath("data/synonyms.json").read_text()
    return {normalize_text(k): normalize_text(v) for k, v in json.loads(raw)["aliases"].items()}


SYNONYMS = _load_synonyms()


def _hash_vector(text: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.Generator(np.random.PCG64(seed)).standard_normal(dim)
    return v / np.linalg.norm(v)


def mock_embed(text: str, dim: int = MOCK_DIM, synonyms: Optional[Dict[str, str]] = None) -> np.ndarray:
    """Deterministic unit vector for ``text``.

    Aliases in the synonym table are rotated towards their base text so the
    pair has cosine exactly ``SYNONYM_COSINE``.
    """
    table = SYNONYMS if synonyms is None else synonyms
    key = normalize_text(text)
    base = table.get(key)
    own = _hash_vector(key, dim)
    if base is None or base == key:
        return own
    b = _hash_vector(base, dim)
    perp = own - np.dot(own, b) * b
    perp /= np.linalg.norm(perp)
    v = SYNONYM_COSINE * b + np.sqrt(1.0 - SYNONYM_COSINE ** 2) * perp
    return v / np.linalg.norm(v)


class MockEmbedder:
    def __init__(self, dim: int = MOCK_DIM, synonyms: Optional[Dict[str, str]] = None):
        self.dim = dim
        self.synonyms = synonyms
        self.name = f"mock-hash-{dim}"
        self.calls = 0

    def embed_text(self, texts: Sequence[str]) -> List[np.ndarray]:
        if not texts:
            raise ValueError("embed_text needs at least one text")
        self.calls += 1
        return [mock_embed(t, self.dim, self.synonyms) for t in texts]


class CachedEmbedder:
    """Memoizes single-text embeddings; the scorers hit the same labels constantly."""

    def __init__(self, inner: Embedder):
        self.inner = inner
        self.name = inner.name
        self._cache: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def embed_text(self, texts: Sequence[str]) -> List[np.ndarray]:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            vecs = self.inner.embed_text(missing)
            with self._lock:
                self._cache.update(zip(missing, vecs))
        return [self._cache[t] for t in texts]

    def embed(self, text: str) -> np.ndarray:
        return self.embed_text([text])[0]


@dataclass
class MockChat:
    """Chat client that replays a script or answers by prompt-substring rules.

    Rules are tried in order; the first whose substring occurs in the joined
    message text wins. With a script, responses are consumed in order and
    running out raises ``MockScriptExhausted``.
    """

    script: Optional[List[str]] = None
    rules: List[Tuple[str, str]] = field(default_factory=list)
    default: Optional[str] = None
    prompts: List[str] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()
        self._pos = 0
        if self.script is None and not self.rules and self.default is None:
            raise ValueError("mock chat needs a script, rules or a default response")

    def chat(self, messages: Sequence[dict]) -> str:
        if not messages:
            raise ValueError("chat needs at least one message")
        prompt = "\n".join(m["text"] for m in messages)
        with self._lock:
            self.prompts.append(prompt)
            for needle, response in self.rules:
                if needle in prompt:
                    return response
            if self.script is not None and self._pos < len(self.script):
                self._pos += 1
                return self.script[self._pos - 1]
            if self.default is not None:
                return self.default
        raise MockScriptExhausted(f"mock chat script exhausted after {len(self.prompts) - 1} call(s)")

    @classmethod
    def from_file(cls, path: str) -> "MockChat":
        with open(path) as fh:
            spec = json.load(fh)
        return cls(script=spec.get("script"), rules=[tuple(r) for r in spec.get("rules", [])],
                   default=spec.get("default"))


class FailingProvider:
    """Stub that fails on any call; proves a code path makes no model calls."""

    name = "failing"

    def __init__(self):
        self.calls = 0

    def embed_text(self, texts):
        self.calls += 1
        raise ProviderError("network access is forbidden here")

    def chat(self, messages):
        self.calls += 1
        raise ProviderError("network access is forbidden here")


@dataclass
class Providers:
    embedder: CachedEmbedder
    chat: Optional[Any] = None

    @classmethod
    def mock(cls, chat: Optional[Any] = None, dim: int = MOCK_DIM) -> "Providers":
        return cls(CachedEmbedder(MockEmbedder(dim)), chat)


def load_providers(path: Optional[str], transport: Optional[httpx.BaseTransport] = None) -> Providers:
    """Build providers from a JSON config.

    ``{"embed": {...} | "mock", "chat": {...} | {"mock": "rules.json"} | null}``;
    a missing path means mock embeddings and no chat client.
    """
    if path is None:
        return Providers.mock()
    with open(path) as fh:
        spec = json.load(fh)
    base_dir = os.path.dirname(os.path.abspath(path))
    embed_spec = spec.get("embed", "mock")
    if embed_spec == "mock" or (isinstance(embed_spec, dict) and "mock" in embed_spec):
        dim = embed_spec.get("dim", MOCK_DIM) if isinstance(embed_spec, dict) else MOCK_DIM
        embedder: Any = MockEmbedder(dim)
    else:
        embedder = HTTPProvider(ProviderConfig.from_dict(embed_spec), transport=transport)
    chat_spec = spec.get("chat")
    chat: Any = None
    if isinstance(chat_spec, dict) and "mock" in chat_spec:
        mock_path = chat_spec["mock"]
        if isinstance(mock_path, str):
            chat = MockChat.from_file(os.path.join(base_dir, mock_path))
        else:
            chat = MockChat(script=mock_path.get("script"), rules=[tuple(r) for r in mock_path.get("rules", [])],
                            default=mock_path.get("default"))
    elif isinstance(chat_spec, dict):
        chat = HTTPProvider(ProviderConfig.from_dict(chat_spec), transport=transport)
    return Providers(CachedEmbedder(embedder), chat)
