"""Chat-completion and embedding backends.

Two families live here: OpenAI-compatible HTTP clients for real runs, and
deterministic doubles (:class:`ScriptedChat`, :class:`HashEmbedder`) that
make every LLM-dependent code path testable offline.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import httpx
import numpy as np

from .errors import DimensionMismatch, ProviderRefusal, ScriptMiss, TransportError, ValidationError

logger = logging.getLogger(__name__)

GROUP_NOISE = 0.15


@dataclass(frozen=True)
class ChatRequest:
    user: str
    system: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 1024
    # role tags the pipeline stage ("edu", "args", "qa", ...); key is the
    # semantic input scripted mocks are looked up by (defaults to ``user``)
    role: str = ""
    key: str | None = None

    def __post_init__(self):
        if not self.user:
            raise ValidationError("chat request needs a non-empty user message")
        if self.max_output_tokens < 1:
            raise ValidationError("max_output_tokens must be positive")

    @property
    def lookup_key(self) -> str:
        return self.user if self.key is None else self.key


@dataclass
class ProviderPolicy:
    max_concurrent_requests: int = 8
    retry_count: int = 2
    backoff_base_ms: int = 500
    _slots: threading.BoundedSemaphore = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.max_concurrent_requests < 1:
            raise ValidationError("max_concurrent_requests must be positive")
        if self.retry_count < 0:
            raise ValidationError("retry_count must be >= 0")
        self._slots = threading.BoundedSemaphore(self.max_concurrent_requests)

    def call(self, fn, *args):
        """Run ``fn`` inside the in-flight bound, retrying TransportError."""
        attempts = self.retry_count + 1
        for attempt in range(attempts):
            try:
                with self._slots:
                    return fn(*args)
            except TransportError as exc:
                if attempt + 1 >= attempts:
                    raise TransportError(f"{exc} (after {attempts} attempts)", attempts=attempts) from exc
                delay = self.backoff_base_ms * (2 ** attempt) / 1000.0
                logger.warning("transient provider failure (%s), retry %d/%d", exc, attempt + 1, self.retry_count)
                if delay > 0:
                    time.sleep(delay)


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class ChatProvider:
    """Base chat backend. Subclasses implement :meth:`_complete`."""

    name = "chat"

    def __init__(self, policy: ProviderPolicy | None = None):
        self.policy = policy or ProviderPolicy()

    def complete(self, req: ChatRequest) -> str:
        return self.policy.call(self._complete, req)

    def _complete(self, req: ChatRequest) -> str:
        raise NotImplementedError

    def __deepcopy__(self, memo):
        # a provider is a shared client, so estimator clones reuse it
        return self


class ScriptedChat(ChatProvider):
    """Chat double that replays canned responses.

    ``script`` maps a role tag to a table of ``key -> response``; keys are
    either the literal lookup key of the request or its :func:`text_digest`,
    and ``"*"`` acts as the role's default. Role-agnostic entries may also
    sit at the top level as ``key -> string``.

    A response is one of:

    * a string, returned verbatim;
    * a list of strings, served in order (the last one repeats);
    * ``{"when_contains": s, "then": r1, "else": r2}``, choosing on whether
      ``s`` occurs in the request's user message;
    * ``{"select_containing": [s, ...]}``, which answers a numbered-list
      filter prompt with the numbers of the lines containing any ``s``
      (case-insensitive);
    * ``{"error": "transport" | "refusal"}``, raising the matching error.
    """

    name = "scripted"

    def __init__(self, script: Mapping[str, Any], policy: ProviderPolicy | None = None):
        super().__init__(policy or ProviderPolicy(retry_count=0, backoff_base_ms=0))
        self.script = dict(script)
        self.calls: list[ChatRequest] = []
        self._cursor: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | os.PathLike, policy: ProviderPolicy | None = None) -> "ScriptedChat":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh), policy)

    def _resolve(self, req: ChatRequest) -> tuple[str, Any]:
        key = req.lookup_key
        table = self.script.get(req.role)
        if isinstance(table, Mapping):
            for candidate in (key, text_digest(key), "*"):
                if candidate in table:
                    return candidate, table[candidate]
        flat = self.script.get(key)
        if isinstance(flat, str):
            return key, flat
        raise ScriptMiss(f"no scripted response for role={req.role!r} key={key[:80]!r} "
                         f"(digest {text_digest(key)})")

    def _complete(self, req: ChatRequest) -> str:
        with self._lock:
            self.calls.append(req)
            key, response = self._resolve(req)
            if isinstance(response, list):
                if not response:
                    raise ScriptMiss(f"empty response list for {key!r}")
                pos = self._cursor.get((req.role, key), 0)
                self._cursor[(req.role, key)] = pos + 1
                response = response[min(pos, len(response) - 1)]
        if isinstance(response, Mapping):
            if "error" in response:
                if response["error"] == "refusal":
                    raise ProviderRefusal(f"scripted refusal for {key!r}")
                raise TransportError(f"scripted transport failure for {key!r}")
            if "select_containing" in response:
                return _select_lines(req.user, response["select_containing"])
            hit = response["when_contains"] in req.user
            response = response["then"] if hit else response["else"]
        return str(response)


_NUMBERED_LINE = re.compile(r"^(\d+)\. (.*)$", re.MULTILINE)


def _select_lines(prompt: str, needles) -> str:
    needles = [n.lower() for n in ([needles] if isinstance(needles, str) else needles)]
    picked = [int(m.group(1)) for m in _NUMBERED_LINE.finditer(prompt)
              if any(n in m.group(2).lower() for n in needles)]
    return json.dumps({"selected": picked})


class OpenAIChat(ChatProvider):
    """OpenAI-compatible ``/chat/completions`` client."""

    def __init__(self, model: str, base_url: str = "https://api.openai.com/v1", api_key: str | None = None,
                 policy: ProviderPolicy | None = None, timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None):
        super().__init__(policy)
        self.model = model
        self.name = f"openai-chat:{model}"
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers, timeout=timeout,
                                    transport=transport)

    def _complete(self, req: ChatRequest) -> str:
        messages = []
        if req.system:
            messages.append({"role": "system", "content": req.system})
        messages.append({"role": "user", "content": req.user})
        body = {"model": self.model, "messages": messages, "temperature": req.temperature,
                "max_tokens": req.max_output_tokens}
        data = _post_json(self._client, "/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise ProviderRefusal(f"malformed chat response: {str(data)[:200]}") from None


def _post_json(client: httpx.Client, path: str, body: dict) -> dict:
    try:
        resp = client.post(path, json=body)
    except httpx.TransportError as exc:
        raise TransportError(f"{type(exc).__name__}: {exc}") from exc
    if resp.status_code == 429 or resp.status_code >= 500:
        raise TransportError(f"HTTP {resp.status_code} from {path}")
    if resp.status_code >= 400:
        raise ProviderRefusal(f"HTTP {resp.status_code} from {path}: {resp.text[:200]}")
    return resp.json()


class Embedder:
    """Base embedding backend with an exact-string cache.

    Subclasses implement :meth:`_embed` for a batch of uncached texts.
    """

    name = "embedder"

    def __init__(self, dim: int, policy: ProviderPolicy | None = None):
        if dim < 2:
            raise ValidationError("embedding dimension must be >= 2")
        self.dim = int(dim)
        self.policy = policy or ProviderPolicy()
        self.backend_calls = 0
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        """One vector per text, in input order; repeated texts hit the cache."""
        if not texts:
            raise ValidationError("embed_batch needs at least one text")
        for t in texts:
            if not isinstance(t, str) or not t:
                raise ValidationError("cannot embed an empty text")
        with self._lock:
            missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            vectors = self.policy.call(self._counted_embed, missing)
            if len(vectors) != len(missing):
                raise DimensionMismatch(f"backend returned {len(vectors)} vectors for {len(missing)} texts")
            arrs = []
            for v in vectors:
                arr = np.asarray(v, dtype=np.float64)
                if arr.shape != (self.dim,):
                    raise DimensionMismatch(f"expected dimension {self.dim}, backend returned {arr.shape}")
                arr.setflags(write=False)
                arrs.append(arr)
            with self._lock:
                for t, arr in zip(missing, arrs):
                    self._cache.setdefault(t, arr)
        with self._lock:
            return [self._cache[t] for t in texts]

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def _counted_embed(self, texts):
        with self._lock:
            self.backend_calls += 1
        return self._embed(texts)

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        raise NotImplementedError

    def __deepcopy__(self, memo):
        return self


def _hash_unit(material: str, d: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(material.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(d)
    return v / np.linalg.norm(v)


def mock_hash_embed(text: str, d: int, seed: int = 0, group: str | None = None) -> np.ndarray:
    """Deterministic pseudo-random unit vector for ``text``.

    With ``group`` set, the vector is the group's centroid plus an
    orthogonal perturbation of norm 0.15, so any two members of one group
    have cosine >= (1 - 0.15**2) / (1 + 0.15**2) > 0.956.
    """
    if d < 2:
        raise ValidationError("d must be >= 2")
    own = _hash_unit(f"{seed}\x00text\x00{text}", d)
    if group is None:
        return own
    centroid = _hash_unit(f"{seed}\x00group\x00{group}", d)
    noise = own - (own @ centroid) * centroid
    n = np.linalg.norm(noise)
    if n > 0:
        noise = noise / n
    v = centroid + GROUP_NOISE * noise
    return v / np.linalg.norm(v)


class HashEmbedder(Embedder):
    """Offline embedder built on :func:`mock_hash_embed`.

    ``groups`` maps exact texts to planted similarity groups.
    """

    name = "hash"

    def __init__(self, dim: int = 64, seed: int = 0, groups: Mapping[str, str] | None = None,
                 policy: ProviderPolicy | None = None):
        super().__init__(dim, policy or ProviderPolicy(retry_count=0, backoff_base_ms=0))
        self.seed = seed
        self.groups = dict(groups or {})
        self.name = f"hash:d{dim}:s{seed}"

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "HashEmbedder":
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
        return cls(dim=cfg.get("dim", 64), seed=cfg.get("seed", 0), groups=cfg.get("groups"))

    def _embed(self, texts):
        return [mock_hash_embed(t, self.dim, self.seed, self.groups.get(t)) for t in texts]


class OpenAIEmbedder(Embedder):
    """OpenAI-compatible ``/embeddings`` client."""

    def __init__(self, model: str, dim: int, base_url: str = "https://api.openai.com/v1",
                 api_key: str | None = None, policy: ProviderPolicy | None = None,
                 timeout: float = 60.0, batch_size: int = 256,
                 transport: httpx.BaseTransport | None = None):
        super().__init__(dim, policy)
        self.model = model
        self.batch_size = batch_size
        self.name = f"openai-embed:{model}:d{dim}"
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers, timeout=timeout,
                                    transport=transport)

    def _embed(self, texts):
        out = []
        for start in range(0, len(texts), self.batch_size):
            part = texts[start:start + self.batch_size]
            data = _post_json(self._client, "/embeddings",
                              {"model": self.model, "input": part, "dimensions": self.dim})
            rows = sorted(data.get("data", []), key=lambda r: r["index"])
            out.extend(r["embedding"] for r in rows)
        return out


@dataclass(frozen=True)
class ProviderSettings:
    base_url: str = "https://api.openai.com/v1"
    api_key: str | None = None
    chat_model: str = "gpt-4o-mini"
    embed_model: str = "text-embedding-3-small"
    dim: int = 1536
    max_concurrent_requests: int = 8
    retry_count: int = 2
    backoff_base_ms: int = 500

    @classmethod
    def from_env(cls, overrides: Mapping[str, Any] | None = None,
                 environ: Mapping[str, str] | None = None) -> "ProviderSettings":
        env = os.environ if environ is None else environ
        values: dict[str, Any] = {}
        mapping = {
            "base_url": "EVENTMEM_API_BASE",
            "chat_model": "EVENTMEM_CHAT_MODEL",
            "embed_model": "EVENTMEM_EMBED_MODEL",
            "dim": "EVENTMEM_EMBED_DIM",
        }
        for attr, var in mapping.items():
            if env.get(var):
                values[attr] = env[var]
        key = env.get("EVENTMEM_API_KEY") or env.get("OPENAI_API_KEY")
        if key:
            values["api_key"] = key
        values.update(overrides or {})
        for attr in ("dim", "max_concurrent_requests", "retry_count", "backoff_base_ms"):
            if attr in values:
                values[attr] = int(values[attr])
        return cls(**values)

    def build(self) -> tuple[OpenAIChat, OpenAIEmbedder]:
        policy = ProviderPolicy(self.max_concurrent_requests, self.retry_count, self.backoff_base_ms)
        chat = OpenAIChat(self.chat_model, self.base_url, self.api_key, policy)
        emb = OpenAIEmbedder(self.embed_model, self.dim, self.base_url, self.api_key, policy)
        return chat, emb


def load_mock_providers(fixture_dir: str | os.PathLike) -> tuple[ScriptedChat, HashEmbedder]:
    """Scripted chat from ``chat.json`` and hash embedder from ``embeddings.json``."""
    root = Path(fixture_dir)
    chat = ScriptedChat.from_file(root / "chat.json")
    emb_path = root / "embeddings.json"
    embedder = HashEmbedder.from_file(emb_path) if emb_path.exists() else HashEmbedder()
    return chat, embedder
