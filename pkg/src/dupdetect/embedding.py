"""Embedding providers and the ``EMB1`` vector store.

Two providers produce vectors for post text:

* ``offline-hash`` hashes lowercase alphanumeric tokens into signed buckets
  and L2-normalizes the counts. It is deterministic and needs no network.
* ``remote`` calls an OpenAI-compatible ``POST {base_url}/embeddings``
  endpoint, batching requests and caching every vector it receives.

Store layout (little-endian)::

    b"EMB1" | u32 dim | u64 count | count x (u64 id | dim x f32)

The provider tag is kept in a JSON sidecar (``<file>.meta.json``) so the
binary layout stays exactly as above.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import httpx
import numpy as np

from .corpus import Corpus, Post
from .errors import ConfigError, EmptyTextError, FormatError, RemoteEmbeddingError

logger = logging.getLogger(__name__)

STORE_MAGIC = b"EMB1"
API_KEY_ENV = "DUPDETECT_API_KEY"
REMOTE_DIM = 1536
CHARS_PER_TOKEN = 4

_TOKEN = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "offline-hash"
    base_url: str = "https://api.openai.com/v1"
    model_name: str = "text-embedding-ada-002"
    max_tokens: int = 8191
    dim: int | None = None
    seed: int = 0
    max_concurrency: int = 4
    retry_limit: int = 3
    request_batch: int = 64
    timeout: float = 60.0
    backoff: float = 0.5

    def __post_init__(self):
        if self.kind == "offline":
            object.__setattr__(self, "kind", "offline-hash")
        if self.kind not in ("remote", "offline-hash"):
            raise ConfigError(f"unknown provider kind {self.kind!r}")
        if self.dim is None:
            object.__setattr__(self, "dim", REMOTE_DIM if self.kind == "remote" else 256)
        if self.max_tokens <= 0 or self.dim <= 0 or self.max_concurrency < 1:
            raise ConfigError("max_tokens and dim must be positive, max_concurrency >= 1")
        if self.request_batch < 1 or self.retry_limit < 0:
            raise ConfigError("request_batch must be >= 1 and retry_limit >= 0")

    @property
    def provider_tag(self) -> str:
        if self.kind == "remote":
            return f"remote:{self.model_name}:dim={self.dim}"
        return f"offline-hash:dim={self.dim}:seed={self.seed}"

    @property
    def char_budget(self) -> int:
        # ceil(chars / 4) <= max_tokens  <=>  chars <= 4 * max_tokens
        return self.max_tokens * CHARS_PER_TOKEN


class EmbeddingStore:
    """Id-keyed float32 matrix. Treated as immutable once built."""

    def __init__(self, ids, vectors, provider_tag: str = "unknown", dim: int | None = None):
        ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
        vectors = np.asarray(vectors, dtype=np.float32)
        if dim is None:
            dim = vectors.shape[1] if vectors.ndim == 2 else 0
        vectors = vectors.reshape(len(ids), dim)
        if dim <= 0 and len(ids):
            raise ValueError("dimension must be positive")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("ids must be unique")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("vectors contain NaN or Inf")
        ids.setflags(write=False)
        vectors.setflags(write=False)
        self.ids = ids
        self.vectors = vectors
        self.dim = int(dim)
        self.provider_tag = provider_tag
        self.failed: tuple[int, ...] = ()
        self._row = {int(i): r for r, i in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, pid):
        return int(pid) in self._row

    def __getitem__(self, pid) -> np.ndarray:
        return self.vectors[self._row[int(pid)]]

    def rows(self, pids: Iterable[int]) -> np.ndarray:
        return np.array([self._row[int(p)] for p in pids], dtype=np.intp)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (self.dim == other.dim and self.provider_tag == other.provider_tag
                and np.array_equal(self.ids, other.ids)
                and self.vectors.tobytes() == other.vectors.tobytes())

    def __repr__(self):
        return f"EmbeddingStore(n={len(self)}, dim={self.dim}, provider_tag={self.provider_tag!r})"

    def merged(self, other: "EmbeddingStore") -> "EmbeddingStore":
        if len(self) and len(other) and self.dim != other.dim:
            raise ConfigError(f"cannot merge stores of dim {self.dim} and {other.dim}")
        fresh = [r for r, i in enumerate(other.ids) if int(i) not in self._row]
        dim = self.dim or other.dim
        ids = np.concatenate([self.ids, other.ids[fresh]])
        vecs = np.concatenate([self.vectors.reshape(-1, dim), other.vectors[fresh].reshape(-1, dim)])
        return EmbeddingStore(ids, vecs, self.provider_tag if len(self) else other.provider_tag, dim)


# ---------------------------------------------------------------------------
# Input construction
# ---------------------------------------------------------------------------


def build_input(post: Post, cfg: ProviderConfig | None = None) -> str:
    """Title and body joined by one newline, truncated to the input budget."""
    if post.is_empty:
        raise EmptyTextError(f"post {post.id} has no text after cleaning")
    budget = (cfg or ProviderConfig()).char_budget
    return f"{post.title}\n{post.body}"[:budget]


def corpus_inputs(corpus: Corpus, cfg: ProviderConfig | None = None) -> tuple[dict[int, str], list[int]]:
    """Embedding inputs for every post with text, plus the skipped ids."""
    texts, skipped = {}, []
    for pid, post in corpus.posts.items():
        try:
            texts[pid] = build_input(post, cfg)
        except EmptyTextError:
            skipped.append(pid)
    if skipped:
        logger.info("skipped %d posts with empty text", len(skipped))
    return texts, skipped


def _as_mapping(texts) -> dict[int, str]:
    if isinstance(texts, Mapping):
        return {int(k): v for k, v in texts.items()}
    return dict(enumerate(texts))


# ---------------------------------------------------------------------------
# Offline provider
# ---------------------------------------------------------------------------


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _bucket_and_sign(token: str, dim: int, seed: int) -> tuple[int, int]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    h = int.from_bytes(digest, "little")
    return h % dim, (1 if (h >> 63) == 0 else -1)


def hash_vector(text: str, dim: int, seed: int = 0) -> np.ndarray:
    tokens = tokenize(text)
    if not tokens:
        raise EmptyTextError("text has no alphanumeric tokens")
    counts = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        bucket, sign = _bucket_and_sign(tok, dim, seed)
        counts[bucket] += sign
    norm = np.sqrt(counts @ counts)
    if norm == 0.0:
        # Every token cancelled out; fall back to unsigned counts.
        for tok in tokens:
            counts[_bucket_and_sign(tok, dim, seed)[0]] += 1.0
        norm = np.sqrt(counts @ counts)
    return counts / norm


def embed_offline(texts, cfg: ProviderConfig | None = None) -> EmbeddingStore:
    """Feature-hash each text. Items without tokens are listed in ``store.failed``."""
    cfg = cfg or ProviderConfig()
    if cfg.kind != "offline-hash":
        raise ConfigError("embed_offline needs an offline-hash provider config")
    texts = _as_mapping(texts)
    ids, rows, failed = [], [], []
    for pid, text in texts.items():
        try:
            rows.append(hash_vector(text, cfg.dim, cfg.seed))
            ids.append(pid)
        except EmptyTextError:
            failed.append(pid)
    store = EmbeddingStore(ids, np.array(rows, dtype=np.float32).reshape(len(ids), cfg.dim), cfg.provider_tag, cfg.dim)
    store.failed = tuple(failed)
    return store


# ---------------------------------------------------------------------------
# Remote provider
# ---------------------------------------------------------------------------

_RETRYABLE = {408, 409, 429, 500, 502, 503, 504}


def _post_batch(client: httpx.Client, cfg: ProviderConfig, batch: list[str]) -> list[list[float]]:
    attempt = 0
    while True:
        try:
            resp = client.post("/embeddings", json={"model": cfg.model_name, "input": batch})
        except httpx.TransportError as exc:
            if attempt >= cfg.retry_limit:
                raise RemoteEmbeddingError(f"transport failure after {attempt + 1} attempts: {exc}") from exc
        else:
            if resp.status_code == 200:
                data = resp.json()["data"]
                data = sorted(data, key=lambda d: d.get("index", 0)) if all("index" in d for d in data) else data
                if len(data) != len(batch):
                    raise RemoteEmbeddingError(f"expected {len(batch)} embeddings, got {len(data)}")
                return [d["embedding"] for d in data]
            if resp.status_code not in _RETRYABLE or attempt >= cfg.retry_limit:
                raise RemoteEmbeddingError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        time.sleep(cfg.backoff * (2 ** attempt))
        attempt += 1


def embed_remote(texts, cfg: ProviderConfig, cache_path=None, client: httpx.Client | None = None) -> EmbeddingStore:
    """Fetch embeddings for ``texts`` (mapping id -> text, or a sequence).

    Vectors already present in ``cache_path`` are reused; only the missing
    ids are requested. The cache is rewritten on exit, including when a
    request fails, so a re-run resumes where the last one stopped.
    """
    if cfg.kind != "remote":
        raise ConfigError("embed_remote needs a remote provider config")
    texts = _as_mapping(texts)
    cached = EmbeddingStore([], np.zeros((0, cfg.dim)), cfg.provider_tag, cfg.dim)
    if cache_path is not None and Path(cache_path).exists():
        cached = load_store(cache_path)
        if cached.dim != cfg.dim or cached.provider_tag not in (cfg.provider_tag, "unknown"):
            raise ConfigError(f"cache {cache_path} was built by {cached.provider_tag} (dim {cached.dim})")
    missing = [pid for pid in texts if pid not in cached]

    if missing:
        if client is None:
            key = os.environ.get(API_KEY_ENV)
            if not key:
                raise ConfigError(f"environment variable {API_KEY_ENV} is not set")
            client = httpx.Client(base_url=cfg.base_url.rstrip("/"), timeout=cfg.timeout,
                                  headers={"Authorization": f"Bearer {key}"})
        batches = [missing[i:i + cfg.request_batch] for i in range(0, len(missing), cfg.request_batch)]
        got_ids: list[int] = []
        got_vecs: list[list[float]] = []
        error = None
        # Requests run concurrently; results are collected here, in batch
        # order, so the cache has a single writer.
        with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool:
            futures = [pool.submit(_post_batch, client, cfg, [texts[p] for p in b]) for b in batches]
            for b, fut in zip(batches, futures):
                try:
                    vecs = fut.result()
                except RemoteEmbeddingError as exc:
                    error = error or exc
                    continue
                for pid, vec in zip(b, vecs):
                    if len(vec) != cfg.dim:
                        error = error or RemoteEmbeddingError(f"id {pid}: got dim {len(vec)}, expected {cfg.dim}")
                        break
                    got_ids.append(pid)
                    got_vecs.append(vec)
        fresh = EmbeddingStore(got_ids, np.array(got_vecs, dtype=np.float32).reshape(len(got_ids), cfg.dim),
                               cfg.provider_tag, cfg.dim)
        cached = EmbeddingStore(cached.ids, cached.vectors, cfg.provider_tag, cfg.dim).merged(fresh)
        if cache_path is not None:
            save_store(cached, cache_path)
        if error is not None:
            raise error

    rows = cached.rows(texts)
    return EmbeddingStore(list(texts), cached.vectors[rows] if len(rows) else np.zeros((0, cfg.dim)),
                          cfg.provider_tag, cfg.dim)


def embed(texts, cfg: ProviderConfig, cache_path=None, client=None) -> EmbeddingStore:
    if cfg.kind == "remote":
        return embed_remote(texts, cfg, cache_path, client)
    return embed_offline(texts, cfg)


def embed_corpus(corpus: Corpus, cfg: ProviderConfig, cache_path=None, client=None) -> EmbeddingStore:
    texts, skipped = corpus_inputs(corpus, cfg)
    store = embed(texts, cfg, cache_path, client)
    store.failed = tuple(sorted(set(store.failed) | set(skipped)))
    return store


# ---------------------------------------------------------------------------
# Binary store format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIQ")


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])


def encode_vectors(magic: bytes, ids, vectors, dim: int) -> bytes:
    recs = np.empty(len(ids), dtype=_record_dtype(dim))
    recs["id"] = ids
    recs["v"] = np.asarray(vectors, dtype=np.float32).reshape(len(ids), dim)
    return _HEADER.pack(magic, dim, len(ids)) + recs.tobytes()


def decode_vectors(magic: bytes, data: bytes, name="<bytes>"):
    if len(data) < _HEADER.size:
        raise FormatError(f"{name}: file shorter than header", offset=len(data))
    got, dim, count = _HEADER.unpack_from(data)
    if got != magic:
        raise FormatError(f"{name}: bad magic {got!r}, expected {magic!r}", offset=0)
    if dim == 0:
        raise FormatError(f"{name}: zero dimension", offset=4)
    expected = _HEADER.size + count * (8 + 4 * dim)
    if len(data) != expected:
        raise FormatError(f"{name}: size {len(data)} does not match dim={dim}, count={count} "
                          f"(expected {expected})", offset=min(len(data), expected))
    recs = np.frombuffer(data, dtype=_record_dtype(dim), offset=_HEADER.size, count=count)
    return dim, recs["id"].copy(), recs["v"].astype(np.float32, copy=True)


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def save_store(store: EmbeddingStore, path) -> None:
    atomic_write(path, encode_vectors(STORE_MAGIC, store.ids, store.vectors, store.dim))
    _meta_path(path).write_text(json.dumps({"provider_tag": store.provider_tag}) + "\n", encoding="utf-8")


def load_store(path) -> EmbeddingStore:
    dim, ids, vecs = decode_vectors(STORE_MAGIC, Path(path).read_bytes(), str(path))
    meta = _meta_path(path)
    tag = json.loads(meta.read_text(encoding="utf-8"))["provider_tag"] if meta.exists() else "unknown"
    return EmbeddingStore(ids, vecs, tag, dim)
