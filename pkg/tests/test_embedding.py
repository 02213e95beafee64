import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import numpy as np
import pytest

from dupdetect.corpus import Post
from dupdetect.embedding import (API_KEY_ENV, EmbeddingStore, ProviderConfig, build_input, embed_corpus,
                                 embed_offline, embed_remote, hash_vector, load_store, save_store)
from dupdetect.errors import ConfigError, EmptyTextError, FormatError, RemoteEmbeddingError
from dupdetect.corpus import Corpus


class TestBuildInput:
    def test_concatenation(self):
        assert build_input(Post(1, "T", "B")) == "T\nB"

    def test_truncation_keeps_prefix(self):
        post = Post(1, "Title", "x" * 100)
        cfg = ProviderConfig(max_tokens=5)
        out = build_input(post, cfg)
        assert len(out) <= 20 and out == ("Title\n" + "x" * 100)[:20]
        assert -(-len(out) // 4) <= cfg.max_tokens

    def test_empty_post_is_skipped(self):
        with pytest.raises(EmptyTextError):
            build_input(Post(1, "", ""))

    def test_golden(self):
        post = Post(7, "Copy sentence to Clipboard using simple JS", "I want to copy a sentence.\nWith plain JS.")
        assert build_input(post) == "Copy sentence to Clipboard using simple JS\nI want to copy a sentence.\nWith plain JS."


def _oracle_hash(text, dim, seed):
    # Independent re-derivation from the documented hashing rule.
    import re
    vec = [0.0] * dim
    for tok in re.findall(r"[^\W_]+", text.lower()):
        d = hashlib.blake2b(tok.encode(), digest_size=8, key=seed.to_bytes(8, "little")).digest()
        h = int.from_bytes(d, "little")
        vec[h % dim] += -1.0 if h >> 63 else 1.0
    n = sum(v * v for v in vec) ** 0.5
    return [v / n for v in vec]


class TestOffline:
    def test_hello_world_golden(self):
        # blake2b-64 (key = 0 as 8 LE bytes): "hello" -> fd6972830e96ad6e, "world" -> 9df1fcdc41ed7219.
        # Both are 5 mod 8 with the top bit clear, so the vector is e5.
        expected = np.zeros(8)
        expected[5] = 1.0
        np.testing.assert_array_equal(hash_vector("hello world", 8, 0), expected)

    @pytest.mark.parametrize("text,dim,seed", [("the quick brown fox jumps", 16, 1),
                                               ("How do I parse JSON in Python 3?", 32, 7)])
    def test_matches_oracle(self, text, dim, seed):
        np.testing.assert_allclose(hash_vector(text, dim, seed), _oracle_hash(text, dim, seed), atol=1e-15)

    def test_deterministic_and_normalized(self):
        cfg = ProviderConfig(dim=64)
        a = embed_offline(["Some text here", "other words"], cfg)
        b = embed_offline(["Some text here", "other words"], cfg)
        assert a.vectors.tobytes() == b.vectors.tobytes()
        np.testing.assert_allclose(np.linalg.norm(a.vectors, axis=1), 1.0, atol=1e-6)

    def test_order_independent(self):
        cfg = ProviderConfig(dim=32)
        a = embed_offline({1: "alpha beta", 2: "gamma"}, cfg)
        b = embed_offline({2: "gamma", 1: "alpha beta"}, cfg)
        assert a[1].tobytes() == b[1].tobytes() and a[2].tobytes() == b[2].tobytes()

    def test_tokenless_text_flagged(self):
        store = embed_offline({1: "ok text", 2: "!!! ---"}, ProviderConfig(dim=8))
        assert list(store.ids) == [1] and store.failed == (2,)

    def test_cancelling_signs_fall_back_to_counts(self):
        # At dim 1 "a" hashes to +1 and "b" to -1 (checked against the oracle), so the signed sum is zero.
        assert _oracle_hash("a", 1, 0) == [1.0] and _oracle_hash("b", 1, 0) == [-1.0]
        np.testing.assert_array_equal(hash_vector("a b", 1, 0), [1.0])

    def test_case_and_punctuation_ignored(self):
        np.testing.assert_array_equal(hash_vector("Hello, WORLD!", 8, 0), hash_vector("hello world", 8, 0))


def test_embed_corpus_skips_empty_posts():
    corpus = Corpus.from_posts([Post(1, "a title", "body"), Post(2, "", "")])
    store = embed_corpus(corpus, ProviderConfig(dim=16))
    assert list(store.ids) == [1] and store.failed == (2,)


class TestStoreFormat:
    def _store(self, n, dim=16, seed=0):
        rng = np.random.default_rng(seed)
        return EmbeddingStore(rng.choice(10**9, size=n, replace=False), rng.standard_normal((n, dim)), "t", dim)

    def test_round_trip_single(self, tmp_path):
        s = self._store(1)
        save_store(s, tmp_path / "s.emb")
        assert load_store(tmp_path / "s.emb") == s

    def test_round_trip_hash(self, tmp_path):
        s = self._store(1000, dim=24)
        save_store(s, tmp_path / "s.emb")
        data = (tmp_path / "s.emb").read_bytes()
        save_store(load_store(tmp_path / "s.emb"), tmp_path / "t.emb")
        assert hashlib.sha256(data).digest() == hashlib.sha256((tmp_path / "t.emb").read_bytes()).digest()
        assert len(data) == 16 + 1000 * (8 + 4 * 24)
        assert data[:4] == b"EMB1"

    def test_header_layout(self, tmp_path):
        s = EmbeddingStore([3], [[1.0, 2.0]], "t", 2)
        save_store(s, tmp_path / "s.emb")
        data = (tmp_path / "s.emb").read_bytes()
        assert data == (b"EMB1" + (2).to_bytes(4, "little") + (1).to_bytes(8, "little")
                        + (3).to_bytes(8, "little") + np.array([1.0, 2.0], "<f4").tobytes())

    def test_truncated(self, tmp_path):
        save_store(self._store(5), tmp_path / "s.emb")
        data = (tmp_path / "s.emb").read_bytes()
        (tmp_path / "s.emb").write_bytes(data[:-3])
        with pytest.raises(FormatError) as err:
            load_store(tmp_path / "s.emb")
        assert err.value.offset is not None

    def test_bad_magic(self, tmp_path):
        save_store(self._store(2), tmp_path / "s.emb")
        data = bytearray((tmp_path / "s.emb").read_bytes())
        data[:4] = b"LAT1"
        (tmp_path / "s.emb").write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_store(tmp_path / "s.emb")

    def test_invariants(self):
        with pytest.raises(ValueError):
            EmbeddingStore([1, 1], np.ones((2, 3)))
        with pytest.raises(ValueError):
            EmbeddingStore([1], [[np.nan, 1.0]])


# ---------------------------------------------------------------------------
# Remote provider against stubs
# ---------------------------------------------------------------------------


def _canned(text, dim=1536):
    seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")
    return np.random.default_rng(seed).standard_normal(dim).astype(np.float32).tolist()


class StubTransport:
    def __init__(self, fail_first=0, status=200, dim=1536):
        self.requests = []
        self.fail_first = fail_first
        self.status = status
        self.dim = dim
        self.lock = threading.Lock()

    def __call__(self, request: httpx.Request):
        body = json.loads(request.content)
        with self.lock:
            self.requests.append(body)
            n = len(self.requests)
        if n <= self.fail_first:
            return httpx.Response(503, text="busy")
        if self.status != 200:
            return httpx.Response(self.status, text="denied")
        data = [{"index": i, "embedding": _canned(t, self.dim)} for i, t in enumerate(body["input"])]
        return httpx.Response(200, json={"data": data, "model": body["model"]})


def _client(transport):
    return httpx.Client(base_url="http://stub/v1", transport=httpx.MockTransport(transport))


REMOTE = ProviderConfig(kind="remote", base_url="http://stub/v1", backoff=0.0)


class TestRemote:
    def test_empty_input_no_requests(self):
        stub = StubTransport()
        store = embed_remote([], REMOTE, client=_client(stub))
        assert len(store) == 0 and stub.requests == []

    def test_three_texts(self):
        stub = StubTransport()
        texts = {1: "alpha", 2: "beta", 3: "gamma"}
        store = embed_remote(texts, REMOTE, client=_client(stub))
        assert store.dim == 1536 and list(store.ids) == [1, 2, 3]
        for pid, t in texts.items():
            np.testing.assert_array_equal(store[pid], np.array(_canned(t), dtype=np.float32))
        assert stub.requests[0]["model"] == "text-embedding-ada-002"

    def test_cache_hit_means_no_requests(self, tmp_path):
        texts = {i: f"text {i}" for i in range(10)}
        first = StubTransport()
        a = embed_remote(texts, REMOTE, cache_path=tmp_path / "c.emb", client=_client(first))
        second = StubTransport()
        b = embed_remote(texts, REMOTE, cache_path=tmp_path / "c.emb", client=_client(second))
        assert len(first.requests) == 1 and second.requests == []
        assert a == b

    def test_only_missing_ids_requested(self, tmp_path):
        embed_remote({1: "one", 2: "two"}, REMOTE, cache_path=tmp_path / "c.emb", client=_client(StubTransport()))
        stub = StubTransport()
        store = embed_remote({1: "one", 2: "two", 3: "three", 4: "four"}, REMOTE, cache_path=tmp_path / "c.emb",
                             client=_client(stub))
        assert [r["input"] for r in stub.requests] == [["three", "four"]]
        assert len(store) == 4

    def test_batching(self):
        stub = StubTransport()
        cfg = ProviderConfig(kind="remote", request_batch=64, backoff=0.0, max_concurrency=3)
        embed_remote({i: f"t{i}" for i in range(150)}, cfg, client=_client(stub))
        assert sorted(len(r["input"]) for r in stub.requests) == [22, 64, 64]

    def test_transient_errors_retried(self):
        stub = StubTransport(fail_first=2)
        store = embed_remote({1: "x"}, REMOTE, client=_client(stub))
        assert len(store) == 1 and len(stub.requests) == 3

    def test_retry_limit(self):
        stub = StubTransport(fail_first=100)
        with pytest.raises(RemoteEmbeddingError):
            embed_remote({1: "x"}, ProviderConfig(kind="remote", retry_limit=2, backoff=0.0), client=_client(stub))
        assert len(stub.requests) == 3

    def test_non_retryable_keeps_partial_cache(self, tmp_path):
        embed_remote({1: "one"}, REMOTE, cache_path=tmp_path / "c.emb", client=_client(StubTransport()))
        stub = StubTransport(status=401)
        with pytest.raises(RemoteEmbeddingError):
            embed_remote({1: "one", 2: "two"}, REMOTE, cache_path=tmp_path / "c.emb", client=_client(stub))
        assert len(stub.requests) == 1
        cached = load_store(tmp_path / "c.emb")
        assert list(cached.ids) == [1]

    def test_missing_credential(self, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        with pytest.raises(ConfigError):
            embed_remote({1: "x"}, REMOTE)

    def test_wrong_dimension_rejected(self):
        with pytest.raises(RemoteEmbeddingError):
            embed_remote({1: "x"}, REMOTE, client=_client(StubTransport(dim=10)))


class _Handler(BaseHTTPRequestHandler):
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.path, self.headers.get("Authorization"), body))
        payload = json.dumps({"data": [{"index": i, "embedding": _canned(t)} for i, t in enumerate(body["input"])]})
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload.encode())

    def log_message(self, *args):
        pass


def test_real_http_stub_server(monkeypatch):
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        monkeypatch.setenv(API_KEY_ENV, "sk-test")
        cfg = ProviderConfig(kind="remote", base_url=f"http://127.0.0.1:{server.server_port}/v1")
        store = embed_remote(["a", "b", "c"], cfg)
        assert store.vectors.shape == (3, 1536)
        path, auth, body = _Handler.seen[-1]
        assert path == "/v1/embeddings" and auth == "Bearer sk-test"
        assert body == {"model": "text-embedding-ada-002", "input": ["a", "b", "c"]}
    finally:
        server.shutdown()
