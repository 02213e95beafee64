"""Weight-shared projection head trained with triplet or MNR loss.

Every branch of the Siamese pass goes through the same affine map
``f(x) = W x + b``; the head owns exactly one ``W`` and one ``b``. Latents
are compared by cosine similarity. Gradients are derived by hand: the
backward pass through row normalization is

    dz = (du - <du, u> u) / |z|,   u = z / |z|

and everything else is a plain matrix product.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .corpus import Corpus, DuplicatePair, SplitSpec
from .embedding import EmbeddingStore, atomic_write
from .errors import DomainError, FormatError

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"SIA1"
LOSSES = ("triplet", "mnr")


# ---------------------------------------------------------------------------
# Head and configuration
# ---------------------------------------------------------------------------


@dataclass
class ProjectionHead:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64, ndmin=2)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        if self.W.shape[0] != self.b.shape[0]:
            raise ValueError(f"W has {self.W.shape[0]} rows but b has {self.b.shape[0]} entries")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("head parameters contain NaN or Inf")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def __call__(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W.T + self.b

    @classmethod
    def init(cls, in_dim: int, out_dim: int = 50, seed: int = 0) -> "ProjectionHead":
        """Fan-in uniform weights, zero bias, both representable in float32."""
        bound = 1.0 / np.sqrt(in_dim)
        W = np.random.default_rng(seed).uniform(-bound, bound, size=(out_dim, in_dim))
        return cls(W.astype(np.float32), np.zeros(out_dim, dtype=np.float32))

    def rounded(self) -> "ProjectionHead":
        return ProjectionHead(self.W.astype(np.float32), self.b.astype(np.float32))

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.W.copy(), self.b.copy())

    def __eq__(self, other):
        if not isinstance(other, ProjectionHead):
            return NotImplemented
        return np.array_equal(self.W, other.W) and np.array_equal(self.b, other.b)


@dataclass(frozen=True)
class TrainingConfig:
    loss: str = "mnr"
    margin: float = 0.5
    scale: float = 20.0
    batch_size: int = 64
    epochs: int = 10
    learning_rate: float = 0.5
    seed: int = 0
    out_dim: int = 50

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        min_batch = 2 if self.loss == "mnr" else 1
        if self.batch_size < min_batch:
            raise ValueError(f"batch_size must be >= {min_batch} for {self.loss} loss")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.out_dim < 1:
            raise ValueError("out_dim must be >= 1")


# ---------------------------------------------------------------------------
# Cosine geometry and losses
# ---------------------------------------------------------------------------


def _norm(v) -> float:
    n = float(np.sqrt(np.dot(v, v)))
    if n == 0.0:
        raise DomainError("cosine similarity is undefined for a zero-norm vector")
    return n


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    s = float(np.dot(u, v)) / (_norm(u) * _norm(v))
    return min(1.0, max(-1.0, s))


def cosine_distance(u, v) -> float:
    return 1.0 - cosine_similarity(u, v)


def triplet_loss(anchor, positive, negative, margin: float = 0.5) -> float:
    return max(0.0, cosine_distance(anchor, positive) - cosine_distance(anchor, negative) + margin)


def _unit_rows(Z):
    norms = np.sqrt(np.einsum("ij,ij->i", Z, Z))
    if np.any(norms == 0.0):
        raise DomainError(f"zero-norm latent in row {int(np.argmin(norms))}")
    return Z / norms[:, None], norms


def _unit_rows_backward(dU, U, norms):
    return (dU - np.einsum("ij,ij->i", dU, U)[:, None] * U) / norms[:, None]


def _logsumexp_rows(S):
    m = S.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(S - m).sum(axis=1, keepdims=True)))[:, 0]


def mnr_loss(anchor_latents, positive_latents, scale: float = 20.0) -> float:
    """Mean cross-entropy of each anchor against the in-batch positives."""
    A = np.atleast_2d(np.asarray(anchor_latents, dtype=np.float64))
    P = np.atleast_2d(np.asarray(positive_latents, dtype=np.float64))
    if A.shape != P.shape or len(A) == 0:
        raise DomainError(f"anchor and positive batches must match and be non-empty, got {A.shape} and {P.shape}")
    Ua, _ = _unit_rows(A)
    Up, _ = _unit_rows(P)
    S = scale * (Ua @ Up.T)
    return float(np.mean(_logsumexp_rows(S) - np.diag(S)))


def _triplet_terms(config, A, P, N, want_grad):
    Za, Zp, Zn = A, P, N
    Ua, na = _unit_rows(Za)
    Up, np_ = _unit_rows(Zp)
    Un, nn = _unit_rows(Zn)
    s_ap = np.einsum("ij,ij->i", Ua, Up)
    s_an = np.einsum("ij,ij->i", Ua, Un)
    hinge = (1.0 - s_ap) - (1.0 - s_an) + config.margin
    n = len(Za)
    loss = float(np.maximum(hinge, 0.0).sum() / n)
    if not want_grad:
        return loss, None
    g = (hinge > 0.0).astype(np.float64)[:, None] / n
    dUa = g * (Un - Up)
    dUp = -g * Ua
    dUn = g * Ua
    return loss, (_unit_rows_backward(dUa, Ua, na), _unit_rows_backward(dUp, Up, np_),
                  _unit_rows_backward(dUn, Un, nn))


def _mnr_terms(config, A, P, want_grad):
    Ua, na = _unit_rows(A)
    Up, np_ = _unit_rows(P)
    S = config.scale * (Ua @ Up.T)
    lse = _logsumexp_rows(S)
    n = len(A)
    loss = float(np.mean(lse - np.diag(S)))
    if not want_grad:
        return loss, None
    G = np.exp(S - lse[:, None])
    G[np.diag_indices(n)] -= 1.0
    G *= config.scale / n
    dUa = G @ Up
    dUp = G.T @ Ua
    return loss, (_unit_rows_backward(dUa, Ua, na), _unit_rows_backward(dUp, Up, np_))


def loss_and_gradients(batch: Sequence[np.ndarray], head: ProjectionHead, config: TrainingConfig):
    """Loss of one batch of raw input vectors and its exact parameter gradients.

    ``batch`` holds ``(anchors, positives)`` for MNR or
    ``(anchors, positives, negatives)`` for triplet, each ``n x in_dim``.
    Returns ``(loss, dW, db)``.
    """
    inputs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in batch]
    expected = 3 if config.loss == "triplet" else 2
    if len(inputs) != expected:
        raise DomainError(f"{config.loss} loss needs {expected} input blocks, got {len(inputs)}")
    if len({x.shape for x in inputs}) != 1 or len(inputs[0]) == 0:
        raise DomainError("batch blocks must be non-empty and equally shaped")
    latents = [head(x) for x in inputs]
    if config.loss == "triplet":
        loss, dZ = _triplet_terms(config, *latents, want_grad=True)
    else:
        loss, dZ = _mnr_terms(config, *latents, want_grad=True)
    dW = sum(dz.T @ x for dz, x in zip(dZ, inputs))
    db = sum(dz.sum(axis=0) for dz in dZ)
    return loss, dW, db


def gradients(batch, head: ProjectionHead, config: TrainingConfig):
    _, dW, db = loss_and_gradients(batch, head, config)
    return dW, db


def batch_loss(batch, head: ProjectionHead, config: TrainingConfig) -> float:
    inputs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in batch]
    latents = [head(x) for x in inputs]
    if config.loss == "triplet":
        return _triplet_terms(config, *latents, want_grad=False)[0]
    return _mnr_terms(config, *latents, want_grad=False)[0]


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TripletSample:
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class PairBatch:
    anchors: tuple[int, ...]
    positives: tuple[int, ...]


def _train_pairs(split) -> tuple[DuplicatePair, ...]:
    return tuple(split.train_pairs) if isinstance(split, SplitSpec) else tuple(split)


def sample_triplets(corpus: Corpus, split, store: EmbeddingStore | None = None,
                    seed: int = 0, epoch: int = 0) -> Iterator[TripletSample]:
    """One epoch of triplets: train pairs in shuffled order, random negatives.

    The anchor is the closed duplicate and the positive its original. The
    negative is drawn uniformly from posts (with a vector in ``store``, when
    given) that are neither the anchor nor annotated as its duplicate.
    """
    pairs = _train_pairs(split)
    if not pairs:
        raise ValueError("no training pairs")
    pool = np.array(sorted(pid for pid in corpus.posts if store is None or pid in store), dtype=np.int64)
    if len(pool) < 3:
        raise ValueError(f"need at least 3 posts to sample triplets, have {len(pool)}")
    pool_set = set(pool.tolist())
    linked = corpus.linked()
    rng = np.random.default_rng([seed, epoch, 1])
    for i in rng.permutation(len(pairs)):
        pair = pairs[i]
        forbidden = linked[pair.dup_id] | {pair.dup_id, pair.orig_id}
        if len(pool_set - forbidden) == 0:
            raise ValueError(f"post {pair.dup_id} has no eligible negative")
        while True:
            neg = int(pool[rng.integers(len(pool))])
            if neg not in forbidden:
                break
        yield TripletSample(pair.dup_id, pair.orig_id, neg)


def sample_pair_batches(split, batch_size: int, seed: int = 0, epoch: int = 0) -> Iterator[PairBatch]:
    """One epoch of shuffled, non-overlapping batches; the short tail is dropped."""
    pairs = _train_pairs(split)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size > len(pairs):
        raise ValueError(f"batch_size {batch_size} exceeds the {len(pairs)} training pairs")
    order = np.random.default_rng([seed, epoch, 2]).permutation(len(pairs))
    for start in range(0, len(pairs) - batch_size + 1, batch_size):
        chunk = [pairs[i] for i in order[start:start + batch_size]]
        yield PairBatch(tuple(p.dup_id for p in chunk), tuple(p.orig_id for p in chunk))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainingLog:
    config: dict
    epoch_losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    corpus_hash: str = ""
    threads: int | None = 1
    train_pairs: int = 0
    dropped_pairs: int = 0
    steps: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _epoch_batches(corpus, pairs, store, config, epoch):
    if config.loss == "mnr":
        for pb in sample_pair_batches(pairs, config.batch_size, config.seed, epoch):
            yield store.vectors[store.rows(pb.anchors)], store.vectors[store.rows(pb.positives)]
        return
    if config.batch_size > len(pairs):
        raise ValueError(f"batch_size {config.batch_size} exceeds the {len(pairs)} training pairs")
    triplets = list(sample_triplets(corpus, pairs, store, config.seed, epoch))
    for start in range(0, len(triplets) - config.batch_size + 1, config.batch_size):
        chunk = triplets[start:start + config.batch_size]
        yield tuple(store.vectors[store.rows([getattr(t, role) for t in chunk])]
                    for role in ("anchor", "positive", "negative"))


def train(corpus: Corpus, split, store: EmbeddingStore, config: TrainingConfig | None = None,
          threads: int | None = 1) -> tuple[ProjectionHead, TrainingLog]:
    """Fit a projection head by minibatch SGD.

    Pairs whose posts have no vector in ``store`` (empty text) are dropped
    and counted. The returned parameters are rounded to float32 so the
    in-memory head matches what :func:`save_head` writes.
    """
    config = config or TrainingConfig()
    t0 = time.perf_counter()
    all_pairs = _train_pairs(split)
    pairs = tuple(p for p in all_pairs if p.dup_id in store and p.orig_id in store)
    log = TrainingLog(config=asdict(config), corpus_hash=corpus.content_hash(), threads=threads,
                      train_pairs=len(pairs), dropped_pairs=len(all_pairs) - len(pairs))
    if log.dropped_pairs:
        logger.warning("dropped %d training pairs without embeddings", log.dropped_pairs)
    head = ProjectionHead.init(store.dim, config.out_dim, config.seed)
    W, b = head.W.copy(), head.b.copy()
    with threadpool_limits(limits=threads):
        for epoch in range(config.epochs):
            losses = []
            for batch in _epoch_batches(corpus, pairs, store, config, epoch):
                loss, dW, db = loss_and_gradients(batch, ProjectionHead(W, b), config)
                W -= config.learning_rate * dW
                b -= config.learning_rate * db
                losses.append(loss)
            log.steps += len(losses)
            log.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
            logger.info("epoch %d/%d mean loss %.6f", epoch + 1, config.epochs, log.epoch_losses[-1])
    log.wall_time = time.perf_counter() - t0
    out = ProjectionHead(W, b).rounded() if config.epochs else head
    return out, log


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------

_MODEL_HEADER = struct.Struct("<4sII")


def head_to_bytes(head: ProjectionHead) -> bytes:
    return (_MODEL_HEADER.pack(MODEL_MAGIC, head.in_dim, head.out_dim)
            + head.W.astype("<f4").tobytes(order="C") + head.b.astype("<f4").tobytes())


def head_from_bytes(data: bytes, name="<bytes>") -> ProjectionHead:
    if len(data) < _MODEL_HEADER.size:
        raise FormatError(f"{name}: file shorter than header", offset=len(data))
    magic, in_dim, out_dim = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {MODEL_MAGIC!r}", offset=0)
    if in_dim == 0 or out_dim == 0:
        raise FormatError(f"{name}: zero dimension", offset=4)
    expected = _MODEL_HEADER.size + 4 * out_dim * (in_dim + 1)
    if len(data) != expected:
        raise FormatError(f"{name}: size {len(data)} does not match {out_dim}x{in_dim} head "
                          f"(expected {expected})", offset=min(len(data), expected))
    W = np.frombuffer(data, dtype="<f4", count=out_dim * in_dim, offset=_MODEL_HEADER.size)
    b = np.frombuffer(data, dtype="<f4", count=out_dim, offset=_MODEL_HEADER.size + 4 * out_dim * in_dim)
    return ProjectionHead(W.reshape(out_dim, in_dim), b)


def save_head(head: ProjectionHead, path) -> None:
    atomic_write(path, head_to_bytes(head))


def load_head(path) -> ProjectionHead:
    return head_from_bytes(Path(path).read_bytes(), str(path))
