"""Clustered synthetic corpora with ready-made embeddings.

Each cluster is one "question" asked 2-3 times. Its vectors share a cluster
centre inside a low-dimensional signal subspace, while every post also
carries independent noise in the remaining directions. Raw cosine
similarity is dominated by that noise; a learned projection can suppress
it. Vectors are unit-normalized, like the offline hash provider's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, DuplicatePair, Post
from .embedding import EmbeddingStore


@dataclass(frozen=True)
class SyntheticSpec:
    clusters: int = 200
    dim: int = 64
    signal_dim: int = 16
    min_size: int = 2
    max_size: int = 3
    signal_scale: float = 1.0
    jitter: float = 0.35
    noise_scale: float = 0.9
    topics: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.clusters < 1:
            raise ValueError("clusters must be >= 1")
        if not 1 <= self.signal_dim < self.dim:
            raise ValueError(f"signal_dim must be in [1, dim), got {self.signal_dim} with dim {self.dim}")
        if not 2 <= self.min_size <= self.max_size:
            raise ValueError("cluster sizes need 2 <= min_size <= max_size")


def make_corpus(spec: SyntheticSpec = SyntheticSpec()) -> tuple[Corpus, EmbeddingStore]:
    """Return a corpus and a matching store tagged ``synthetic``.

    Within a cluster the lowest id is the original and every other post is
    annotated as its duplicate. With ``topics``, clusters are assigned to
    topics round-robin and every post of a cluster gets that tag.
    """
    rng = np.random.default_rng(spec.seed)
    basis, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
    signal, nuisance = basis[:, :spec.signal_dim], basis[:, spec.signal_dim:]
    posts, pairs, ids, rows = [], [], [], []
    next_id = 1
    for c in range(spec.clusters):
        centre = rng.standard_normal(spec.signal_dim) * spec.signal_scale
        size = int(rng.integers(spec.min_size, spec.max_size + 1))
        tags = (spec.topics[c % len(spec.topics)],) if spec.topics else ()
        members = []
        for _ in range(size):
            sig = centre + spec.jitter * rng.standard_normal(spec.signal_dim)
            noise = spec.noise_scale * rng.standard_normal(spec.dim - spec.signal_dim)
            v = signal @ sig + nuisance @ noise
            pid = next_id
            next_id += 1
            posts.append(Post(pid, f"synthetic post {pid}", f"body of post {pid}", tags,
                              "2022-12-06T00:00:00Z"))
            ids.append(pid)
            rows.append(v / np.linalg.norm(v))
            members.append(pid)
        for dup in members[1:]:
            pairs.append(DuplicatePair(dup, members[0]))
    store = EmbeddingStore(ids, np.array(rows, dtype=np.float32), "synthetic", spec.dim)
    return Corpus.from_posts(posts, pairs), store
