"""Latent index construction and exact cosine top-k queries.

Index layout (little-endian)::

    b"LAT1" | u32 dim | u64 count | count x (u64 id | dim x f32)
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .embedding import (EmbeddingStore, ProviderConfig, atomic_write, decode_vectors, embed,
                        encode_vectors)
from .errors import ConfigError, EmptyTextError, NotFoundError
from .refine import ProjectionHead

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"LAT1"


class LatentIndex:
    """Unit-normalized latent vectors keyed by post id. Immutable."""

    def __init__(self, ids, vectors, provider_tag: str = "unknown", dim: int | None = None):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        vectors = np.asarray(vectors, dtype=np.float32)
        if dim is None:
            dim = vectors.shape[1] if vectors.ndim == 2 else 0
        vectors = vectors.reshape(len(ids), dim)
        if len(np.unique(ids)) != len(ids):
            raise ValueError("ids must be unique")
        ids.setflags(write=False)
        vectors.setflags(write=False)
        self.ids = ids
        self.vectors = vectors
        self.dim = int(dim)
        self.provider_tag = provider_tag
        self.rejected: tuple[int, ...] = ()
        self._row = {int(i): r for r, i in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, pid):
        return int(pid) in self._row

    def row(self, pid) -> int:
        try:
            return self._row[int(pid)]
        except KeyError:
            raise NotFoundError(f"post {pid} is not in the index") from None

    def __getitem__(self, pid) -> np.ndarray:
        return self.vectors[self.row(pid)]

    def __eq__(self, other):
        if not isinstance(other, LatentIndex):
            return NotImplemented
        return (self.dim == other.dim and np.array_equal(self.ids, other.ids)
                and self.vectors.tobytes() == other.vectors.tobytes())

    def __repr__(self):
        return f"LatentIndex(n={len(self)}, dim={self.dim})"

    def scores(self, query_vec) -> np.ndarray:
        """Inner products of every stored vector with ``query_vec`` in float64."""
        return self.vectors.astype(np.float64) @ np.asarray(query_vec, dtype=np.float64)


def _normalize(Z):
    norms = np.sqrt(np.einsum("ij,ij->i", Z, Z))
    ok = norms > 0.0
    out = np.zeros_like(Z)
    out[ok] = Z[ok] / norms[ok, None]
    return out, ok


def project(store: EmbeddingStore, head: ProjectionHead | None = None) -> LatentIndex:
    """Map every stored vector through ``head`` and normalize.

    ``head=None`` normalizes the raw vectors, which is how the unrefined
    baseline is ranked. Vectors that map to zero are left out and listed in
    ``index.rejected``.
    """
    if head is not None and store.dim and store.dim != head.in_dim:
        raise ConfigError(f"store dim {store.dim} does not match head input dim {head.in_dim}")
    X = store.vectors.astype(np.float64)
    Z = head(X) if head is not None else X
    dim = head.out_dim if head is not None else store.dim
    Z = Z.reshape(len(store), dim)
    U, ok = _normalize(Z)
    index = LatentIndex(store.ids[ok].astype(np.int64), U[ok], store.provider_tag, dim)
    index.rejected = tuple(int(i) for i in store.ids[~ok])
    if index.rejected:
        logger.warning("%d vectors projected to zero and were rejected", len(index.rejected))
    return index


@dataclass(frozen=True)
class RankedList:
    query_id: int | None
    hits: tuple[tuple[int, float], ...]

    @property
    def ids(self) -> list[int]:
        return [h[0] for h in self.hits]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(["query_id", "rank", "candidate_id", "score"])
        qid = "" if self.query_id is None else self.query_id
        for rank, (cid, score) in enumerate(self.hits, start=1):
            writer.writerow([qid, rank, cid, f"{score:.9g}"])
        return buf.getvalue()


def _select(index: LatentIndex, scores: np.ndarray, k: int, mask: np.ndarray | None) -> tuple:
    cand = np.flatnonzero(mask) if mask is not None else np.arange(len(index))
    if len(cand) == 0:
        return ()
    s = scores[cand]
    if k < len(cand):
        # Keep everything tied with the k-th best so the id tie-break is exact.
        kth = np.partition(s, len(s) - k)[len(s) - k]
        keep = s >= kth
        cand, s = cand[keep], s[keep]
    order = np.lexsort((index.ids[cand], -s))[:k]
    return tuple((int(index.ids[cand[i]]), float(s[i])) for i in order)


def _tag_mask(index, tag_filter, tags):
    if tags is None:
        raise ConfigError("a tag filter needs the post tags (pass tags=corpus tags)")
    wanted = {t.strip().lower() for t in tag_filter}
    return np.array([bool(wanted & set(tags.get(int(pid), ()))) for pid in index.ids], dtype=bool)


def top_k(index: LatentIndex, query_id: int, k: int, tag_filter: Iterable[str] | None = None,
          tags: Mapping[int, Iterable[str]] | None = None) -> RankedList:
    """Exact top-``k`` neighbours of an indexed post, excluding the post itself.

    Ties are broken by ascending candidate id. With ``tag_filter`` only
    candidates sharing at least one tag with the filter (looked up in
    ``tags``) are ranked.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    row = index.row(query_id)
    scores = index.scores(index.vectors[row])
    mask = np.ones(len(index), dtype=bool) if tag_filter is None else _tag_mask(index, tag_filter, tags)
    mask[row] = False
    return RankedList(int(query_id), _select(index, scores, k, mask))


def top_k_vector(index: LatentIndex, query_vec, k: int, exclude: int | None = None) -> RankedList:
    q = np.asarray(query_vec, dtype=np.float64)
    n = np.sqrt(q @ q)
    if n == 0.0:
        raise ValueError("query vector has zero norm")
    mask = None
    if exclude is not None and exclude in index:
        mask = np.ones(len(index), dtype=bool)
        mask[index.row(exclude)] = False
    return RankedList(exclude, _select(index, index.scores(q / n), k, mask))


def top_k_text(index: LatentIndex, head: ProjectionHead | None, provider: ProviderConfig, text: str, k: int,
               client=None) -> RankedList:
    """Embed free text, project it and rank the whole index against it."""
    if provider.provider_tag != index.provider_tag:
        raise ConfigError(f"index was built from {index.provider_tag!r}, query provider is {provider.provider_tag!r}")
    if not text or not text.strip():
        raise EmptyTextError("query text is empty")
    store = embed([text], provider, client=client)
    if len(store) == 0:
        raise EmptyTextError("query text has no embeddable tokens")
    x = store.vectors[0].astype(np.float64)
    z = head(x[None, :])[0] if head is not None else x
    return top_k_vector(index, z, k)


# ---------------------------------------------------------------------------
# Index file
# ---------------------------------------------------------------------------


def save_index(index: LatentIndex, path) -> None:
    atomic_write(path, encode_vectors(INDEX_MAGIC, index.ids, index.vectors, index.dim))
    Path(str(path) + ".meta.json").write_text(json.dumps({"provider_tag": index.provider_tag}) + "\n",
                                              encoding="utf-8")


def load_index(path) -> LatentIndex:
    dim, ids, vecs = decode_vectors(INDEX_MAGIC, Path(path).read_bytes(), str(path))
    meta = Path(str(path) + ".meta.json")
    tag = json.loads(meta.read_text(encoding="utf-8"))["provider_tag"] if meta.exists() else "unknown"
    return LatentIndex(ids.astype(np.int64), vecs, tag, dim)
