"""Top-N accuracy, AUC and multi-setting comparison tables."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .corpus import Corpus, DuplicatePair, SplitSpec, filter_by_tag
from .embedding import EmbeddingStore
from .rank import LatentIndex, project, top_k
from .refine import TrainingConfig, train

logger = logging.getLogger(__name__)

DEFAULT_NS = (1, 3, 5, 10, 30)
DEFAULT_NEG_RATIO = 9


@dataclass
class MetricsReport:
    top_n: dict[int, float]
    auc: float | None
    query_count: int
    pool_size: int
    excluded_queries: int = 0
    config_echo: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["top_n"] = {str(k): v for k, v in self.top_n.items()}
        return d


def _originals_by_query(test_pairs: Iterable[DuplicatePair]) -> dict[int, list[int]]:
    by_query = defaultdict(list)
    for p in test_pairs:
        by_query[p.dup_id].append(p.orig_id)
    return dict(by_query)


def top_n_accuracy(index: LatentIndex, test_pairs: Sequence[DuplicatePair], Ns: Sequence[int] = DEFAULT_NS,
                   return_counts: bool = False):
    """Fraction of test queries with a labelled original among their top N.

    Queries are the distinct duplicate ids of ``test_pairs``; the candidate
    pool is every other post of ``index``. Queries that are not indexed, or
    none of whose originals are, are excluded and counted.
    """
    if not test_pairs:
        raise ValueError("empty test set")
    Ns = sorted(set(int(n) for n in Ns))
    if Ns[0] < 1:
        raise ValueError("every N must be >= 1")
    hits = dict.fromkeys(Ns, 0)
    scored = excluded = 0
    for query, originals in sorted(_originals_by_query(test_pairs).items()):
        originals = {o for o in originals if o in index}
        if query not in index or not originals:
            excluded += 1
            continue
        scored += 1
        ranked = top_k(index, query, Ns[-1]).ids
        first = next((r for r, cid in enumerate(ranked, start=1) if cid in originals), None)
        if first is not None:
            for n in Ns:
                hits[n] += first <= n
    if excluded:
        logger.info("excluded %d queries whose duplicates are missing from the pool", excluded)
    acc = {n: (hits[n] / scored if scored else 0.0) for n in Ns}
    return (acc, scored, excluded) if return_counts else acc


def auc(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> float:
    """Mann-Whitney AUC; ties count one half."""
    pos = np.asarray(scores_pos, dtype=np.float64).reshape(-1)
    neg = np.asarray(scores_neg, dtype=np.float64).reshape(-1)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("auc needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    n_pos = len(pos)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * len(neg)))


def sample_negative_pairs(index: LatentIndex, count: int, known_pairs: Iterable[DuplicatePair], seed: int = 0):
    """Uniform random unordered post pairs that are not annotated duplicates."""
    n = len(index)
    known = {frozenset((p.dup_id, p.orig_id)) for p in known_pairs}
    total = n * (n - 1) // 2
    known_in_index = sum(1 for k in known if all(i in index for i in k))
    if n < 2 or total - known_in_index <= 0:
        raise ValueError(f"cannot sample non-duplicate pairs from {n} posts")
    rng = np.random.default_rng([seed, 3])
    out = []
    while len(out) < count:
        i, j = rng.integers(n, size=2)
        if i == j:
            continue
        a, b = int(index.ids[i]), int(index.ids[j])
        if frozenset((a, b)) in known:
            continue
        out.append((a, b))
    return out


def pair_scores(index: LatentIndex, pairs) -> np.ndarray:
    rows_a = np.array([index.row(a) for a, _ in pairs], dtype=np.intp)
    rows_b = np.array([index.row(b) for _, b in pairs], dtype=np.intp)
    A = index.vectors[rows_a].astype(np.float64)
    B = index.vectors[rows_b].astype(np.float64)
    return np.einsum("ij,ij->i", A, B)


def pairwise_auc_eval(index: LatentIndex, test_pairs: Sequence[DuplicatePair], neg_ratio: int = DEFAULT_NEG_RATIO,
                      seed: int = 0, known_pairs: Iterable[DuplicatePair] | None = None) -> float:
    """AUC separating test duplicate pairs from sampled non-duplicate pairs.

    ``known_pairs`` (default: ``test_pairs``) lists every annotation that
    must not be drawn as a negative.
    """
    if neg_ratio < 1:
        raise ValueError("neg_ratio must be >= 1")
    pos = [(p.dup_id, p.orig_id) for p in test_pairs if p.dup_id in index and p.orig_id in index]
    if not pos:
        raise ValueError("no test pair has both posts in the index")
    known = list(test_pairs) if known_pairs is None else list(known_pairs)
    neg = sample_negative_pairs(index, neg_ratio * len(pos), known, seed)
    return auc(pair_scores(index, pos), pair_scores(index, neg))


def evaluate_index(index: LatentIndex, split: SplitSpec, Ns=DEFAULT_NS, neg_ratio=DEFAULT_NEG_RATIO,
                   seed: int = 0, known_pairs=None, config_echo: str = "") -> MetricsReport:
    acc, scored, excluded = top_n_accuracy(index, split.test_pairs, Ns, return_counts=True)
    known = list(split.train_pairs) + list(split.test_pairs) if known_pairs is None else known_pairs
    try:
        area = pairwise_auc_eval(index, split.test_pairs, neg_ratio, seed, known)
    except ValueError as exc:
        logger.warning("AUC not computed: %s", exc)
        area = None
    return MetricsReport(acc, area, scored, len(index), excluded, config_echo)


# ---------------------------------------------------------------------------
# Setting comparisons
# ---------------------------------------------------------------------------


@dataclass
class ComparisonTable:
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    losses: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"settings": {name: r.to_dict() for name, r in self.reports.items()},
               "epoch_losses": self.losses}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Rows are N, columns are settings, cells are percentages."""
        names = list(self.reports)
        Ns = sorted({n for r in self.reports.values() for n in r.top_n})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["top_n", *names])
        for n in Ns:
            writer.writerow([n, *(f"{100 * self.reports[s].top_n[n]:.1f}" for s in names)])
        writer.writerow(["auc", *("" if self.reports[s].auc is None else f"{self.reports[s].auc:.4f}"
                                  for s in names)])
        return buf.getvalue()


def _config_echo(cfg: TrainingConfig | None) -> str:
    return "raw" if cfg is None else json.dumps(asdict(cfg), sort_keys=True)


def compare_settings(corpus: Corpus, split: SplitSpec, store: EmbeddingStore,
                     configs: Mapping[str, TrainingConfig | None], Ns=DEFAULT_NS, seed: int = 0,
                     threads: int | None = 1) -> ComparisonTable:
    """Evaluate each named setting on the same split and candidate pool.

    A ``None`` config ranks the normalized input vectors with no head.
    """
    table = ComparisonTable()
    for name, cfg in configs.items():
        if cfg is None:
            index = project(store, None)
        else:
            head, log = train(corpus, split, store, cfg, threads=threads)
            index = project(store, head)
            table.losses[name] = log.epoch_losses
        table.reports[name] = evaluate_index(index, split, Ns, seed=seed, config_echo=_config_echo(cfg))
    return table


def batch_size_sweep(corpus, split, store, sizes=(8, 16, 32, 64), base: TrainingConfig | None = None,
                     Ns=DEFAULT_NS, seed: int = 0, threads: int | None = 1) -> ComparisonTable:
    base = base or TrainingConfig(loss="mnr")
    configs = {f"batch_{n}": replace(base, batch_size=n) for n in sizes}
    return compare_settings(corpus, split, store, configs, Ns, seed, threads)


@dataclass
class TopicResult:
    topic: str
    in_topic: MetricsReport
    general: MetricsReport
    train_pairs: int


def topic_study(corpus: Corpus, split: SplitSpec, store: EmbeddingStore, topics: Sequence[str],
                config: TrainingConfig | None = None, Ns=DEFAULT_NS, seed: int = 0,
                threads: int | None = 1) -> list[TopicResult]:
    """In-topic versus general-topic training, scored on each topic's test pairs.

    The general head is trained once on the whole training split. Each
    in-topic head starts from scratch on the training pairs whose posts both
    carry the topic tag. Both are evaluated over the topic's posts only.
    """
    config = config or TrainingConfig()
    general_head, _ = train(corpus, split, store, config, threads=threads)
    results = []
    for topic in topics:
        sub = filter_by_tag(corpus, topic)
        sub_split = split.restrict(sub)
        sub_store = EmbeddingStore([], np.zeros((0, store.dim)), store.provider_tag, store.dim)
        ids = [pid for pid in sub.posts if pid in store]
        if ids:
            sub_store = EmbeddingStore(ids, store.vectors[store.rows(ids)], store.provider_tag, store.dim)
        head, _ = train(sub, sub_split, sub_store, config, threads=threads)
        known = list(sub_split.train_pairs) + list(sub_split.test_pairs)
        in_rep = evaluate_index(project(sub_store, head), sub_split, Ns, seed=seed, known_pairs=known,
                                config_echo=f"in-topic:{topic}")
        gen_rep = evaluate_index(project(sub_store, general_head), sub_split, Ns, seed=seed, known_pairs=known,
                                 config_echo=f"general:{topic}")
        results.append(TopicResult(topic, in_rep, gen_rep, len(sub_split.train_pairs)))
    return results


def topic_table_csv(results: Sequence[TopicResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    Ns = sorted(results[0].in_topic.top_n) if results else list(DEFAULT_NS)
    writer.writerow(["topic", *(f"top_{n}_in_topic" for n in Ns), *(f"top_{n}_general" for n in Ns)])
    for r in results:
        writer.writerow([r.topic, *(f"{100 * r.in_topic.top_n[n]:.1f}" for n in Ns),
                         *(f"{100 * r.general.top_n[n]:.1f}" for n in Ns)])
    return buf.getvalue()
