"""Posts, duplicate-pair annotations, cleaning, census statistics and splits.

Interchange formats:

* ``posts.jsonl``: one object per line with ``id``, ``title``, ``body``,
  ``tags`` and ``created`` (``YYYY-MM-DDThh:mm:ssZ``).
* ``pairs.csv``: header ``dup_id,orig_id`` followed by one directed pair per
  line (the closed duplicate first, the original second).
"""

from __future__ import annotations

import csv
import hashlib
import html
import io
import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError, IngestError

logger = logging.getLogger(__name__)

CORPUS_FORMAT = "dupdetect-corpus/1"
MAX_MALFORMED_FRACTION = 0.10
DEFAULT_MAX_RUN = 200


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------

# Applied to the end of the title, repeatedly, until none matches.
DEFAULT_TITLE_PATTERNS: tuple[str, ...] = (
    r"\s*[\[\(]\s*(?:duplicate|dupe|closed)\s*[\]\)]\s*$",
)

# Applied to the raw HTML body before tags are removed.
DEFAULT_HTML_BLOCK_PATTERNS: tuple[str, ...] = (
    # Legacy and current closure notices rendered as blockquotes.
    r"<blockquote>(?:(?!</blockquote>).)*?"
    r"(?:possible\s+duplicates?|already\s+has\s+(?:an\s+)?answers?\s+here|marked\s+as\s+(?:a\s+)?duplicate)"
    r"(?:(?!</blockquote>).)*?</blockquote>",
    # Bare "<strong>Possible Duplicate:</strong>" paragraphs.
    r"<p>\s*(?:<strong>|<b>)?\s*possible\s+duplicates?\s*:.*?</p>",
    # Code blocks are not embedded.
    r"<pre\b[^>]*>.*?</pre>",
)

# Applied line by line to the de-tagged body; a matching line is dropped.
DEFAULT_LINE_PATTERNS: tuple[str, ...] = (
    r"^\s*possible\s+duplicates?\s*(?:of)?\s*:?.*$",
    r"^\s*(?:(?:edit|update|note)\s*\d*\s*[:\-]?\s*)?(?:this|my|the)\s+question\s+"
    r"(?:is|was|has\s+been|might\s+be|may\s+be)\s+(?:(?:a|marked\s+as(?:\s+a)?|closed\s+as(?:\s+a)?)\s+)?"
    r"(?:possible\s+|exact\s+)?duplicate\b.*$",
    r"^\s*(?:(?:edit|update|note)\s*\d*\s*[:\-]\s*)(?:this\s+is\s+)?(?:a\s+)?(?:possible\s+|exact\s+)?"
    r"(?:duplicate|dupe)\s+(?:of|question)\b.*$",
    r"^\s*(?:this\s+is\s+)?(?:a\s+)?(?:possible\s+|exact\s+)?(?:duplicate|dupe)\s+of\s*:?\s*(?:https?://|\[|<|$).*$",
    r"^\s*this\s+question\s+already\s+has\s+(?:an\s+)?answers?\s+here\s*:?.*$",
    r"^\s*closed\s+as\s+(?:a\s+)?duplicate\b.*$",
)

_FENCED_CODE = re.compile(r"^\s*(```|~~~).*?^\s*\1[^\n]*$", re.M | re.S)
_BLOCK_TAG = re.compile(r"</?(?:p|div|br|hr|li|ul|ol|h[1-6]|blockquote|table|tr|td|th|pre)\b[^>]*>", re.I)
_ANY_TAG = re.compile(r"<(?:[a-zA-Z][a-zA-Z0-9]*|/[a-zA-Z][a-zA-Z0-9]*|!--)[^<>]*>")
_SPACES = re.compile(r"[ \t\r\f\v\u00a0]+")
_DATA_URI = re.compile(r"data:[\w.+\-]+/[\w.+\-]+(?:;[\w.+\-=]+)*;base64,[A-Za-z0-9+/=]*")


@dataclass(frozen=True)
class CleaningRules:
    """Ordered regex lists used by :func:`strip_annotations`."""

    title_patterns: tuple[str, ...] = DEFAULT_TITLE_PATTERNS
    html_block_patterns: tuple[str, ...] = DEFAULT_HTML_BLOCK_PATTERNS
    line_patterns: tuple[str, ...] = DEFAULT_LINE_PATTERNS

    def compiled(self):
        flags = re.I | re.S
        return (
            [re.compile(p, re.I) for p in self.title_patterns],
            [re.compile(p, flags) for p in self.html_block_patterns],
            [re.compile(p, re.I) for p in self.line_patterns],
        )


DEFAULT_RULES = CleaningRules()
_DEFAULT_COMPILED = DEFAULT_RULES.compiled()


def _collapse(text: str) -> str:
    return _SPACES.sub(" ", text).strip()


def _clean_title_once(title, title_res):
    title = _collapse(html.unescape(title).replace("\n", " "))
    changed = True
    while changed:
        changed = False
        for rx in title_res:
            new = rx.sub("", title)
            if new != title:
                title, changed = new.rstrip(), True
    return _collapse(title)


def _clean_body_once(body, block_res, line_res):
    for rx in block_res:
        body = rx.sub("\n", body)
    body = _FENCED_CODE.sub("\n", body)
    body = _BLOCK_TAG.sub("\n", body)
    body = _ANY_TAG.sub("", body)
    body = html.unescape(body)
    lines = []
    for line in body.split("\n"):
        line = _collapse(line)
        if not line or any(rx.match(line) for rx in line_res):
            continue
        lines.append(line)
    return "\n".join(lines)


def _fixpoint(fn, text, limit=16):
    # Unescaping can expose new tag-like text ("&lt;b&gt;"), so repeat until
    # stable. Every productive pass shortens the text, so this terminates.
    for _ in range(limit):
        new = fn(text)
        if new == text:
            break
        text = new
    return text


def strip_annotations(raw_title: str, raw_body: str, rules: CleaningRules | None = None) -> tuple[str, str]:
    """Remove duplicate-closure markers, notices, code blocks and HTML.

    Returns ``(title, body)``. The body keeps one paragraph per line with
    inner whitespace collapsed. The result is a fixed point, so cleaning
    already-clean text is a no-op.
    """
    title_res, block_res, line_res = _DEFAULT_COMPILED if rules is None else rules.compiled()
    title = _fixpoint(lambda t: _clean_title_once(t, title_res), raw_title or "")
    body = _fixpoint(lambda b: _clean_body_once(b, block_res, line_res), raw_body or "")
    return title, body


def strip_bulky_artifacts(body: str, max_run: int = DEFAULT_MAX_RUN) -> str:
    """Drop data URIs and whitespace-delimited tokens longer than ``max_run``."""
    body = _DATA_URI.sub(" ", body)
    lines = []
    for line in body.split("\n"):
        kept = [tok for tok in line.split() if len(tok) <= max_run]
        if kept:
            lines.append(" ".join(kept))
    return "\n".join(lines)


def clean_post_text(raw_title, raw_body, max_run=DEFAULT_MAX_RUN, rules=None):
    title, body = strip_annotations(raw_title, raw_body, rules)
    return title, strip_bulky_artifacts(body, max_run)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Post:
    id: int
    title: str
    body: str
    tags: tuple[str, ...] = ()
    created: str = ""

    @property
    def text(self) -> str:
        return f"{self.title}\n{self.body}"

    @property
    def is_empty(self) -> bool:
        return not self.title and not self.body

    def to_json(self) -> dict:
        return {"id": self.id, "title": self.title, "body": self.body,
                "tags": list(self.tags), "created": self.created}


@dataclass(frozen=True, order=True)
class DuplicatePair:
    dup_id: int
    orig_id: int

    def __post_init__(self):
        if self.dup_id == self.orig_id:
            raise ValueError(f"self-referencing pair {self.dup_id}")


@dataclass
class IngestReport:
    malformed_post_lines: list[int] = field(default_factory=list)
    malformed_pair_lines: list[int] = field(default_factory=list)
    duplicate_post_ids: int = 0
    dropped_pairs_missing: int = 0
    dropped_pairs_repeated: int = 0
    dropped_pairs_self: int = 0
    empty_text_posts: int = 0


@dataclass(frozen=True)
class Corpus:
    """Immutable mapping of posts plus directed duplicate annotations."""

    posts: Mapping[int, Post]
    pairs: tuple[DuplicatePair, ...]
    report: IngestReport | None = field(default=None, compare=False)

    def __post_init__(self):
        posts = dict(sorted(self.posts.items()))
        for pid, post in posts.items():
            if pid != post.id:
                raise ValueError(f"post keyed as {pid} has id {post.id}")
        seen = set()
        for pair in self.pairs:
            if pair.dup_id not in posts or pair.orig_id not in posts:
                raise ValueError(f"pair {pair} references a missing post")
            if pair in seen:
                raise ValueError(f"repeated pair {pair}")
            seen.add(pair)
        object.__setattr__(self, "posts", MappingProxyType(posts))
        object.__setattr__(self, "pairs", tuple(self.pairs))

    @classmethod
    def from_posts(cls, posts: Iterable[Post], pairs: Iterable[DuplicatePair] = ()):
        return cls({p.id: p for p in posts}, tuple(pairs))

    def __len__(self):
        return len(self.posts)

    @property
    def empty_text_ids(self) -> list[int]:
        return [pid for pid, p in self.posts.items() if p.is_empty]

    def linked(self) -> dict[int, set[int]]:
        """Undirected adjacency of annotated duplicates."""
        adj = defaultdict(set)
        for pair in self.pairs:
            adj[pair.dup_id].add(pair.orig_id)
            adj[pair.orig_id].add(pair.dup_id)
        return adj

    def to_bytes(self) -> bytes:
        doc = {
            "format": CORPUS_FORMAT,
            "posts": [p.to_json() for p in self.posts.values()],
            "pairs": [[p.dup_id, p.orig_id] for p in self.pairs],
        }
        return (json.dumps(doc, ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_bytes(corpus.to_bytes())


def load_corpus(path) -> Corpus:
    try:
        doc = json.loads(Path(path).read_bytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a corpus file: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CORPUS_FORMAT:
        raise FormatError(f"{path}: missing or unknown corpus format marker", offset=0)
    posts = [Post(int(p["id"]), p["title"], p["body"], tuple(p["tags"]), p["created"]) for p in doc["posts"]]
    pairs = [DuplicatePair(int(d), int(o)) for d, o in doc["pairs"]]
    return Corpus.from_posts(posts, pairs)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _parse_tags(raw) -> tuple[str, ...]:
    if raw is None:
        return ()
    if isinstance(raw, str):
        # Stack Exchange dump style "<python><pandas>" or "python|pandas".
        parts = re.findall(r"<([^<>]+)>", raw) or re.split(r"[|,\s]+", raw)
    else:
        parts = list(raw)
    tags = []
    for t in parts:
        t = str(t).strip().lower()
        if t and t not in tags:
            tags.append(t)
    return tuple(tags)


def _read_text(source) -> str:
    if isinstance(source, (str, Path)) and Path(source).exists():
        return Path(source).read_text(encoding="utf-8")
    if hasattr(source, "read"):
        return source.read()
    raise FileNotFoundError(str(source))


def ingest(posts_source, links_source, max_run: int = DEFAULT_MAX_RUN, rules: CleaningRules | None = None) -> Corpus:
    """Build a cleaned :class:`Corpus` from ``posts.jsonl`` and ``pairs.csv``.

    Both sources may be paths or open text streams. Malformed lines are
    logged with their line number and skipped; more than 10% malformed
    lines in either source is fatal.
    """
    report = IngestReport()
    posts: dict[int, Post] = {}
    n_lines = 0
    for lineno, line in enumerate(_read_text(posts_source).splitlines(), start=1):
        if not line.strip():
            continue
        n_lines += 1
        try:
            rec = json.loads(line)
            pid = rec["id"]
            if isinstance(pid, bool) or not isinstance(pid, int) or pid <= 0:
                raise ValueError(f"bad id {pid!r}")
            title, body = clean_post_text(str(rec.get("title") or ""), str(rec.get("body") or ""), max_run, rules)
            post = Post(pid, title, body, _parse_tags(rec.get("tags")), str(rec.get("created") or ""))
        except (ValueError, KeyError, TypeError) as exc:
            logger.warning("posts line %d: %s", lineno, exc)
            report.malformed_post_lines.append(lineno)
            continue
        if pid in posts:
            logger.warning("posts line %d: repeated id %d ignored", lineno, pid)
            report.duplicate_post_ids += 1
            continue
        posts[pid] = post
    if n_lines and len(report.malformed_post_lines) > MAX_MALFORMED_FRACTION * n_lines:
        raise IngestError(f"{len(report.malformed_post_lines)} of {n_lines} post lines are malformed")

    pairs: list[DuplicatePair] = []
    seen = set()
    rows = list(csv.reader(io.StringIO(_read_text(links_source))))
    body_rows = 0
    for lineno, row in enumerate(rows, start=1):
        if lineno == 1 and [c.strip() for c in row] == ["dup_id", "orig_id"]:
            continue
        if not row or not any(c.strip() for c in row):
            continue
        body_rows += 1
        try:
            if len(row) != 2 or not all(c.strip().isdigit() for c in row):
                raise ValueError(f"expected two integer ids, got {row!r}")
            dup, orig = int(row[0]), int(row[1])
        except ValueError as exc:
            logger.warning("pairs line %d: %s", lineno, exc)
            report.malformed_pair_lines.append(lineno)
            continue
        if dup == orig:
            report.dropped_pairs_self += 1
            continue
        if dup not in posts or orig not in posts:
            report.dropped_pairs_missing += 1
            continue
        pair = DuplicatePair(dup, orig)
        if pair in seen:
            report.dropped_pairs_repeated += 1
            continue
        seen.add(pair)
        pairs.append(pair)
    if body_rows and len(report.malformed_pair_lines) > MAX_MALFORMED_FRACTION * body_rows:
        raise IngestError(f"{len(report.malformed_pair_lines)} of {body_rows} pair lines are malformed")
    if report.dropped_pairs_missing:
        logger.warning("dropped %d pairs referencing missing posts", report.dropped_pairs_missing)

    report.empty_text_posts = sum(p.is_empty for p in posts.values())
    return Corpus(posts, tuple(pairs), report)


# ---------------------------------------------------------------------------
# Census
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TopicStats:
    dup_posts: int
    dup_pairs: int
    total_posts: int

    @property
    def ratio(self) -> float:
        return self.dup_posts / self.total_posts if self.total_posts else 0.0


@dataclass(frozen=True)
class CensusReport:
    per_topic: Mapping[str, TopicStats]
    common_tag_rate: float
    mean_dups_per_post: float
    single_dup_fraction: float
    n_posts: int = 0
    n_pairs: int = 0
    mean_defined: bool = False
    incomplete_link_fraction: float | None = None

    def table(self, top: int | None = None) -> list[tuple[str, TopicStats]]:
        """Rows in the order of a Table-I-style listing.

        ``top`` keeps the topics with the most posts; rows are then sorted by
        duplicate ratio, highest first.
        """
        rows = list(self.per_topic.items())
        if top is not None:
            rows = sorted(rows, key=lambda kv: (-kv[1].total_posts, kv[0]))[:top]
        return sorted(rows, key=lambda kv: (-kv[1].ratio, kv[0]))

    def to_csv(self, top: int | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["topic", "dup_posts", "dup_pairs", "total_posts", "ratio"])
        for tag, st in self.table(top):
            writer.writerow([tag, st.dup_posts, st.dup_pairs, st.total_posts, f"{st.ratio:.6f}"])
        return buf.getvalue()


def _components(nodes, adj):
    comp = {}
    for start in nodes:
        if start in comp:
            continue
        stack, members = [start], []
        comp[start] = start
        while stack:
            n = stack.pop()
            members.append(n)
            for m in adj[n]:
                if m not in comp:
                    comp[m] = start
                    stack.append(m)
    sizes = defaultdict(int)
    for root in comp.values():
        sizes[root] += 1
    return comp, sizes


def census(corpus: Corpus, closure: bool = False) -> CensusReport:
    """Per-topic duplicate counts and pair-level statistics.

    A post belongs to every topic in its tag list. ``dup_posts`` counts posts
    of the topic that take part in any pair (either role); ``dup_pairs``
    counts pairs with at least one endpoint in the topic. With ``closure``
    the fraction of annotated posts that are not directly linked to every
    member of their transitive duplicate group is also reported.
    """
    posts, pairs = corpus.posts, corpus.pairs
    in_pair = {p.dup_id for p in pairs} | {p.orig_id for p in pairs}

    total = defaultdict(int)
    dup_posts = defaultdict(int)
    for post in posts.values():
        for tag in post.tags:
            total[tag] += 1
            if post.id in in_pair:
                dup_posts[tag] += 1
    dup_pairs = defaultdict(int)
    shared = 0
    for pair in pairs:
        a, b = set(posts[pair.dup_id].tags), set(posts[pair.orig_id].tags)
        for tag in a | b:
            dup_pairs[tag] += 1
        shared += bool(a & b)
    per_topic = {t: TopicStats(dup_posts[t], dup_pairs[t], total[t]) for t in sorted(total)}

    originals = defaultdict(set)
    for pair in pairs:
        originals[pair.dup_id].add(pair.orig_id)
    n_dup = len(originals)
    mean = len(pairs) / n_dup if n_dup else 0.0
    single = sum(len(v) == 1 for v in originals.values()) / n_dup if n_dup else 0.0

    incomplete = None
    if closure:
        adj = corpus.linked()
        comp, sizes = _components(sorted(adj), adj)
        bad = sum(len(adj[n]) < sizes[comp[n]] - 1 for n in adj)
        incomplete = bad / len(adj) if adj else 0.0

    return CensusReport(
        per_topic=MappingProxyType(per_topic),
        common_tag_rate=float(Fraction(shared, len(pairs))) if pairs else 0.0,
        mean_dups_per_post=mean,
        single_dup_fraction=single,
        n_posts=len(posts),
        n_pairs=len(pairs),
        mean_defined=bool(n_dup),
        incomplete_link_fraction=incomplete,
    )


# ---------------------------------------------------------------------------
# Splits and topic filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_pairs: tuple[DuplicatePair, ...]
    test_pairs: tuple[DuplicatePair, ...]
    seed: int
    ratio: float = 0.8

    def restrict(self, corpus: Corpus) -> "SplitSpec":
        """Keep only pairs whose endpoints both survive in ``corpus``."""
        keep = lambda ps: tuple(p for p in ps if p.dup_id in corpus.posts and p.orig_id in corpus.posts)
        return SplitSpec(keep(self.train_pairs), keep(self.test_pairs), self.seed, self.ratio)


def split(corpus: Corpus, ratio: float = 0.8, seed: int = 0) -> SplitSpec:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    pairs = corpus.pairs
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = int(round(ratio * len(pairs)))
    shuffled = [pairs[i] for i in order]
    return SplitSpec(tuple(shuffled[:n_train]), tuple(shuffled[n_train:]), seed, ratio)


def filter_by_tag(corpus: Corpus, tag: str) -> Corpus:
    tag = tag.strip().lower()
    if not tag:
        raise ValueError("tag must be non-empty")
    posts = {pid: p for pid, p in corpus.posts.items() if tag in p.tags}
    pairs = tuple(p for p in corpus.pairs if p.dup_id in posts and p.orig_id in posts)
    return Corpus(posts, pairs)


def write_posts_jsonl(posts: Sequence[Post | dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in posts:
            rec = p.to_json() if isinstance(p, Post) else p
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def write_pairs_csv(pairs: Iterable[DuplicatePair], path) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dup_id", "orig_id"])
        for p in pairs:
            writer.writerow([p.dup_id, p.orig_id])
