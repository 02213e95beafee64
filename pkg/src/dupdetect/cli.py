"""Command-line entry point: ``dupdetect <command> ...``.

Every option can also come from a JSON file passed with ``--config``; keys
are the option names (dashes or underscores). Explicit flags win over the
file, and the file wins over built-in defaults. The fully resolved settings
are written next to each output as ``<out>.config.json``.

Exit codes:
  0  success
  1  unexpected internal error
  2  invalid argument or unknown flag
  3  missing input file
  4  malformed input file
  5  inconsistent configuration (dims, provider, credentials)
  6  unusable input data
  7  remote embedding service failure
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .corpus import census, filter_by_tag, ingest, load_corpus, save_corpus, split
from .embedding import EmbeddingStore, ProviderConfig, embed_corpus, load_store, save_store
from .errors import (ConfigError, DomainError, EmptyTextError, FormatError, IngestError, NotFoundError,
                     RemoteEmbeddingError)
from .evalharness import (DEFAULT_NEG_RATIO, batch_size_sweep, compare_settings, evaluate_index, topic_study,
                          topic_table_csv)
from .rank import LatentIndex, load_index, project, save_index, top_k, top_k_text
from .refine import TrainingConfig, load_head, save_head, train
from .synthetic import SyntheticSpec, make_corpus

logger = logging.getLogger("dupdetect")

EXIT_CODES = [
    (FileNotFoundError, 3, "missing-file"),
    (FormatError, 4, "format-error"),
    (ConfigError, 5, "config-error"),
    (IngestError, 6, "data-error"),
    (RemoteEmbeddingError, 7, "remote-error"),
    (NotFoundError, 2, "not-found"),
    (EmptyTextError, 2, "argument-error"),
    (DomainError, 6, "data-error"),
    (ValueError, 2, "argument-error"),
]

_NOT_CONFIG = {"command", "func", "config", "log_level"}
# File locations do not change results, so reports leave them out of their echo.
_PATH_OPTIONS = {"posts", "links", "corpus", "store", "model", "index", "out", "csv", "log", "cache",
                 "out_corpus", "out_store"}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"ERROR argument-error: {message}", file=sys.stderr)
        sys.exit(2)


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text):
    return [int(t) for t in _csv_list(text)]


def _add_training(p):
    p.add_argument("--loss", choices=["triplet", "mnr"], default="mnr")
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--scale", type=float, default=20.0)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--out-dim", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)


def _add_split(p):
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=None, help="defaults to --seed")
    p.add_argument("--tag", default=None, help="restrict training and evaluation to one topic")


def _add_provider(p):
    p.add_argument("--provider", choices=["remote", "offline"], default="offline")
    p.add_argument("--base-url", default="https://api.openai.com/v1")
    p.add_argument("--model-name", default="text-embedding-ada-002")
    p.add_argument("--max-tokens", type=int, default=8191)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--provider-seed", type=int, default=0)
    p.add_argument("--max-concurrency", type=int, default=4)
    p.add_argument("--retry-limit", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dupdetect", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None, help="JSON file with option values")
        p.add_argument("--log-level", default="WARNING")
        p.add_argument("--threads", type=int, default=1)
        return p

    p = command("ingest", cmd_ingest, "clean posts and pairs into a corpus file")
    p.add_argument("--posts")
    p.add_argument("--links")
    p.add_argument("--max-run", type=int, default=200)
    p.add_argument("--out")

    p = command("census", cmd_census, "per-topic duplicate statistics as CSV")
    p.add_argument("--corpus")
    p.add_argument("--top", type=int, default=None)
    p.add_argument("--out")

    p = command("embed", cmd_embed, "embed every post of a corpus")
    p.add_argument("--corpus")
    _add_provider(p)
    p.add_argument("--cache", default=None, help="EMB1 cache for the remote provider")
    p.add_argument("--out")

    p = command("train", cmd_train, "train a projection head")
    p.add_argument("--corpus")
    p.add_argument("--store")
    _add_training(p)
    _add_split(p)
    p.add_argument("--log", default=None, help="training log JSON (default <out>.log.json)")
    p.add_argument("--out")

    p = command("project", cmd_project, "build a latent index")
    p.add_argument("--store")
    p.add_argument("--model", default=None, help="omit to index the raw normalized vectors")
    p.add_argument("--out")

    p = command("rank", cmd_rank, "top-k neighbours of a post or of free text (CSV on stdout)")
    p.add_argument("--index")
    p.add_argument("--query-id", type=int, default=None)
    p.add_argument("--text", default=None)
    p.add_argument("-k", type=int, default=30)
    p.add_argument("--tag-filter", type=_csv_list, default=None)
    p.add_argument("--corpus", default=None, help="needed for --tag-filter")
    p.add_argument("--model", default=None, help="needed for --text")
    _add_provider(p)

    p = command("evaluate", cmd_evaluate, "Top-N accuracy and AUC")
    p.add_argument("--index", default=None)
    p.add_argument("--corpus")
    p.add_argument("--store", default=None, help="needed for --compare")
    p.add_argument("--compare", type=_csv_list, default=None, help="settings among raw,triplet,mnr")
    p.add_argument("--neg-ratio", type=int, default=DEFAULT_NEG_RATIO)
    _add_training(p)
    _add_split(p)
    p.add_argument("--csv", default=None)
    p.add_argument("--out")

    p = command("sweep", cmd_sweep, "MNR batch-size sweep table")
    p.add_argument("--corpus")
    p.add_argument("--store")
    p.add_argument("--batch-sizes", type=_int_list, default=[8, 16, 32, 64])
    _add_training(p)
    _add_split(p)
    p.add_argument("--out")

    p = command("topics", cmd_topics, "in-topic versus general-topic training")
    p.add_argument("--corpus")
    p.add_argument("--store")
    p.add_argument("--topics", type=_csv_list)
    _add_training(p)
    _add_split(p)
    p.add_argument("--out")

    p = command("synth", cmd_synth, "write a synthetic clustered corpus and store")
    p.add_argument("--clusters", type=int, default=200)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--signal-dim", type=int, default=16)
    p.add_argument("--topics", type=_csv_list, default=[])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-corpus")
    p.add_argument("--out-store")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "", [])]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _existing(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_CONFIG}


def _emit_config(args, out):
    text = json.dumps(_resolved(args), indent=2, sort_keys=True) + "\n"
    if out is None:
        logger.info("resolved config: %s", text.strip())
        return
    Path(str(out) + ".config.json").write_text(text, encoding="utf-8")


def _training_config(args, loss=None) -> TrainingConfig:
    return TrainingConfig(loss=loss or args.loss, margin=args.margin, scale=args.scale, batch_size=args.batch_size,
                          epochs=args.epochs, learning_rate=args.lr, seed=args.seed, out_dim=args.out_dim)


def _provider_config(args) -> ProviderConfig:
    return ProviderConfig(kind="remote" if args.provider == "remote" else "offline-hash", base_url=args.base_url,
                          model_name=args.model_name, max_tokens=args.max_tokens, dim=args.dim,
                          seed=args.provider_seed, max_concurrency=args.max_concurrency,
                          retry_limit=args.retry_limit)


def _split_for(args, corpus):
    split_seed = args.seed if args.split_seed is None else args.split_seed
    sp = split(corpus, args.ratio, split_seed)
    if args.tag:
        corpus = filter_by_tag(corpus, args.tag)
        sp = sp.restrict(corpus)
    return corpus, sp


def _restrict_store(store, corpus):
    ids = [pid for pid in corpus.posts if pid in store]
    vecs = store.vectors[store.rows(ids)] if ids else store.vectors[:0]
    return EmbeddingStore(ids, vecs, store.provider_tag, store.dim)


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_ingest(args):
    _need(args, "posts", "links", "out")
    corpus = ingest(_existing(args.posts), _existing(args.links), max_run=args.max_run)
    save_corpus(corpus, args.out)
    rep = corpus.report
    logger.info("ingested %d posts, %d pairs (%d dropped for missing posts, %d malformed post lines)",
                len(corpus.posts), len(corpus.pairs), rep.dropped_pairs_missing, len(rep.malformed_post_lines))
    _emit_config(args, args.out)


def cmd_census(args):
    _need(args, "corpus", "out")
    report = census(load_corpus(_existing(args.corpus)), closure=True)
    _write(args.out, report.to_csv(args.top))
    summary = {"common_tag_rate": report.common_tag_rate, "mean_dups_per_post": report.mean_dups_per_post,
               "mean_defined": report.mean_defined, "single_dup_fraction": report.single_dup_fraction,
               "incomplete_link_fraction": report.incomplete_link_fraction,
               "n_posts": report.n_posts, "n_pairs": report.n_pairs}
    _write(str(args.out) + ".summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit_config(args, args.out)


def cmd_embed(args):
    _need(args, "corpus", "out")
    corpus = load_corpus(_existing(args.corpus))
    store = embed_corpus(corpus, _provider_config(args), cache_path=args.cache)
    if store.failed:
        logger.warning("%d posts were not embedded (empty text)", len(store.failed))
    save_store(store, args.out)
    _emit_config(args, args.out)


def cmd_train(args):
    _need(args, "corpus", "store", "out")
    corpus = load_corpus(_existing(args.corpus))
    store = load_store(_existing(args.store))
    corpus, sp = _split_for(args, corpus)
    head, log = train(corpus, sp, store, _training_config(args), threads=args.threads)
    save_head(head, args.out)
    _write(args.log or str(args.out) + ".log.json", log.to_json())
    _emit_config(args, args.out)


def cmd_project(args):
    _need(args, "store", "out")
    store = load_store(_existing(args.store))
    head = load_head(_existing(args.model)) if args.model else None
    save_index(project(store, head), args.out)
    _emit_config(args, args.out)


def cmd_rank(args):
    _need(args, "index")
    index = load_index(_existing(args.index))
    if args.text is not None:
        head = load_head(_existing(args.model)) if args.model else None
        ranked = top_k_text(index, head, _provider_config(args), args.text, args.k)
    else:
        _need(args, "query_id")
        tags = None
        if args.tag_filter:
            _need(args, "corpus")
            tags = {pid: p.tags for pid, p in load_corpus(_existing(args.corpus)).posts.items()}
        ranked = top_k(index, args.query_id, args.k, args.tag_filter, tags)
    sys.stdout.write(ranked.to_csv())
    _emit_config(args, None)


def cmd_evaluate(args):
    _need(args, "corpus", "out")
    corpus, sp = _split_for(args, load_corpus(_existing(args.corpus)))
    if args.compare:
        _need(args, "store")
        store = _restrict_store(load_store(_existing(args.store)), corpus)
        configs = {}
        for name in args.compare:
            if name not in ("raw", "triplet", "mnr"):
                raise UsageError(f"unknown setting {name!r} in --compare")
            configs[name] = None if name == "raw" else _training_config(args, loss=name)
        table = compare_settings(corpus, sp, store, configs, seed=args.seed, threads=args.threads)
        for name in table.losses:
            table.losses[name] = [round(x, 12) for x in table.losses[name]]
        _write(args.out, table.to_json())
        if args.csv:
            _write(args.csv, table.to_csv())
    else:
        _need(args, "index")
        index = load_index(_existing(args.index))
        if args.tag:
            keep = [pid for pid in index.ids if int(pid) in corpus.posts]
            index = LatentIndex(keep, index.vectors[[index.row(p) for p in keep]] if keep else index.vectors[:0],
                                index.provider_tag, index.dim)
        report = evaluate_index(index, sp, neg_ratio=args.neg_ratio, seed=args.seed,
                                config_echo=json.dumps({k: v for k, v in _resolved(args).items()
                                                         if k not in _PATH_OPTIONS}, sort_keys=True))
        _write(args.out, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit_config(args, args.out)


def cmd_sweep(args):
    _need(args, "corpus", "store", "out")
    corpus, sp = _split_for(args, load_corpus(_existing(args.corpus)))
    store = _restrict_store(load_store(_existing(args.store)), corpus)
    table = batch_size_sweep(corpus, sp, store, args.batch_sizes, _training_config(args, loss="mnr"),
                             seed=args.seed, threads=args.threads)
    _write(args.out, table.to_csv())
    _emit_config(args, args.out)


def cmd_topics(args):
    _need(args, "corpus", "store", "topics", "out")
    corpus = load_corpus(_existing(args.corpus))
    split_seed = args.seed if args.split_seed is None else args.split_seed
    sp = split(corpus, args.ratio, split_seed)
    store = load_store(_existing(args.store))
    results = topic_study(corpus, sp, store, args.topics, _training_config(args), seed=args.seed,
                          threads=args.threads)
    _write(args.out, topic_table_csv(results))
    _emit_config(args, args.out)


def cmd_synth(args):
    _need(args, "out_corpus", "out_store")
    corpus, store = make_corpus(SyntheticSpec(clusters=args.clusters, dim=args.dim, signal_dim=args.signal_dim,
                                              topics=tuple(args.topics), seed=args.seed))
    save_corpus(corpus, args.out_corpus)
    save_store(store, args.out_store)
    _emit_config(args, args.out_corpus)


# ---------------------------------------------------------------------------


def _apply_config_file(parser, argv, args):
    path = _existing(args.config)
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: expected a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    valid = set(vars(args)) - _NOT_CONFIG
    unknown = sorted(set(cfg) - valid)
    if unknown:
        raise ConfigError(f"{path}: unknown option(s) {', '.join(unknown)}")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    subparser.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            args = _apply_config_file(parser, argv, args)
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code below
        for cls, code, label in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"ERROR {label}: {exc}", file=sys.stderr)
                return code
        logger.exception("internal error")
        print(f"ERROR internal-error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
