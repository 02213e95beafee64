#!/usr/bin/env python3
"""Convert a Stack Exchange data dump into the dupdetect interchange files.

Reads the extracted ``Posts.xml`` and ``PostLinks.xml`` and writes

* ``posts.jsonl``: one question per line with id, title, body, tags, created
* ``pairs.csv``: ``dup_id,orig_id`` rows for links of type 3 (duplicate)

Only questions (PostTypeId 1) are kept. Both files are streamed, so the
full Stack Overflow dump converts in constant memory.

    python scripts/convert_stackexchange.py --dump-dir so-dump --out-dir data
"""

import argparse
import csv
import json
import logging
import xml.etree.ElementTree as ET
from pathlib import Path

QUESTION = "1"
DUPLICATE_LINK = "3"

log = logging.getLogger("convert")


def iter_rows(path):
    for _, elem in ET.iterparse(path, events=("end",)):
        if elem.tag == "row":
            yield elem.attrib
            elem.clear()


def convert_posts(posts_xml, out_path) -> set[int]:
    ids = set()
    with open(out_path, "w", encoding="utf-8") as out:
        for row in iter_rows(posts_xml):
            if row.get("PostTypeId") != QUESTION:
                continue
            pid = int(row["Id"])
            rec = {"id": pid, "title": row.get("Title", ""), "body": row.get("Body", ""),
                   "tags": row.get("Tags", ""), "created": row.get("CreationDate", "")}
            out.write(json.dumps(rec, ensure_ascii=False) + "\n")
            ids.add(pid)
    return ids


def convert_links(links_xml, out_path, question_ids=None) -> int:
    n = skipped = 0
    with open(out_path, "w", encoding="utf-8", newline="") as out:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["dup_id", "orig_id"])
        for row in iter_rows(links_xml):
            if row.get("LinkTypeId") != DUPLICATE_LINK:
                continue
            dup, orig = int(row["PostId"]), int(row["RelatedPostId"])
            if question_ids is not None and (dup not in question_ids or orig not in question_ids):
                skipped += 1
                continue
            writer.writerow([dup, orig])
            n += 1
    if skipped:
        log.info("skipped %d duplicate links to posts outside the dump", skipped)
    return n


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dump-dir", required=True, type=Path, help="directory with Posts.xml and PostLinks.xml")
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--keep-dangling", action="store_true",
                   help="keep links whose endpoints are not questions in the dump (ingest drops them anyway)")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    ids = convert_posts(args.dump_dir / "Posts.xml", args.out_dir / "posts.jsonl")
    n = convert_links(args.dump_dir / "PostLinks.xml", args.out_dir / "pairs.csv",
                      None if args.keep_dangling else ids)
    log.info("wrote %d questions and %d duplicate pairs to %s", len(ids), n, args.out_dir)


if __name__ == "__main__":
    main()
