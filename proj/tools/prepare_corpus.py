#!/usr/bin/env python3
"""Build the bundled Shakespeare corpus used by the desk-scale experiments.

Source: the Project Gutenberg play texts shipped in the `shakespeare` sdist on
PyPI (public domain). Only the modern-spelling `*_gut.txt` editions are used.

Each play is lower-cased, punctuation is split off into separate tokens and
consecutive speeches are packed into documents of roughly --doc-words words,
one document per output line. Whole plays are held out for valid/test.

    pip download --no-deps --no-binary :all: shakespeare==0.6 -d /tmp/shk
    python3 tools/prepare_corpus.py /tmp/shk/shakespeare-0.6.tar.gz data/shakespeare
"""

import argparse
import os
import re
import tarfile

VALID_PLAYS = ["twelfth_night_gut.txt", "coriolanus_gut.txt"]
TEST_PLAYS = ["hamlet_gut.txt", "macbeth_gut.txt", "the_tempest_gut.txt", "othello_gut.txt"]

TOKEN_RE = re.compile(r"[a-z]+(?:'[a-z]+)*|'[a-z]+|[0-9]+|[^\sa-z0-9]")


def tokenize_line(line):
    line = line.lower().replace("--", " -- ")
    return TOKEN_RE.findall(line)


def speeches(text):
    """Split a play into blank-line separated blocks."""
    block = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            if block:
                yield block
                block = []
            continue
        block.append(line)
    if block:
        yield block


def pack_documents(text, doc_words, max_words):
    docs = []
    current = []
    for block in speeches(text):
        tokens = []
        for line in block:
            tokens.extend(tokenize_line(line))
        if not tokens:
            continue
        if current and len(current) + len(tokens) > max_words:
            docs.append(current)
            current = []
        current.extend(tokens[:max_words])
        if len(current) >= doc_words:
            docs.append(current)
            current = []
    if len(current) >= 8:
        docs.append(current)
    return docs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("sdist")
    ap.add_argument("outdir")
    ap.add_argument("--doc-words", type=int, default=160)
    ap.add_argument("--max-words", type=int, default=256)
    args = ap.parse_args()

    plays = {}
    with tarfile.open(args.sdist) as tar:
        for member in tar.getmembers():
            name = os.path.basename(member.name)
            if "/texts/" in member.name and name.endswith("_gut.txt"):
                plays[name] = tar.extractfile(member).read().decode("latin-1")

    splits = {"train": [], "valid": [], "test": []}
    for name in sorted(plays):
        split = "test" if name in TEST_PLAYS else "valid" if name in VALID_PLAYS else "train"
        splits[split].extend(pack_documents(plays[name], args.doc_words, args.max_words))

    os.makedirs(args.outdir, exist_ok=True)
    for split, docs in splits.items():
        path = os.path.join(args.outdir, f"{split}.txt")
        with open(path, "w", encoding="utf-8") as out:
            for doc in docs:
                out.write(" ".join(doc) + "\n")
        words = sum(len(d) for d in docs)
        print(f"{split}: {len(docs)} docs, {words} words -> {path}")


if __name__ == "__main__":
    main()
