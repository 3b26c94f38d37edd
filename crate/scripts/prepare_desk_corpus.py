#!/usr/bin/env python3
"""Build the bundled English desk corpus from the public-domain text of Moby-Dick.

Source: the `@stdlib/datasets-moby-dick` npm package (plain-text chapters).
Output: one sentence per line, whitespace-pretokenized, original casing.

    npm pack @stdlib/datasets-moby-dick && tar xzf stdlib-datasets-moby-dick-*.tgz
    python3 scripts/prepare_desk_corpus.py package/data crates/core/data/moby_dick.txt
"""
import re
import sys
from pathlib import Path

TOKEN = re.compile(r"[A-Za-z]+(?:['’][A-Za-z]+)*|\d+(?:[.,]\d+)*|[^\sA-Za-z\d]")
SENT_END = re.compile(r"(?<=[.!?])\s+(?=[\"“‘'A-Z])")


def chapters(root: Path):
    for i in range(1, 136):
        yield root / f"chapter_{i}.txt"
    yield root / "epilogue.txt"


def main(src: str, dst: str) -> None:
    out = []
    for path in chapters(Path(src)):
        text = path.read_text(encoding="utf-8")
        paragraphs = [p for p in re.split(r"\n\s*\n", text) if p.strip()]
        # first paragraph is the chapter heading
        for para in paragraphs[1:]:
            para = " ".join(para.split())
            for sent in SENT_END.split(para):
                toks = TOKEN.findall(sent.replace("\u2014", " \u2014 "))
                if toks:
                    out.append(" ".join(toks))
    Path(dst).write_text("\n".join(out) + "\n", encoding="utf-8")
    print(f"{len(out)} sentences, {sum(len(s.split()) for s in out)} tokens")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
