#!/usr/bin/env python3
"""Regenerates the bundled fixtures. Output is a pure function of SEED.

    python3 crates/core/fixtures/generate.py
"""

import json
import random
import re
from pathlib import Path

SEED = 20240607
HERE = Path(__file__).resolve().parent

FUNCTION_WORDS = "the a i think is how do to with and my can you it not why when this".split()
TOPICS = {
    "code": (
        "function variable loop array string compiler error class method module".split(),
        "compile debug return call import".split(),
        "fast broken null static empty".split(),
    ),
    "cooking": (
        "pasta sauce oven garlic onion pepper recipe knife pan salt".split(),
        "bake chop boil stir taste".split(),
        "hot fresh salty crispy sweet".split(),
    ),
    "travel": (
        "train ticket hotel map airport city beach passport bag road".split(),
        "book visit pack fly walk".split(),
        "cheap late crowded quiet long".split(),
    ),
    "garden": (
        "seed soil rose tree water leaf flower root fence hose".split(),
        "plant grow prune dig trim".split(),
        "green dry tall wild young".split(),
    ),
}
TEMPLATES = [
    "the {adj} {noun} is not {adj2}",
    "i think the {noun} is {adj}",
    "how do i {verb} a {noun} with {noun2}",
    "why can you not {verb} the {noun}",
    "when i {verb} my {noun} it is {adj}",
    "this {noun} and the {noun2} {verb} to the {noun3}",
    "do not {verb} the {adj} {noun} with a {noun2}",
    "i {verb} my {adj} {noun} and {verb2} it",
]
# Words outside the 100-word vocabulary; each client has its own.
RARE = [f"user{k}name" for k in range(40)]


def sentence(rng, topic, rare):
    nouns, verbs, adjs = TOPICS[topic]
    fill = {
        "noun": rng.choice(nouns),
        "noun2": rng.choice(nouns),
        "noun3": rng.choice(nouns),
        "verb": rng.choice(verbs),
        "verb2": rng.choice(verbs),
        "adj": rng.choice(adjs),
        "adj2": rng.choice(adjs),
    }
    words = rng.choice(TEMPLATES).format(**fill).split()
    if rng.random() < 0.1:
        words.insert(rng.randrange(len(words) + 1), rare)
    return " ".join(words)


def client_records(rng, client_id, rare):
    # Each client writes mostly about one topic.
    home = rng.choice(sorted(TOPICS))
    n = rng.randint(20, 120)
    out = []
    for _ in range(n):
        topic = home if rng.random() < 0.8 else rng.choice(sorted(TOPICS))
        out.append({"client_id": client_id, "text": sentence(rng, topic, rare)})
    return out


def write_jsonl(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def normalize(line):
    line = line.lower().replace("-", " ")
    line = re.sub(r"[^a-z' ]", " ", line)
    words = [w.strip("'") for w in line.split()]
    return " ".join(w for w in words if w)


def main():
    rng = random.Random(SEED)
    train = []
    for k in range(30):
        train += client_records(rng, f"client{k:02d}", RARE[k])
    write_jsonl(HERE / "synthetic_train.jsonl", train)

    held_out = []
    for k in range(30, 38):
        held_out += client_records(rng, f"client{k:02d}", RARE[k])
    write_jsonl(HERE / "synthetic_eval.jsonl", held_out)

    verses = [normalize(l) for l in (HERE / "sonnets_raw.txt").read_text().splitlines() if l.strip()]
    (HERE / "sonnets.txt").write_text("\n".join(verses) + "\n")

    # 30 distinct lines, each two consecutive verses.
    pairs = [verses[2 * k] + " " + verses[2 * k + 1] for k in range(30)]
    assert len(set(pairs)) == 30
    (HERE / "memorize.txt").write_text("\n".join(pairs) + "\n")


if __name__ == "__main__":
    main()
