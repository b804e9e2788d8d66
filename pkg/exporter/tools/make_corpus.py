"""Generate the training corpus and the bundled sample document.

The text is synthetic "field notes": short entries with a fixed skeleton
(header, attribute line, note sentence). Field names and separators repeat
every entry, and each entry's name appears twice (header and note), so a
character-level model trained on it learns both structural anchors and
long-range copying. Everything is drawn from a seeded RNG; the output is
original text and ships under the repository license.

Usage: python3 tools/make_corpus.py --out-dir model [--entries 5500]
"""

from __future__ import annotations

import argparse
import random
from pathlib import Path

ADJECTIVES = [
    "amber", "ashen", "bright", "brindle", "copper", "dusky", "glass",
    "hollow", "ivory", "little", "marbled", "misty", "northern", "pale",
    "quiet", "ragged", "russet", "silver", "speckled", "tawny",
]

HABITATS = [
    "bank", "bog", "brook", "dune", "fell", "fen", "heath", "ledge",
    "marsh", "moor", "ridge", "shoal", "spring", "vale",
]

PLANTS = [
    "aster", "bent", "cress", "dock", "fern", "flax", "moss", "orchid",
    "reed", "rush", "sedge", "sorrel", "thrift", "vetch",
]

ZONES = ["mire", "scree", "shade", "shore", "sward", "turf"]
MONTHS = ["march", "april", "may", "june", "july", "august"]
TINTS = ["azure", "cream", "gold", "lilac", "rose", "russet", "umber"]

NOTE_BODIES = [
    "keeps a low mat through the first frost",
    "holds the wet bank where the path turns",
    "spreads in thin lines along the old wall",
    "stands alone on the open gravel",
    "crowds the ditch after heavy rain",
    "fades early when the season runs dry",
    "marks the line where the water table sits",
    "returns to the same patch every year",
]


def make_entry(rng: random.Random, number: int) -> str:
    name = " ".join(
        (rng.choice(ADJECTIVES), rng.choice(HABITATS), rng.choice(PLANTS))
    )
    return (
        f"## entry {number % 1000:03d}: {name}\n"
        f"zone: {rng.choice(ZONES)} | bloom: {rng.choice(MONTHS)}"
        f" | tint: {rng.choice(TINTS)}\n"
        f"note: the {name} {rng.choice(NOTE_BODIES)}.\n\n"
    )


def make_document(seed: int, entries: int) -> str:
    rng = random.Random(seed)
    return "".join(make_entry(rng, i) for i in range(entries))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", type=Path, default=Path("model"))
    parser.add_argument("--entries", type=int, default=5500)
    parser.add_argument("--corpus-seed", type=int, default=11)
    parser.add_argument("--sample-seed", type=int, default=353)
    parser.add_argument("--sample-entries", type=int, default=100)
    args = parser.parse_args()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    corpus = make_document(args.corpus_seed, args.entries)
    sample = make_document(args.sample_seed, args.sample_entries)

    corpus_path = args.out_dir / "corpus.txt"
    sample_path = args.out_dir / "sample.txt"
    corpus_path.write_text(corpus)
    sample_path.write_text(sample)
    print(f"{corpus_path}: {len(corpus)} chars, vocab {len(set(corpus))}")
    print(f"{sample_path}: {len(sample)} chars, vocab {len(set(sample))}")


if __name__ == "__main__":
    main()
