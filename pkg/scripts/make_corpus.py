#!/usr/bin/env python3
"""Regenerate the bundled character-level corpus.

The text is synthetic but structured so that most of the predictable mass
needs memory spanning several characters.  Words are built from syllables
whose vowels follow a fixed cycle within one harmony class (front e/i or
back a/o/u): once the first vowel fixes the phase, every later vowel of
the word is determined but sits 2-5 characters after the previous one,
behind consonant onsets, optional clusters, and codas.  Every sentence
commits to a single class for all of its words, and every word is spoken
three times in a row, so about two thirds of all characters are exact
recalls of the character one word length earlier.  A model that carries
credit across steps can learn the recall, the phase, and the class; one
that only sees a step at a time is left guessing.  Word frequencies
follow a Zipf law inside each class.

Output is deterministic given the seed; the repository ships the files
this script writes.
"""

import argparse
from pathlib import Path

import numpy as np

ONSETS = list("bdfghklmnprstvwz")
CODAS = list("klmnrst")
VOWELS = {"front": list("ei"), "back": list("aou")}
CODA_PROB = 0.3
CLUSTER_PROB = 0.4
SENTENCE_WORDS = (4, 12)
SYLLABLES = (3, 4)
ZIPF_EXPONENT = 1.05


def build_lexicon(rng: np.random.Generator, size: int, cls: str) -> list[str]:
    vowels = VOWELS[cls]
    words = []
    seen = set()
    while len(words) < size:
        count = rng.integers(SYLLABLES[0], SYLLABLES[1] + 1)
        phase = rng.integers(len(vowels))
        parts = []
        for k in range(count):
            parts.append(ONSETS[rng.integers(len(ONSETS))])
            if rng.uniform() < CLUSTER_PROB:
                parts.append(ONSETS[rng.integers(len(ONSETS))])
            # vowels cycle deterministically from the word's phase
            parts.append(vowels[(phase + k) % len(vowels)])
            if rng.uniform() < CODA_PROB:
                parts.append(CODAS[rng.integers(len(CODAS))])
        word = "".join(parts)
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def zipf_weights(size: int) -> np.ndarray:
    ranks = np.arange(1, size + 1, dtype=np.float64)
    w = ranks ** -ZIPF_EXPONENT
    return w / w.sum()


def emit_text(rng: np.random.Generator, lexicons: dict, chars: int) -> str:
    weights = {cls: zipf_weights(len(words)) for cls, words in lexicons.items()}
    classes = list(lexicons)
    lines = []
    total = 0
    while total < chars:
        cls = classes[rng.integers(len(classes))]
        words = lexicons[cls]
        count = rng.integers(SENTENCE_WORDS[0], SENTENCE_WORDS[1] + 1)
        picks = rng.choice(len(words), size=count, p=weights[cls])
        # every word is said three times; the repeats are pure recall at a
        # distance of one word length, which only multi-step credit reaches
        line = " ".join(w for i in picks for w in (words[i],) * 3)
        lines.append(line)
        total += len(line) + 1
    return "\n".join(lines) + "\n"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="corpora")
    parser.add_argument("--seed", type=int, default=20260822)
    parser.add_argument("--lexicon-size", type=int, default=600,
                        help="words per harmony class")
    parser.add_argument("--train-chars", type=int, default=1_050_000)
    parser.add_argument("--valid-chars", type=int, default=105_000)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    lexicons = {cls: build_lexicon(rng, args.lexicon_size, cls)
                for cls in ("front", "back")}

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.txt").write_text(emit_text(rng, lexicons, args.train_chars))
    (out / "valid.txt").write_text(emit_text(rng, lexicons, args.valid_chars))
    for cls, words in lexicons.items():
        print(f"{cls}: {len(words)} words, e.g. {', '.join(words[:4])}")
    print(f"wrote {out / 'train.txt'} and {out / 'valid.txt'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
