"""Corpus ingestion: vocabulary construction, tokenization, batch iteration.

Two tokenization modes. Word mode splits on whitespace and keeps the most
frequent tokens up to a cap; char mode keeps every distinct character.
Both append an end-of-sequence token per line and map anything unseen to the
unknown token. A token stream is a flat int64 array per split.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"


@dataclass
class Vocab:
    id_to_token: list
    token_to_id: dict
    mode: str            # "word" or "char"
    unk_id: int
    eos_id: int

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def save_tokens(self, path) -> None:
        """One token per line; the id is the line number."""
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")


def _make_vocab(tokens: list, mode: str) -> Vocab:
    id_to_token = [UNK_TOKEN, EOS_TOKEN] + tokens
    return Vocab(
        id_to_token=id_to_token,
        token_to_id={tok: i for i, tok in enumerate(id_to_token)},
        mode=mode,
        unk_id=0,
        eos_id=1,
    )


def vocab_from_tokens(id_to_token: list, mode: str) -> Vocab:
    """Rebuild a vocabulary from a stored token list.

    The list must be exactly what a prior build produced, specials
    included, so ids stay stable across save and load.
    """
    if mode not in ("word", "char"):
        raise ValueError(f"unknown tokenizer mode {mode!r}")
    if len(id_to_token) < 2 or id_to_token[0] != UNK_TOKEN \
            or id_to_token[1] != EOS_TOKEN:
        raise ValueError("token list does not start with the special tokens")
    return Vocab(
        id_to_token=list(id_to_token),
        token_to_id={tok: i for i, tok in enumerate(id_to_token)},
        mode=mode,
        unk_id=0,
        eos_id=1,
    )


def build_vocab(text: str, mode: str, max_size: int) -> Vocab:
    """Deterministic vocabulary over a corpus string.

    Word mode ranks whitespace tokens by frequency (ties broken
    lexicographically) and keeps max_size - 2 of them after the two special
    tokens. Char mode keeps every distinct character, ordered by codepoint.
    """
    if mode not in ("word", "char"):
        raise ValueError(f"unknown tokenization mode {mode!r}")
    if not text.strip():
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if mode == "word":
        counts = Counter(text.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = [tok for tok, _ in ranked[: max(0, max_size - 2)]]
        return _make_vocab(kept, mode)
    chars = sorted({ch for line in text.splitlines() for ch in line})
    if max_size - 2 < len(chars):
        counts = Counter(ch for line in text.splitlines() for ch in line)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        chars = sorted(tok for tok, _ in ranked[: max(0, max_size - 2)])
    return _make_vocab(chars, mode)


def encode(text: str, vocab: Vocab) -> np.ndarray:
    """Line-by-line tokenization with an end-of-sequence id after each line."""
    ids = []
    for line in text.splitlines():
        if vocab.mode == "word":
            ids.extend(vocab.lookup(tok) for tok in line.split())
        else:
            ids.extend(vocab.lookup(ch) for ch in line)
        ids.append(vocab.eos_id)
    return np.asarray(ids, dtype=np.int64)


def decode(stream, vocab: Vocab) -> str:
    """Inverse of encode for in-vocabulary canonical text."""
    lines, current = [], []
    for tid in stream:
        if tid == vocab.eos_id:
            joiner = " " if vocab.mode == "word" else ""
            lines.append(joiner.join(current))
            current = []
        else:
            current.append(vocab.id_to_token[int(tid)])
    joiner = " " if vocab.mode == "word" else ""
    tail = joiner.join(current) if current else ""
    return "\n".join(lines) + ("\n" if lines else "") + tail


def batchify(stream: np.ndarray, batch: int, steps: int, shuffle_seed=None):
    """Yield (inputs, targets) grids of shape (batch, steps).

    The stream is cut into `batch` contiguous equal shards; each shard is
    walked in non-overlapping windows, and targets are the inputs shifted by
    one token. The remainder that fits no full window is dropped. With
    shuffle_seed set, the window order is permuted deterministically.
    """
    stream = np.asarray(stream)
    need = batch * (steps + 1)
    if stream.shape[0] < need:
        raise ValueError(
            f"stream of {stream.shape[0]} tokens is too short for "
            f"batch={batch}, steps={steps}; need at least {need}"
        )
    shard_len = stream.shape[0] // batch
    shards = stream[: batch * shard_len].reshape(batch, shard_len)
    windows = (shard_len - 1) // steps
    order = range(windows)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(windows)
    for w in order:
        lo = int(w) * steps
        yield shards[:, lo:lo + steps], shards[:, lo + 1:lo + steps + 1]


def num_batches(stream_len: int, batch: int, steps: int) -> int:
    shard_len = stream_len // batch
    return max(0, (shard_len - 1) // steps)
