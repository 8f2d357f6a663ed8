"""Instruction rendering, word-level vocabulary and fixed-length tokenization."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

log = logging.getLogger(__name__)

MAX_LEN = 512
HEAD_TOKENS = 384
TAIL_TOKENS = 126

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")

INSTRUCTION = (
    "Instruction: Given the user's liked and disliked videos, "
    "predict whether the user will like the target video."
)
UNTITLED = "<untitled>"

# item id -> number of times a missing title was replaced by the placeholder
missing_titles: Counter = Counter()

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def _title(catalog: Mapping, item_id) -> str:
    item = catalog.get(item_id)
    title = item if item is None or isinstance(item, str) else item.title
    if not title:
        missing_titles[item_id] += 1
        log.warning("no title for item %s; using placeholder", item_id)
        return UNTITLED
    return str(title)


def build_instruction(record, catalog: Mapping) -> str:
    """Render one interaction as instruction text.

    ``catalog`` maps item id to an object with a ``title`` attribute (or
    directly to a title string).  The label is deliberately absent.
    """
    liked = [_title(catalog, item) for item, was_liked in record.history if was_liked]
    disliked = [_title(catalog, item) for item, was_liked in record.history if not was_liked]
    return "\n".join(
        [
            INSTRUCTION,
            "Liked: " + ("; ".join(liked) if liked else "none"),
            "Disliked: " + ("; ".join(disliked) if disliked else "none"),
            "Target: " + _title(catalog, record.target),
        ]
    )


def words(text: str) -> list[str]:
    """Lowercased word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token <-> id map with four reserved ids (pad, unknown, begin, end)."""

    def __init__(self, tokens: Iterable[str]):
        self.itos: list[str] = list(RESERVED)
        for tok in tokens:
            if tok in RESERVED:
                continue
            self.itos.append(tok)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self.itos)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                tok, idx = line.rsplit("\t", 1)
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: vocabulary ids are not contiguous from 0")
        if tuple(t for _, t in pairs[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or reordered")
        return cls(t for _, t in pairs[len(RESERVED) :])


def build_vocab(corpus: Iterable[str], max_size: int = 2000) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent words; ties go lexicographically."""
    counts: Counter = Counter()
    for text in corpus:
        counts.update(words(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    budget = max(max_size - len(RESERVED), 0)
    return Vocabulary(tok for tok, _ in ranked[:budget])


@dataclass
class TokenSequence:
    ids: np.ndarray
    attention_mask: np.ndarray
    n_real: int


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_LEN) -> TokenSequence:
    """begin + ids + end, padded to ``max_len``.

    Over-long inputs keep their first ``HEAD_TOKENS`` and last
    ``TAIL_TOKENS`` word ids so both the instruction and the target title
    survive.
    """
    ids = [vocab.id(tok) for tok in words(text)]
    room = max_len - 2
    if len(ids) > room:
        head = min(HEAD_TOKENS, room)
        ids = ids[:head] + ids[len(ids) - (room - head) :]
    seq = np.full(max_len, PAD, dtype=np.int64)
    n_real = len(ids) + 2
    seq[0] = BOS
    seq[1 : n_real - 1] = ids
    seq[n_real - 1] = EOS
    mask = np.zeros(max_len, dtype=np.int8)
    mask[:n_real] = 1
    return TokenSequence(seq, mask, n_real)
