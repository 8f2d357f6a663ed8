"""Interaction records, JSON-lines I/O, splits, K-shot sampling and model samples."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import IntegrityError, SampleSizeError
from .text import TokenSequence, Vocabulary, build_instruction, tokenize

log = logging.getLogger(__name__)

MAX_LIKED = 10


@dataclass
class Item:
    id: str
    title: str
    audio_path: str | None = None
    cls: int | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {"id": self.id, "title": self.title, "class": self.cls, "audio": self.audio_path}
        d.update(self.extra)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Item":
        d = dict(d)
        return cls(
            id=str(d.pop("id")),
            title=d.pop("title", "") or "",
            audio_path=d.pop("audio", None),
            cls=d.pop("class", None),
            extra=d,
        )


@dataclass
class InteractionRecord:
    user: str
    history: list[tuple[str, bool]]
    target: str
    label: int | None

    def to_json(self) -> dict:
        return {
            "user": self.user,
            "history": [{"item": i, "liked": bool(l)} for i, l in self.history],
            "target": self.target,
            "label": self.label,
        }

    @classmethod
    def from_json(cls, d: dict) -> "InteractionRecord":
        history = [(str(h["item"]), bool(h["liked"])) for h in d.get("history", [])]
        label = d.get("label")
        return cls(str(d["user"]), history, str(d["target"]), None if label is None else int(label))

    def liked_items(self, limit: int = MAX_LIKED) -> list[str]:
        """Most recent ``limit`` liked items, oldest first."""
        liked = [item for item, was_liked in self.history if was_liked]
        return liked[-limit:] if limit else []


def write_jsonl(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise IntegrityError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc
    return rows


def load_items(path) -> dict[str, Item]:
    items = {}
    for row in read_jsonl(path):
        item = Item.from_json(row)
        items[item.id] = item
    return items


def load_interactions(path, items: Mapping[str, Item] | None = None) -> list[InteractionRecord]:
    """Read and validate an interactions JSON-lines file.

    When ``items`` is None, ``items.jsonl`` beside ``path`` is used (if it
    exists) for referential-integrity checks.

    Raises:
        IntegrityError: a record targets an item already in its history,
            carries a non-binary label, or references unknown items.
    """
    path = Path(path)
    if items is None:
        sibling = path.with_name("items.jsonl")
        items = load_items(sibling) if sibling.exists() else None
    rows = read_jsonl(path)
    if not rows:
        log.warning("%s: no interactions", path)
        return []
    records = []
    dangling: set[str] = set()
    for n, row in enumerate(rows, 1):
        try:
            rec = InteractionRecord.from_json(row)
        except (KeyError, TypeError, ValueError) as exc:
            raise IntegrityError(f"{path}: record {n} is malformed: {exc}") from exc
        if rec.target in {item for item, _ in rec.history}:
            raise IntegrityError(f"{path}: record {n} has target {rec.target} in its own history")
        if rec.label not in (None, 0, 1):
            raise IntegrityError(f"{path}: record {n} has non-binary label {rec.label}")
        if items is not None:
            for item in [rec.target, *(i for i, _ in rec.history)]:
                if item not in items:
                    dangling.add(item)
        records.append(rec)
    if dangling:
        raise IntegrityError(f"{path}: unknown item ids: {', '.join(sorted(dangling))}")
    return records


def split_by_time(
    records: Sequence[InteractionRecord], fractions: tuple[float, float] = (0.8, 0.9)
) -> dict[str, list[InteractionRecord]]:
    """Per-user chronological 80/10/10 split (file order is time order)."""
    by_user: dict[str, list[InteractionRecord]] = {}
    for rec in records:
        by_user.setdefault(rec.user, []).append(rec)
    out: dict[str, list[InteractionRecord]] = {"train": [], "val": [], "test": []}
    for recs in by_user.values():
        n = len(recs)
        a, b = int(round(fractions[0] * n)), int(round(fractions[1] * n))
        out["train"].extend(recs[:a])
        out["val"].extend(recs[a:b])
        out["test"].extend(recs[b:])
    return out


def kshot_sample(records: Sequence, k: int, seed: int) -> list:
    """Draw ``k`` records without replacement, stratified on the label.

    The positive count is ``round(k * positive_rate)`` of the source split
    (clipped to what is available), so the sample's positive rate is within
    one record of the split's.
    """
    n = len(records)
    if k > n:
        raise SampleSizeError(f"K={k} exceeds the {n} records available")
    rng = np.random.default_rng(seed)
    if k == n:
        return [records[i] for i in rng.permutation(n)]
    labels = np.array([r.label for r in records])
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels != 1)
    n_pos = int(round(k * len(pos) / n))
    n_pos = min(max(n_pos, k - len(neg)), len(pos))
    chosen = np.concatenate(
        [rng.choice(pos, n_pos, replace=False), rng.choice(neg, k - n_pos, replace=False)]
    )
    return [records[i] for i in chosen[rng.permutation(k)]]


@dataclass
class RecSample:
    """One model input: instruction tokens plus liked/target audio features."""

    text: str
    tokens: TokenSequence
    liked: tuple[str, ...]
    target: str
    label: int
    liked_audio: list[np.ndarray] = field(default_factory=list, repr=False)
    target_audio: np.ndarray | None = field(default=None, repr=False)


def build_samples(
    records: Sequence[InteractionRecord],
    catalog: Mapping[str, Item],
    vocab: Vocabulary,
    features: Mapping[str, np.ndarray] | None = None,
    max_liked: int = MAX_LIKED,
) -> list[RecSample]:
    samples = []
    for rec in records:
        text = build_instruction(rec, catalog)
        liked = tuple(rec.liked_items(max_liked))
        liked_audio, target_audio = [], None
        if features is not None:
            liked_audio = [features[i] for i in liked]
            target_audio = features[rec.target]
        samples.append(
            RecSample(text, tokenize(text, vocab), liked, rec.target, int(rec.label or 0), liked_audio, target_audio)
        )
    return samples
