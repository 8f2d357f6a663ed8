"""Dataset directories, cached FBank extraction and model-ready sample splits."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import FbankConfig, fbank, load_wav, read_fbk, truncate, write_fbk
from .data import InteractionRecord, Item, RecSample, build_samples, load_interactions, load_items, split_by_time
from .errors import ATFLRecError, FeatureExtractionError
from .text import Vocabulary, build_instruction, build_vocab

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    root: Path
    items: dict[str, Item]
    interactions: list[InteractionRecord]

    @property
    def splits(self) -> dict[str, list[InteractionRecord]]:
        return split_by_time(self.interactions)

    def digest(self) -> str:
        """sha256 over the item table and the interaction file."""
        h = hashlib.sha256()
        for name in ("items.jsonl", "interactions.jsonl"):
            h.update((self.root / name).read_bytes())
        return h.hexdigest()

    def audio_path(self, item_id: str) -> Path:
        return self.root / self.items[item_id].audio_path


def load_dataset(root) -> Dataset:
    root = Path(root)
    items = load_items(root / "items.jsonl")
    return Dataset(root, items, load_interactions(root / "interactions.jsonl", items))


def feature_dir(root, cfg: FbankConfig) -> Path:
    return Path(root) / "features" / cfg.fingerprint()


def _extract_one(args) -> tuple[str, bool]:
    wav, out, cfg = args
    try:
        m = fbank(truncate(load_wav(wav), cfg.max_seconds), cfg)
    except ATFLRecError as exc:
        raise FeatureExtractionError(wav, exc) from exc
    except OSError as exc:
        raise FeatureExtractionError(wav, exc) from exc
    write_fbk(out, m)
    return str(out), True


def _fresh(fbk: Path, wav: Path) -> bool:
    return fbk.exists() and fbk.stat().st_mtime_ns >= wav.stat().st_mtime_ns


def extract_features(
    dataset: Dataset, cfg: FbankConfig, jobs: int = 1, force: bool = False
) -> tuple[dict[str, np.ndarray], dict]:
    """FBank features for every item, cached as FBK1 files per config fingerprint.

    A cached file is reused when it is at least as new as its WAV.  Returns
    (item id -> [frames, n_mels] array, {"computed": n, "cached": n, "dir": path}).
    """
    out_dir = feature_dir(dataset.root, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"fingerprint": cfg.fingerprint(), "fbank": cfg.to_dict()}
    meta_path = out_dir / "config.json"
    if not meta_path.exists() or json.loads(meta_path.read_text()) != meta:
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    todo = []
    paths = {}
    for item_id in sorted(dataset.items):
        if not dataset.items[item_id].audio_path:
            continue
        wav = dataset.audio_path(item_id)
        fbk = out_dir / f"{item_id}.fbk"
        paths[item_id] = fbk
        if force or not _fresh(fbk, wav):
            todo.append((wav, fbk, cfg))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_extract_one, todo, chunksize=16))
    else:
        for job in todo:
            _extract_one(job)
    feats = {}
    for item_id, fbk in paths.items():
        m = read_fbk(fbk, cfg.fingerprint())
        if m.n_mels != cfg.n_mels:
            raise FeatureExtractionError(fbk, ValueError(f"has {m.n_mels} mels, expected {cfg.n_mels}"))
        feats[item_id] = m.values
    stats = {"computed": len(todo), "cached": len(paths) - len(todo), "dir": str(out_dir)}
    log.info("features: %(computed)d computed, %(cached)d cached in %(dir)s", stats)
    return feats, stats


def make_samples(
    dataset: Dataset, features: dict[str, np.ndarray] | None, vocab_size: int, vocab: Vocabulary | None = None
) -> tuple[Vocabulary, dict[str, list[RecSample]]]:
    """Vocabulary from the training split's instructions, and samples for every split."""
    splits = dataset.splits
    if vocab is None:
        vocab = build_vocab((build_instruction(r, dataset.items) for r in splits["train"]), max_size=vocab_size)
    samples = {name: build_samples(recs, dataset.items, vocab, features) for name, recs in splits.items()}
    return vocab, samples


def default_results_root() -> Path:
    return Path(os.environ.get("ATFLREC_RESULTS_DIR", "results"))
