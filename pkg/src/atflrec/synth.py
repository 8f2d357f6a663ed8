"""Synthetic multimodal interaction world with a known, tunable signal.

Every item has a latent class.  Its audio is rendered from the tones of an
"audio class" and its title from the words of a "text class"; each observed
class equals the latent one with probability equal to that modality's signal
strength and is otherwise uniform.  Each user likes half of the classes and
labels are Bernoulli(sigmoid(gain * preference)).  Because the generative
parameters are known, the Bayes-optimal score of every interaction can be
computed exactly and serves as an oracle for the learned models.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from .audio import TARGET_RATE, Waveform, save_wav
from .data import InteractionRecord, Item, write_jsonl
from .errors import ConfigError
from .metrics import auc

log = logging.getLogger(__name__)

CLASS_WORDS = (
    ("recipe", "kitchen", "bake", "spice", "dinner", "chef"),
    ("match", "goal", "stadium", "league", "sprint", "coach"),
    ("guitar", "concert", "melody", "drums", "chorus", "band"),
    ("island", "journey", "passport", "beach", "mountain", "voyage"),
    ("quest", "arcade", "level", "console", "boss", "speedrun"),
    ("physics", "rocket", "atom", "galaxy", "experiment", "lab"),
    ("puppy", "kitten", "parrot", "leash", "aquarium", "hamster"),
    ("runway", "denim", "jacket", "sneaker", "tailor", "vintage"),
)
NEUTRAL_WORDS = (
    "amazing", "daily", "vlog", "episode", "moments", "highlights",
    "part", "new", "best", "ultimate", "short", "story",
)

BASE_FREQ = 200.0
TONE_RATIO = 2.3  # second tone of each class sits at this multiple of the first
MAX_TONE = 7600.0


@dataclass(frozen=True)
class WorldSpec:
    n_users: int = 200
    n_items: int = 500
    n_latent_classes: int = 4
    audio_signal_strength: float = 1.0
    text_signal_strength: float = 1.0
    seed: int = 0
    interactions_per_user: int = 20
    affinity_gain: float = 4.0
    audio_seconds: float = 0.5
    noise_std: float = 0.02

    def __post_init__(self):
        for name in ("audio_signal_strength", "text_signal_strength"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.n_latent_classes < 2:
            raise ConfigError("n_latent_classes must be at least 2")
        if self.n_latent_classes > len(CLASS_WORDS):
            raise ConfigError(f"at most {len(CLASS_WORDS)} latent classes are supported")
        if self.interactions_per_user > self.n_items:
            raise ConfigError("interactions_per_user exceeds n_items")
        if self.n_users < 1 or self.interactions_per_user < 1:
            raise ConfigError("need at least one user and one interaction per user")
        if self.audio_seconds * TARGET_RATE < 400:
            raise ConfigError("audio_seconds too short for a single 25 ms frame")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown WorldSpec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class World:
    spec: WorldSpec
    seed: int
    items: list[Item]
    latent: np.ndarray  # [n_items] true class
    audio_class: np.ndarray  # [n_items] class the audio was rendered from
    text_class: np.ndarray  # [n_items] class the title was drawn from
    prefs: np.ndarray  # [n_users, n_classes] in {-1, +1}
    interactions: list[InteractionRecord]

    @property
    def catalog(self) -> dict[str, Item]:
        return {it.id: it for it in self.items}

    def index(self, item_id: str) -> int:
        return int(item_id[1:])


def item_id(k: int) -> str:
    return f"i{k:04d}"


def user_id(u: int) -> str:
    return f"u{u:04d}"


def class_frequencies(n_classes: int) -> np.ndarray:
    """[n_classes, 2] tone pair per class, geometrically spaced below MAX_TONE."""
    ratio = 1.45
    if n_classes > 1:
        ratio = min(ratio, (MAX_TONE / (TONE_RATIO * BASE_FREQ)) ** (1.0 / (n_classes - 1)))
    f1 = BASE_FREQ * ratio ** np.arange(n_classes)
    return np.stack([f1, TONE_RATIO * f1], axis=1)


def _observed(rng, latent, strength, n_classes):
    keep = rng.random(latent.size) < strength
    return np.where(keep, latent, rng.integers(0, n_classes, latent.size))


def render_audio(spec: WorldSpec, seed: int, index: int, audio_cls: int) -> Waveform:
    """Deterministic in (spec, seed, index): two class tones, a distractor, noise."""
    rng = np.random.default_rng([seed, 1, index])
    n = int(round(spec.audio_seconds * TARGET_RATE))
    t = np.arange(n) / TARGET_RATE
    x = np.zeros(n)
    for f in class_frequencies(spec.n_latent_classes)[audio_cls]:
        amp = 0.3 * (1.0 + 0.1 * rng.uniform(-1, 1))
        x += amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    f_dist = rng.uniform(150.0, 7000.0)
    x += 0.1 * np.sin(2 * np.pi * f_dist * t + rng.uniform(0, 2 * np.pi))
    x += rng.normal(0.0, spec.noise_std, n)
    return Waveform(np.clip(x, -1.0, 1.0), TARGET_RATE)


def generate_world(spec: WorldSpec, seed: int | None = None) -> World:
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0])
    n, c = spec.n_items, spec.n_latent_classes

    latent = rng.integers(0, c, n)
    audio_cls = _observed(rng, latent, spec.audio_signal_strength, c)
    text_cls = _observed(rng, latent, spec.text_signal_strength, c)

    items = []
    for k in range(n):
        words = list(rng.choice(CLASS_WORDS[text_cls[k]], 2, replace=False))
        words.append(NEUTRAL_WORDS[rng.integers(len(NEUTRAL_WORDS))])
        items.append(
            Item(
                item_id(k),
                " ".join(words),
                audio_path=f"audio/{item_id(k)}.wav",
                cls=int(latent[k]),
                extra={"audio_class": int(audio_cls[k]), "text_class": int(text_cls[k])},
            )
        )

    prefs = -np.ones((spec.n_users, c), dtype=np.int64)
    for u in range(spec.n_users):
        prefs[u, rng.permutation(c)[: c // 2]] = 1

    records = []
    for u in range(spec.n_users):
        chosen = rng.choice(n, spec.interactions_per_user, replace=False)
        p_like = expit(spec.affinity_gain * prefs[u, latent[chosen]])
        labels = (rng.random(chosen.size) < p_like).astype(int)
        history: list[tuple[str, bool]] = []
        for k, y in zip(chosen, labels):
            records.append(InteractionRecord(user_id(u), list(history), item_id(k), int(y)))
            history.append((item_id(k), bool(y)))
    return World(spec, seed, items, latent, audio_cls, text_cls, prefs, records)


def class_posterior(spec: WorldSpec, audio_cls, text_cls) -> np.ndarray:
    """P(latent = k | observed audio class, observed text class), shape [..., n_classes]."""
    c = spec.n_latent_classes
    ks = np.arange(c)

    def lik(obs, s):
        return s * (np.asarray(obs)[..., None] == ks) + (1.0 - s) / c

    joint = lik(audio_cls, spec.audio_signal_strength) * lik(text_cls, spec.text_signal_strength)
    return joint / joint.sum(axis=-1, keepdims=True)


def oracle_scores(world: World, records=None) -> np.ndarray:
    """Bayes P(like) per record from the generative parameters."""
    records = world.interactions if records is None else records
    idx = np.array([world.index(r.target) for r in records])
    users = np.array([int(r.user[1:]) for r in records])
    post = class_posterior(world.spec, world.audio_class[idx], world.text_class[idx])
    like = expit(world.spec.affinity_gain * world.prefs[users])
    return (post * like).sum(axis=1)


def oracle_auc(world: World, records=None) -> float:
    records = world.interactions if records is None else records
    return auc(oracle_scores(world, records), [r.label for r in records])


def summary(world: World) -> dict:
    labels = np.array([r.label for r in world.interactions])
    return {
        "n_users": world.spec.n_users,
        "n_items": world.spec.n_items,
        "n_interactions": int(labels.size),
        "positive_rate": float(labels.mean()),
        "oracle_auc": oracle_auc(world),
    }


def write_world(world: World, out_dir) -> dict:
    """Emit items.jsonl, interactions.jsonl, audio/*.wav and world.json."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "items.jsonl", [it.to_json() for it in world.items])
    write_jsonl(out / "interactions.jsonl", [r.to_json() for r in world.interactions])
    for k, it in enumerate(world.items):
        save_wav(out / it.audio_path, render_audio(world.spec, world.seed, k, int(world.audio_class[k])))
    stats = summary(world)
    meta = {
        "spec": world.spec.to_dict(),
        "seed": world.seed,
        "prefs": world.prefs.tolist(),
        "stats": stats,
    }
    (out / "world.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d items and %d interactions to %s", len(world.items), len(world.interactions), out)
    return stats


def load_world_meta(dataset_dir) -> dict:
    return json.loads((Path(dataset_dir) / "world.json").read_text())
