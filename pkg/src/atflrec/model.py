"""Transformer text encoder with LoRA, the three fine-tuning topologies, and checkpoints.

Topologies:

* ``DualLora``: text adapters inside the encoder, a separate audio adapter on
  the embedder's second projection; the two modality features are pooled
  (``cross_modal_pool``) before the classifier.
* ``SingleLoraFused``: the pooled audio feature is added to position 0's
  input embedding and one shared adapter set tunes the single encoder pass.
* ``TextOnlyLora``: encoder plus classifier on text alone.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import functional as F
from .embedder import HIDDEN, AudioEmbedder, fuse_item_audio
from .errors import ConfigError, DimensionError, EmptyInputError, IntegrityError, MissingModalityError
from .lora import LoraAdapter, LoraConfig, lora_linear, merge
from .tensor import Tensor, concat, select, take_rows

VARIANTS = ("DualLora", "SingleLoraFused", "TextOnlyLora")
MASK_BIAS = -1e9


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_width: int = 256
    max_len: int = 512
    vocab_size: int = 2000
    dropout: float = 0.1
    causal: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.max_len != 512:
            raise ConfigError(f"max_len must be 512, got {self.max_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class VariantConfig:
    variant: str = "DualLora"
    intra_audio_pool: str = "max"
    cross_modal_pool: str = "sum"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}")
        for name in ("intra_audio_pool", "cross_modal_pool"):
            if getattr(self, name) not in F.POOL_METHODS:
                raise ConfigError(f"{name} must be one of {', '.join(F.POOL_METHODS)}")

    @property
    def uses_audio(self) -> bool:
        return self.variant != "TextOnlyLora"


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    n_mels: int = 80
    base_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora"]["targets"] = list(self.lora.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        _reject_unknown(cls, d)
        enc = d.pop("encoder", {})
        var = d.pop("variant", {})
        lora = dict(d.pop("lora", {}))
        for sub, raw in ((EncoderConfig, enc), (VariantConfig, var), (LoraConfig, lora)):
            _reject_unknown(sub, raw)
        if "targets" in lora:
            lora["targets"] = tuple(lora["targets"])
        return cls(EncoderConfig(**enc), VariantConfig(**var), LoraConfig(**lora), **d)


def _reject_unknown(cls, d: dict) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------
@dataclass
class Batch:
    ids: np.ndarray  # [B, max_len]
    mask: np.ndarray  # [B, max_len]
    labels: np.ndarray  # [B]
    frames: np.ndarray | None = None  # all frames of the unique items, stacked
    offsets: np.ndarray | None = None  # item k owns frames[offsets[k]:offsets[k+1]]
    liked_idx: list[list[int]] = field(default_factory=list)
    target_idx: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def collate(samples: Sequence, with_audio: bool = True) -> Batch:
    """Stack token sequences and de-duplicate item audio across the batch."""
    ids = np.stack([s.tokens.ids for s in samples])
    mask = np.stack([s.tokens.attention_mask for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.float64)
    batch = Batch(ids, mask, labels)
    if not with_audio:
        return batch
    slot: dict[str, int] = {}
    mats: list[np.ndarray] = []

    def index(item, feat):
        if feat is None:
            raise MissingModalityError(f"no audio features for item {item}")
        if item not in slot:
            slot[item] = len(mats)
            mats.append(np.asarray(feat, dtype=np.float64))
        return slot[item]

    for s in samples:
        if s.target_audio is None or len(s.liked_audio) != len(s.liked):
            raise MissingModalityError(f"sample for target {s.target} lacks audio features")
        batch.liked_idx.append([index(i, f) for i, f in zip(s.liked, s.liked_audio)])
        batch.target_idx.append(index(s.target, s.target_audio))
    batch.frames = np.concatenate(mats, axis=0)
    batch.offsets = np.concatenate([[0], np.cumsum([m.shape[0] for m in mats])])
    return batch


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------
class Encoder:
    """Post-LN bidirectional (or causal) transformer; all weights frozen."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, f = cfg.d_model, cfg.ffn_width
        p: dict[str, Tensor] = {
            "tok_emb": Tensor(rng.normal(0.0, 1.0, (cfg.vocab_size, d))),
            "pos_emb": Tensor(rng.normal(0.0, 0.1, (cfg.max_len, d))),
        }
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            for name in ("q", "k", "v", "o"):
                p[pre + "w" + name] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)))
                p[pre + "b" + name] = Tensor(np.zeros(d))
            p[pre + "w1"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, f)))
            p[pre + "b1"] = Tensor(np.zeros(f))
            p[pre + "w2"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(f), (f, d)))
            p[pre + "b2"] = Tensor(np.zeros(d))
            for ln in ("ln1", "ln2"):
                p[pre + ln + "_g"] = Tensor(np.ones(d))
                p[pre + ln + "_b"] = Tensor(np.zeros(d))
        self.params = p

    def forward(
        self,
        ids: np.ndarray,
        mask: np.ndarray,
        adapters: dict[str, LoraAdapter] | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
        pos0: Tensor | None = None,
    ) -> Tensor:
        """Mean of the final hidden states over unmasked positions, ``[B, d_model]``."""
        x, mask = self.hidden(ids, mask, adapters, training, rng, pos0)
        return F.masked_mean(x, mask)

    def hidden(
        self,
        ids: np.ndarray,
        mask: np.ndarray,
        adapters: dict[str, LoraAdapter] | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
        pos0: Tensor | None = None,
    ) -> tuple[Tensor, np.ndarray]:
        """Final hidden states ``[B, L, d_model]`` and the trimmed mask ``[B, L]``.

        Only the first ``L`` positions are computed, where ``L`` is the last
        unmasked position in the batch; the rest are padding that can
        influence nothing.
        """
        cfg, p = self.cfg, self.params
        ids = np.atleast_2d(ids)
        mask = np.atleast_2d(mask).astype(bool)
        if ids.shape[-1] != cfg.max_len or mask.shape != ids.shape:
            raise DimensionError(f"token input must be [B, {cfg.max_len}], got {ids.shape} / {mask.shape}")
        if not mask.any(axis=1).all():
            raise EmptyInputError("attention mask is all zero for at least one sequence")
        adapters = adapters or {}
        L = int(np.flatnonzero(mask.any(axis=0)).max()) + 1
        ids, mask = ids[:, :L], mask[:, :L]
        B, d, h, dh = ids.shape[0], cfg.d_model, cfg.n_heads, cfg.head_dim
        p_drop = cfg.dropout if training else 0.0

        x = take_rows(p["tok_emb"], ids.reshape(-1)).reshape(B, L, d) + select(p["pos_emb"], slice(None, L))
        if pos0 is not None:
            x = x + concat([pos0.reshape(B, 1, d), Tensor(np.zeros((B, L - 1, d)))], axis=1)
        x = F.dropout(x, p_drop, rng, training)

        bias = np.where(mask, 0.0, MASK_BIAS)[:, None, None, :]
        if cfg.causal:
            bias = bias + np.triu(np.full((L, L), MASK_BIAS), k=1)[None, None]
        scale = 1.0 / np.sqrt(dh)

        def heads(t):
            return t.reshape(B, L, h, dh).transpose(0, 2, 1, 3)

        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            q, k, v = (
                lora_linear(x, p[pre + "w" + n], p[pre + "b" + n], adapters.get(pre + n)) for n in "qkv"
            )
            att = F.softmax((heads(q) @ heads(k).transpose(0, 1, 3, 2)) * scale, bias)
            o = (att @ heads(v)).transpose(0, 2, 1, 3).reshape(B, L, d)
            o = lora_linear(o, p[pre + "wo"], p[pre + "bo"], adapters.get(pre + "o"))
            x = F.layer_norm(x + F.dropout(o, p_drop, rng, training), p[pre + "ln1_g"], p[pre + "ln1_b"])
            ff = F.linear(F.gelu(F.linear(x, p[pre + "w1"], p[pre + "b1"])), p[pre + "w2"], p[pre + "b2"])
            x = F.layer_norm(x + F.dropout(ff, p_drop, rng, training), p[pre + "ln2_g"], p[pre + "ln2_b"])
        return x, mask


def classify(f: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Single linear layer ``d_model -> 1``; returns ``[B]`` logits."""
    if f.shape[-1] != weight.shape[0]:
        raise DimensionError(f"classifier expects width {weight.shape[0]}, got {f.shape[-1]}")
    out = F.linear(f, weight, bias)
    return out.reshape(out.shape[:-1])


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------
class ATFLRec:
    """Frozen encoder + variant-specific adapters, audio embedder and head.

    Frozen weights are drawn from ``cfg.base_seed`` so every run shares one
    base model; adapters and the head are drawn from ``seed``.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        enc, var = cfg.encoder, cfg.variant
        self.encoder = Encoder(enc, np.random.default_rng([cfg.base_seed, 0]))
        run_rng = np.random.default_rng([seed, 2])
        self.dropout_rng = np.random.default_rng([seed, 3])
        self.bn_use_running_stats = False

        self.text_prefix = "lora_shared" if var.variant == "SingleLoraFused" else "lora_text"
        self.text_adapters: dict[str, LoraAdapter] = {}
        for i in range(enc.n_layers):
            for t in cfg.lora.targets:
                self.text_adapters[f"layers.{i}.{t}"] = LoraAdapter(t, enc.d_model, enc.d_model, cfg.lora, run_rng)

        self.embedder: AudioEmbedder | None = None
        if var.uses_audio:
            self.embedder = AudioEmbedder(cfg.n_mels, enc.d_model, np.random.default_rng([cfg.base_seed, 1]))
            if var.variant == "DualLora":
                self.embedder.w2.requires_grad = False
                self.embedder.adapter = LoraAdapter("w2", HIDDEN, enc.d_model, cfg.lora, run_rng)

        self.head_w = Tensor(run_rng.normal(0.0, 1.0 / np.sqrt(enc.d_model), (enc.d_model, 1)), requires_grad=True)
        self.head_b = Tensor(np.zeros(1), requires_grad=True)

    # -- parameter bookkeeping -------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        for name, ad in self.text_adapters.items():
            out[f"{self.text_prefix}.{name}.A"] = ad.A
            out[f"{self.text_prefix}.{name}.B"] = ad.B
        if self.embedder is not None:
            out.update({f"audio.{k}": v for k, v in self.embedder.parameters().items()})
            if self.embedder.adapter is not None:
                out["lora_audio.w2.A"] = self.embedder.adapter.A
                out["lora_audio.w2.B"] = self.embedder.adapter.B
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def buffers(self) -> dict[str, Tensor]:
        if self.embedder is None:
            return {}
        return {f"audio.{k}": v for k, v in self.embedder.buffers().items()}

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def frozen_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if not v.requires_grad}

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.frozen_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    # -- forward -----------------------------------------------------------
    def _bn_training(self, training: bool) -> bool:
        return training and not self.bn_use_running_stats

    def embed_items(self, batch: Batch, training: bool = False, use_lora: bool = True) -> Tensor:
        """One audio feature per unique item in the batch, ``[n_items, d_model]``."""
        if self.embedder is None:
            raise ConfigError("TextOnlyLora has no audio pathway")
        if batch.frames is None:
            raise MissingModalityError(f"{self.cfg.variant.variant} needs audio features")
        seq = self.embedder.forward(batch.frames, self._bn_training(training), use_lora)
        return F.segment_pool(seq, batch.offsets, self.cfg.variant.intra_audio_pool)

    def audio_features(self, batch: Batch, training: bool = False, use_lora: bool = True) -> Tensor:
        items = self.embed_items(batch, training, use_lora)
        method = self.cfg.variant.intra_audio_pool
        d = self.cfg.encoder.d_model
        rows = []
        for liked, target in zip(batch.liked_idx, batch.target_idx):
            liked_rows = [take_rows(items, [j]).reshape(d) for j in liked]
            fused = fuse_item_audio(liked_rows, take_rows(items, [target]).reshape(d), method)
            rows.append(fused.reshape(1, d))
        return concat(rows, axis=0)

    def encode_text(self, batch: Batch, training: bool = False, use_lora: bool = True, pos0: Tensor | None = None) -> Tensor:
        return self.encoder.forward(
            batch.ids,
            batch.mask,
            self.text_adapters if use_lora else None,
            training,
            self.dropout_rng,
            pos0,
        )

    def fuse(self, batch: Batch, training: bool = False, use_lora: bool = True, audio: Tensor | None = None) -> Tensor:
        """Fused feature ``[B, d_model]``; ``audio`` may carry precomputed audio features."""
        var = self.cfg.variant.variant
        if var == "TextOnlyLora":
            return self.encode_text(batch, training, use_lora)
        if audio is None:
            audio = self.audio_features(batch, training, use_lora)
        if var == "SingleLoraFused":
            return self.encode_text(batch, training, use_lora, pos0=audio)
        text = self.encode_text(batch, training, use_lora)
        return F.pool([audio, text], self.cfg.variant.cross_modal_pool)

    def logits(self, batch: Batch, training: bool = False, use_lora: bool = True, audio: Tensor | None = None) -> Tensor:
        return classify(self.fuse(batch, training, use_lora, audio), self.head_w, self.head_b)

    def predict(self, batch: Batch, audio: Tensor | None = None) -> np.ndarray:
        return expit(self.logits(batch, training=False, audio=audio).data)

    # -- transforms ----------------------------------------------------------
    def merged(self) -> "ATFLRec":
        """Copy with every adapter folded into its base weight and removed."""
        m = copy.deepcopy(self)
        for name, ad in m.text_adapters.items():
            layer, target = name.rsplit(".", 1)
            w = m.encoder.params[f"{layer}.w{target}"]
            w.data = merge(w.data, ad)
        m.text_adapters = {}
        if m.embedder is not None and m.embedder.adapter is not None:
            m.embedder.w2.data = merge(m.embedder.w2.data, m.embedder.adapter)
            m.embedder.adapter = None
        return m


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
CKPT_MAGIC = b"ATFL"
CKPT_VERSION = 1


def _pack_str(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(model: ATFLRec) -> bytes:
    """Magic, version, variant tag, JSON config, then a named float64 table."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(_pack_str(model.cfg.variant.variant.encode()))
    cfg_json = json.dumps({"model": model.cfg.to_dict(), "seed": model.seed}, sort_keys=True)
    buf.write(_pack_str(cfg_json.encode()))
    table = {**model.named_parameters(), **model.buffers()}
    buf.write(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name].data, dtype="<f8")
        buf.write(_pack_str(name.encode()))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(model: ATFLRec, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> ATFLRec:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise IntegrityError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    def u32():
        return struct.unpack("<I", take(4))[0]

    if take(4) != CKPT_MAGIC:
        raise IntegrityError(f"{path}: not an ATFL checkpoint")
    version = u32()
    if version != CKPT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    tag = take(u32()).decode()
    meta = json.loads(take(u32()).decode())
    cfg = ModelConfig.from_dict(meta["model"])
    if cfg.variant.variant != tag:
        raise IntegrityError(f"{path}: variant tag {tag} disagrees with config {cfg.variant.variant}")
    model = ATFLRec(cfg, seed=meta.get("seed", 0))
    table = {**model.named_parameters(), **model.buffers()}
    seen = set()
    for _ in range(u32()):
        name = take(u32()).decode()
        ndim = u32()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        if name not in table:
            raise IntegrityError(f"{path}: unexpected parameter {name}")
        if table[name].shape != arr.shape:
            raise IntegrityError(f"{path}: {name} has shape {arr.shape}, expected {table[name].shape}")
        table[name].data[...] = arr
        seen.add(name)
    missing = set(table) - seen
    if missing:
        raise IntegrityError(f"{path}: missing parameters {sorted(missing)}")
    if pos != len(raw):
        raise IntegrityError(f"{path}: {len(raw) - pos} trailing bytes")
    return model


def score_samples(model: ATFLRec, samples: Sequence, batch_size: int = 32) -> np.ndarray:
    """Eval-mode sigmoid scores, in sample order.

    In eval mode an item's audio embedding does not depend on the rest of
    the batch, so every unique item is embedded once for the whole split.
    """
    if not samples:
        return np.zeros(0)
    audio = None
    if model.cfg.variant.uses_audio:
        audio = model.audio_features(collate(samples, True), training=False).data
    out = []
    for lo in range(0, len(samples), batch_size):
        chunk = collate(samples[lo : lo + batch_size], with_audio=False)
        rows = None if audio is None else Tensor(audio[lo : lo + batch_size])
        out.append(model.predict(chunk, rows))
    return np.concatenate(out)
