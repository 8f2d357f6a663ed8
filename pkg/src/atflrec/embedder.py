"""Frame-level MLP audio embedder, temporal pooling and liked/target fusion."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import functional as F
from .audio import FbankMatrix
from .errors import DimensionError, EmptyStackError
from .lora import LoraAdapter, lora_linear
from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)

HIDDEN = 256


class AudioEmbedder:
    """n_mels -> 256 -> SiLU -> d_model -> batchnorm, applied per frame."""

    def __init__(self, n_mels: int, d_model: int, rng: np.random.Generator, hidden: int = HIDDEN):
        self.n_mels, self.d_model, self.hidden = n_mels, d_model, hidden
        self.w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_mels), (n_mels, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d_model)), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)
        self.bn_gamma = Tensor(np.ones(d_model), requires_grad=True)
        self.bn_beta = Tensor(np.zeros(d_model), requires_grad=True)
        self.bn = F.BatchNormState(Tensor(np.zeros(d_model)), Tensor(np.ones(d_model)))
        self.adapter: LoraAdapter | None = None

    def parameters(self) -> dict[str, Tensor]:
        return {
            "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
            "bn_gamma": self.bn_gamma, "bn_beta": self.bn_beta,
        }

    def buffers(self) -> dict[str, Tensor]:
        return {"bn_mean": self.bn.running_mean, "bn_var": self.bn.running_var}

    def forward(self, frames, training: bool, use_lora: bool = True) -> Tensor:
        """``[frames, n_mels] -> [frames, d_model]``; the rows form the batchnorm batch."""
        x = as_tensor(frames.values if isinstance(frames, FbankMatrix) else frames)
        if x.ndim != 2 or x.shape[1] != self.n_mels:
            raise DimensionError(f"embedder expects [frames, {self.n_mels}], got {x.shape}")
        h = F.silu(F.linear(x, self.w1, self.b1))
        h = lora_linear(h, self.w2, self.b2, self.adapter if use_lora else None)
        return F.batch_norm(h, self.bn_gamma, self.bn_beta, self.bn, training)


def embed_frames(f, p: AudioEmbedder, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return p.forward(f, training=mode == "train")


def temporal_pool(seq: Tensor, method: str = "max") -> Tensor:
    seq = as_tensor(seq)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise EmptyStackError(f"temporal_pool needs [frames >= 1, d], got {seq.shape}")
    return F.segment_pool(seq, [0, seq.shape[0]], method).reshape(seq.shape[1])


def fuse_item_audio(liked: Sequence[Tensor], target: Tensor, method: str = "max") -> Tensor:
    """Pool the liked features, then pool {liked summary, target} the same way.

    An empty liked list (cold start) falls back to the target feature alone.
    """
    target = as_tensor(target)
    if not liked:
        log.debug("no liked items; audio feature is the target alone")
        return F.pool([target], method)
    for v in liked:
        if v.shape != target.shape:
            raise DimensionError(f"liked feature {v.shape} vs target {target.shape}")
    summary = F.pool(list(liked), method)
    return F.pool([summary, target], method)
