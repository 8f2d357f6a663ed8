"""Low-rank adapters on frozen linear maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class LoraConfig:
    r: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.r <= 0:
            raise ConfigError(f"LoRA rank must be positive, got {self.r}")
        unknown = set(self.targets) - {"q", "k", "v", "o"}
        if unknown:
            raise ConfigError(f"unknown LoRA targets {sorted(unknown)}; choose from q, k, v, o")

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


class LoraAdapter:
    """``delta(x) = (alpha / r) * (x @ A) @ B`` with A Gaussian and B zero at init."""

    def __init__(self, target: str, d_in: int, d_out: int, cfg: LoraConfig, rng: np.random.Generator):
        if cfg.r <= 0:
            raise ConfigError(f"LoRA rank must be positive, got {cfg.r}")
        self.target = target
        self.r = cfg.r
        self.alpha = cfg.alpha
        self.A = Tensor(rng.normal(0.0, 1.0 / cfg.r, (d_in, cfg.r)), requires_grad=True)
        self.B = Tensor(np.zeros((cfg.r, d_out)), requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def delta_weight(self) -> np.ndarray:
        return self.scaling * (self.A.data @ self.B.data)

    def parameters(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}


def lora_linear(x: Tensor, weight: Tensor, bias: Tensor | None, adapter: LoraAdapter | None) -> Tensor:
    """``x @ W + bias + (alpha / r) * (x @ A) @ B``; W is treated as frozen by the caller."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"lora_linear input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = x @ weight
    if bias is not None:
        y = y + bias
    if adapter is not None:
        y = y + ((x @ adapter.A) @ adapter.B) * adapter.scaling
    return y


def merge(weight: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    return weight + adapter.delta_weight()
