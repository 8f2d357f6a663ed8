"""One JSON document configuring a whole run: world, features, model, training, grid."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .audio import FbankConfig
from .errors import ConfigError
from .functional import POOL_METHODS
from .lora import LoraConfig
from .model import VARIANTS, EncoderConfig, ModelConfig, VariantConfig
from .synth import WorldSpec
from .train import TrainConfig


@dataclass(frozen=True)
class GridConfig:
    """Ablation axes; every combination is trained once per seed."""

    variants: tuple[str, ...] = VARIANTS
    pools: tuple[tuple[str, str], ...] = (("max", "sum"),)
    n_mels: tuple[int, ...] = (80,)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    k_shots: tuple[int, ...] = (500,)

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "pools", tuple(tuple(p) for p in self.pools))
        object.__setattr__(self, "n_mels", tuple(int(n) for n in self.n_mels))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "k_shots", tuple(int(k) for k in self.k_shots))
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; valid variants: {', '.join(VARIANTS)}")
        for p in self.pools:
            if len(p) != 2 or not set(p) <= set(POOL_METHODS):
                raise ConfigError(f"pool pair {p!r} must be two of {', '.join(POOL_METHODS)}")
        if not (self.variants and self.pools and self.n_mels and self.seeds and self.k_shots):
            raise ConfigError("every grid axis needs at least one value")

    @property
    def size(self) -> int:
        return len(self.variants) * len(self.pools) * len(self.n_mels) * len(self.seeds) * len(self.k_shots)

    def to_dict(self) -> dict:
        return {k: [list(p) for p in v] if k == "pools" else list(v) for k, v in asdict(self).items()}


_SECTIONS = {
    "world": WorldSpec,
    "fbank": FbankConfig,
    "encoder": EncoderConfig,
    "variant": VariantConfig,
    "lora": LoraConfig,
    "train": TrainConfig,
    "grid": GridConfig,
}


@dataclass(frozen=True)
class RunConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    fbank: FbankConfig = field(default_factory=FbankConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridConfig | None = field(default_factory=GridConfig)
    base_seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.encoder, self.variant, self.lora, n_mels=self.fbank.n_mels, base_seed=self.base_seed)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            sec = getattr(self, name)
            if sec is None:
                continue
            out[name] = sec.to_dict() if hasattr(sec, "to_dict") else asdict(sec)
        out["lora"]["targets"] = list(self.lora.targets)
        out["base_seed"] = self.base_seed
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @property
    def short_id(self) -> str:
        return self.fingerprint()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(_SECTIONS) - {"base_seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, typ in _SECTIONS.items():
            if name not in d:
                continue
            raw = d[name]
            if raw is None and name == "grid":
                kw[name] = None
                continue
            if not isinstance(raw, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(typ)}
            bad = set(raw) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            raw = dict(raw)
            if name == "lora" and "targets" in raw:
                raw["targets"] = tuple(raw["targets"])
            try:
                kw[name] = typ(**raw)
            except TypeError as exc:
                raise ConfigError(f"bad {name!r} section: {exc}") from exc
        if "base_seed" in d:
            kw["base_seed"] = int(d["base_seed"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def with_overrides(self, **sections) -> "RunConfig":
        return replace(self, **sections)

    def cell(self, variant: str, pool: tuple[str, str], n_mels: int, seed: int, k_shot: int) -> "RunConfig":
        """The single-run config for one grid cell (its grid is dropped)."""
        return replace(
            self,
            variant=VariantConfig(variant, pool[0], pool[1]),
            fbank=replace(self.fbank, n_mels=n_mels),
            train=replace(self.train, seed=seed, k_shot=k_shot),
            grid=None,
        )

    def cells(self) -> list["RunConfig"]:
        g = self.grid or GridConfig()
        return [
            self.cell(v, p, m, s, k)
            for v in g.variants
            for p in g.pools
            for m in g.n_mels
            for k in g.k_shots
            for s in g.seeds
        ]
