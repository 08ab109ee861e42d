"""Shared value types, label spaces and configuration for the defect synthesis GAN."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch

DOMAIN_NAMES = ("Normal", "Scratches", "Spots")
ANCHOR_ID = 0


class ConfigError(ValueError):
    """A configuration value violates a dimensional or range constraint."""


class UnknownDomainError(ValueError):
    pass


@dataclass(frozen=True)
class DefectDomain:
    id: int
    name: str

    @property
    def is_anchor(self) -> bool:
        return self.id == ANCHOR_ID


@dataclass(frozen=True)
class ProductLabel:
    id: int
    name: str


def domain_schema(n_domains: int = 3) -> tuple[DefectDomain, ...]:
    if not 2 <= n_domains <= len(DOMAIN_NAMES):
        raise ConfigError(f"n_domains must be in [2, {len(DOMAIN_NAMES)}], got {n_domains}")
    return tuple(DefectDomain(i, DOMAIN_NAMES[i]) for i in range(n_domains))


def product_schema(n_products: int = 3) -> tuple[ProductLabel, ...]:
    if n_products < 1:
        raise ConfigError(f"n_products must be >= 1, got {n_products}")
    return tuple(ProductLabel(i, product_name(i)) for i in range(n_products))


def product_name(index: int) -> str:
    # A, B, ..., Z, P26, P27, ...
    return chr(ord("A") + index) if index < 26 else f"P{index}"


def parse_domain(name: str | int, n_domains: int = 3) -> DefectDomain:
    """Resolve a domain by id or case-insensitive name."""
    schema = domain_schema(n_domains)
    if isinstance(name, int) or (isinstance(name, str) and name.isdigit()):
        idx = int(name)
        if 0 <= idx < n_domains:
            return schema[idx]
        raise UnknownDomainError(f"unknown domain id {idx}")
    for d in schema:
        if d.name.lower() == str(name).strip().lower():
            return d
    raise UnknownDomainError(f"unknown domain {name!r}")


def parse_product(name: str, n_products: int = 3) -> ProductLabel:
    for p in product_schema(n_products):
        if p.name.lower() == name.strip().lower():
            return p
    raise ValueError(f"unknown product {name!r}")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    latent_dim: int = 16
    style_dim: int = 64
    n_domains: int = 3
    n_products: int = 3
    bottleneck_channels: int = 32
    fg_channels: int = 8
    downsampling: int = 4
    base_channels: int = 16
    mapping_hidden: int = 64
    seed: int = 0

    @property
    def bg_channels(self) -> int:
        return self.bottleneck_channels - self.fg_channels

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // self.downsampling

    @property
    def n_down(self) -> int:
        return int(round(np.log2(self.downsampling)))


def validate_config(config: ModelConfig) -> ModelConfig:
    """Return ``config`` unchanged if all invariants hold, else raise ConfigError."""
    for f in dataclasses.fields(config):
        if f.name == "seed":
            continue
        if getattr(config, f.name) <= 0:
            raise ConfigError(f"{f.name} must be positive, got {getattr(config, f.name)}")
    if config.image_size % config.downsampling:
        raise ConfigError(
            f"image_size {config.image_size} not divisible by downsampling {config.downsampling}"
        )
    if 2 ** config.n_down != config.downsampling:
        raise ConfigError(f"downsampling must be a power of two, got {config.downsampling}")
    if config.fg_channels >= config.bottleneck_channels:
        raise ConfigError(
            f"Cfg must be < Cb (fg_channels={config.fg_channels}, "
            f"bottleneck_channels={config.bottleneck_channels})"
        )
    domain_schema(config.n_domains)
    return config


@dataclass(frozen=True)
class LossWeights:
    lambda_sd: float = 1.0
    lambda_d: float = 1.0
    lambda_ds: float = 1.0
    lambda_cyc: float = 1.0
    lambda_fg: float = 1.0
    lambda_bg: float = 1.0
    lambda_r1: float = 1.0
    ds_decay_steps: int = 1000

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{f.name} must be finite and >= 0, got {v}")

    def ds_weight(self, step: int) -> float:
        """Diversity weight, decayed linearly to zero over ``ds_decay_steps``."""
        if self.ds_decay_steps <= 0:
            return 0.0
        return self.lambda_ds * max(0.0, 1.0 - step / self.ds_decay_steps)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 8
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    lr_e: float = 1e-4
    lr_m: float = 1e-6
    beta1: float = 0.0
    beta2: float = 0.99
    ema_decay: float = 0.999
    checkpoint_every: int = 500
    log_every: int = 1
    sampling: str = "oversample"
    reference_ratio: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_g", "lr_d", "lr_e", "lr_m"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (diversity loss needs two latents)")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.sampling not in ("oversample", "natural"):
            raise ConfigError(f"sampling must be oversample|natural, got {self.sampling!r}")
        if not 0.0 <= self.reference_ratio <= 1.0:
            raise ConfigError("reference_ratio must be in [0, 1]")


@dataclass(frozen=True)
class ClassifierConfig:
    clf_depth: int = 8
    clf_width: int = 16
    grl_lambda: float = 0.1
    grl_warmup: float = 0.25
    clf_epochs: int = 12
    clf_lr: float = 1e-3
    clf_batch_size: int = 32
    clf_steps_per_epoch: int = 40
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.grl_lambda < 0:
            raise ConfigError("grl_lambda must be >= 0")


@dataclass(frozen=True)
class EvalConfig:
    probe_dim: int = 16
    probe_epochs: int = 8
    samples_per_domain: int = 64


@dataclass(frozen=True)
class RunConfig:
    """Everything a config file can set, grouped by consumer."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for group in (self.model, self.train, self.train.weights, self.classifier, self.eval):
            for f in dataclasses.fields(group):
                if f.name == "weights":
                    continue
                if f.name in flat and f.name != "seed":
                    raise ConfigError(f"config key {f.name!r} defined by two groups")
                flat[f.name] = getattr(group, f.name)
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        known = cls().to_flat()
        unknown = sorted(set(flat) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

        def pick(dc, defaults):
            kw = {}
            for f in dataclasses.fields(dc):
                if f.name in flat and f.name != "weights":
                    kw[f.name] = _coerce(flat[f.name], getattr(defaults, f.name))
            return kw

        model = ModelConfig(**pick(ModelConfig, ModelConfig()))
        weights = LossWeights(**pick(LossWeights, LossWeights()))
        train = TrainConfig(weights=weights, **pick(TrainConfig, TrainConfig()))
        classifier = ClassifierConfig(**pick(ClassifierConfig, ClassifierConfig()))
        ev = EvalConfig(**pick(EvalConfig, EvalConfig()))
        return cls(validate_config(model), train, classifier, ev)

    def replace(self, **flat) -> "RunConfig":
        merged = self.to_flat()
        merged.update(flat)
        return RunConfig.from_flat(merged)

    def digest(self) -> str:
        return hashlib.sha256(dump_config_text(self).encode()).hexdigest()[:16]


def _coerce(value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ConfigError(f"cannot parse boolean {value!r}")
        return bool(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            return tuple(int(v) for v in value.replace(",", " ").split())
        return tuple(int(v) for v in value)
    try:
        return type(default)(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse {value!r} as {type(default).__name__}") from exc


def _format_value(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    flat: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = value
    return flat


def load_config(path: str | Path) -> RunConfig:
    return RunConfig.from_flat(parse_config_text(Path(path).read_text(encoding="utf-8")))


def dump_config_text(config: RunConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in config.to_flat().items())


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config_text(config), encoding="utf-8")


def sample_latent(rng: torch.Generator, dim: int, n: Optional[int] = None) -> torch.Tensor:
    """I.i.d. standard-normal latent code(s); shape ``(dim,)`` or ``(n, dim)``."""
    if dim < 1:
        raise ValueError(f"latent dim must be >= 1, got {dim}")
    shape = (dim,) if n is None else (n, dim)
    return torch.randn(shape, generator=rng)


def make_rng(*keys: int) -> torch.Generator:
    """Torch generator seeded from an integer key tuple (order-sensitive)."""
    return torch.Generator().manual_seed(derive_seed(*keys))


def derive_seed(*keys: int) -> int:
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


@dataclass
class LabeledSample:
    image: np.ndarray  # (3, H, W) float32 in [-1, 1]
    domain: DefectDomain
    product: ProductLabel
    defect_mask: Optional[np.ndarray] = None
    sample_id: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be 3xHxW, got {self.image.shape}")
        if self.defect_mask is not None:
            if self.defect_mask.shape != self.image.shape[1:]:
                raise ValueError("mask must match image spatial dims")
            if self.domain.is_anchor and self.defect_mask.any():
                raise ValueError("Normal samples must have an all-zero mask")


@dataclass
class ImageSet:
    """Stacked tensors for a list of samples, the form networks consume."""

    images: torch.Tensor
    domains: torch.Tensor
    products: torch.Tensor
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> "ImageSet":
        if not samples:
            raise ValueError("empty sample list")
        images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
        domains = torch.tensor([s.domain.id for s in samples], dtype=torch.long)
        products = torch.tensor([s.product.id for s in samples], dtype=torch.long)
        return cls(images, domains, products, [s.sample_id for s in samples])

    def subset(self, index) -> "ImageSet":
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageSet(
            self.images[index], self.domains[index], self.products[index],
            [self.ids[i] for i in index.tolist()] if self.ids else [],
        )


def check_label_density(domain_ids: Sequence[int], n_domains: int) -> None:
    ids = set(int(i) for i in domain_ids)
    if ids and (min(ids) < 0 or max(ids) >= n_domains):
        raise ValueError(f"domain ids outside [0, {n_domains})")


def config_to_json(config: RunConfig) -> str:
    return json.dumps(config.to_flat(), sort_keys=True)
