"""Model and training configuration records."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Raised for an invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class HdnConfig:
    n_layers: int = 6
    latent_channels: int = 32
    initial_filters: int = 64
    blocks_per_layer: int = 5
    dropout_p: float = 0.2
    downsample_factor: int = 2
    use_batch_norm: bool = True
    use_topdown_skips: bool = True
    free_bits: float = 1.0
    input_patch_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        self.input_patch_size = tuple(int(v) for v in self.input_patch_size)
        self.validate()

    def validate(self) -> None:
        for name in ("n_layers", "latent_channels", "initial_filters", "blocks_per_layer"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ConfigError("dropout_p", f"must lie in [0, 1], got {self.dropout_p}")
        if self.downsample_factor != 2:
            raise ConfigError("downsample_factor", "only a factor of 2 is supported")
        if self.free_bits < 0:
            raise ConfigError("free_bits", f"must be non-negative, got {self.free_bits}")
        if len(self.input_patch_size) != 2 or min(self.input_patch_size) < 1:
            raise ConfigError("input_patch_size", "must be a pair of positive integers")
        check_dims(self.input_patch_size, self.n_layers, self.downsample_factor,
                   field="input_patch_size")

    @property
    def divisor(self) -> int:
        return self.downsample_factor ** (self.n_layers - 1)

    def latent_shape(self, layer: int, dims: tuple[int, int]) -> tuple[int, int]:
        """Spatial dims of latent group ``layer`` (1-based) for an input of ``dims``."""
        scale = self.downsample_factor ** (layer - 1)
        return dims[0] // scale, dims[1] // scale

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["input_patch_size"] = list(self.input_patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HdnConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def check_dims(dims, n_layers: int, factor: int = 2, field: str = "dims") -> None:
    div = factor ** (n_layers - 1)
    if any(int(d) % div for d in dims):
        raise ConfigError(
            field,
            f"spatial dims {tuple(dims)} must be divisible by {div} "
            f"(= {factor}^(n_layers-1) for n_layers={n_layers})",
        )


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    total_steps: int = 200_000
    batch_size: int = 64
    patch_size: int = 64
    optimizer: str = "adamax"
    seed: int = 0
    checkpoint_every: int = 1000
    validate_every: int = 500
    grad_clip: float | None = 100.0
    log_every: int = 50
    # ablation switches; None keeps the model config value
    disable_batch_norm: bool = False
    disable_skips: bool = False
    blocks_per_layer: int | None = None
    n_layers: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ConfigError("total_steps", "must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size", "must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be non-negative")
        if self.optimizer.lower() not in ("adamax", "adam", "sgd"):
            raise ConfigError("optimizer", f"unsupported optimizer {self.optimizer!r}")

    def apply_ablations(self, config: HdnConfig) -> HdnConfig:
        changes: dict[str, Any] = {"input_patch_size": (self.patch_size, self.patch_size)}
        if self.disable_batch_norm:
            changes["use_batch_norm"] = False
        if self.disable_skips:
            changes["use_topdown_skips"] = False
        if self.blocks_per_layer is not None:
            changes["blocks_per_layer"] = self.blocks_per_layer
        if self.n_layers is not None:
            changes["n_layers"] = self.n_layers
        try:
            return dataclasses.replace(config, **changes)
        except ConfigError as err:
            if err.field == "input_patch_size":
                raise ConfigError("patch_size", str(err)) from None
            raise

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown training config field")
        return cls(**d)


def load_config_file(path) -> tuple[HdnConfig, TrainConfig]:
    """Read a YAML/JSON file with ``model`` and ``train`` sections."""
    import yaml

    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    model = HdnConfig.from_dict(raw.get("model", {}))
    train = TrainConfig.from_dict(raw.get("train", {}))
    return model, train
