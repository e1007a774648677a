"""Network and training configuration record plus its JSON schema."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError
from .losses import LossConfig

HEAD_MODES = ("class", "feature")
RESIZE_POLICIES = ("pad", "bilinear")
OPTIMIZERS = ("adam",)


@dataclass
class NetworkConfig:
    head_mode: str = "class"
    n_class: int = 10
    n_features: Optional[int] = None
    routing_iters: int = 3
    image_height: int = 28
    image_width: int = 28
    conv_channels: int = 256
    caps_blocks: int = 32
    caps_dim: int = 8
    out_dim: int = 16
    kernel_size: int = 9
    caps_stride: int = 2
    decoder_widths: tuple[int, ...] = (512, 1024)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    resize: str = "pad"

    def __post_init__(self):
        self.decoder_widths = tuple(self.decoder_widths)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)

    @property
    def n_out(self) -> int:
        """Number of capsules the routing layer produces."""
        return self.n_class if self.head_mode == "class" else self.n_features

    @property
    def conv1_size(self) -> tuple[int, int]:
        k = self.kernel_size
        return self.image_height - k + 1, self.image_width - k + 1

    @property
    def caps_grid(self) -> tuple[int, int]:
        h, w = self.conv1_size
        k, s = self.kernel_size, self.caps_stride
        return (h - k) // s + 1, (w - k) // s + 1

    @property
    def n_primary(self) -> int:
        gh, gw = self.caps_grid
        return self.caps_blocks * gh * gw

    def validate(self) -> "NetworkConfig":
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.n_class < 1:
            raise ConfigError(f"n_class must be positive, got {self.n_class}")
        if self.head_mode == "feature" and (self.n_features is None or self.n_features < 1):
            raise ConfigError("feature mode requires n_features >= 1")
        if self.routing_iters < 1:
            raise ConfigError(f"routing_iters must be >= 1, got {self.routing_iters}")
        k = self.kernel_size
        min_side = 2 * k - 1
        if self.image_height < min_side or self.image_width < min_side:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} too small: "
                f"minimum size is {min_side}x{min_side} for two {k}x{k} convolutions"
            )
        for name in ("conv_channels", "caps_blocks", "caps_dim", "out_dim", "caps_stride",
                     "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.resize not in RESIZE_POLICIES:
            raise ConfigError(f"resize must be one of {RESIZE_POLICIES}, got {self.resize!r}")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["decoder_widths"] = list(self.decoder_widths)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(data)
        if "loss" in data:
            loss = data["loss"]
            try:
                data["loss"] = LossConfig(**loss) if isinstance(loss, dict) else loss
            except TypeError as exc:
                raise ConfigError(f"bad loss config: {exc}") from None
        return cls(**data)

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)
