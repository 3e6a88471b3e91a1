"""Training configuration and the momentum optimizer shared by both learned models."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ddx.errors import ConfigError


@dataclass
class TrainConfig:
    batch_size: int = 1024
    learning_rate: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    epochs: int = 10
    seed: int = 0
    noise_augment: int = 0  # prevalent findings injected per training case and epoch
    pool_size: int = 50  # size of the prevalent pool used by noise_augment
    shuffle_tokens: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}", code="usage")
        return cls(**data)


class NesterovSGD:
    """v <- mu v + g;  p <- p - lr (g + mu v)   (plain momentum when nesterov is False)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float, nesterov: bool = True):
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        mu, lr = self.momentum, self.lr
        for k, g in grads.items():
            v = self.velocity[k]
            v *= mu
            v += g
            if self.nesterov:
                params[k] -= lr * (g + mu * v)
            else:
                params[k] -= lr * v


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
