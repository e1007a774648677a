"""Margin losses, reconstruction loss and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class LossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    beta: float = 0.0005

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ConfigError(f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")


DEFAULT_LOSS = LossConfig()


def one_hot(labels, n_class: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_class):
        bad = labels[(labels < 0) | (labels >= n_class)][0]
        raise UsageError(f"label {bad} out of range for {n_class} classes")
    t = np.zeros((labels.size, n_class), dtype=ad.get_dtype())
    t[np.arange(labels.size), labels] = 1
    return t


def _margin(scores: Tensor, labels, config: LossConfig) -> Tensor:
    if scores.ndim != 2:
        raise UsageError(f"scores must be [batch, classes], got {scores.shape}")
    if len(np.asarray(labels).reshape(-1)) != scores.shape[0]:
        raise UsageError(f"{len(labels)} labels for a batch of {scores.shape[0]}")
    t = one_hot(labels, scores.shape[1])
    present = ad.square(ad.relu(ad.sub(config.m_plus, scores)))
    absent = ad.square(ad.relu(ad.sub(scores, config.m_minus)))
    per_class = ad.add(ad.mul(t, present), ad.mul(config.lam * (1 - t), absent))
    return ad.mean(ad.tsum(per_class, axis=1))


def margin_loss_class(lengths: Tensor, labels, config: LossConfig = DEFAULT_LOSS) -> Tensor:
    """Hinge-squared loss on class-capsule lengths, summed over classes, batch-averaged."""
    return _margin(lengths, labels, config)


def margin_loss_feature(probs: Tensor, labels, config: LossConfig = DEFAULT_LOSS) -> Tensor:
    """Same functional form as :func:`margin_loss_class`, applied to softmax probabilities."""
    return _margin(probs, labels, config)


def reconstruction_loss(x: Tensor, x_prime: Tensor) -> Tensor:
    x, x_prime = ad.as_tensor(x), ad.as_tensor(x_prime)
    if x.size != x_prime.size or x.shape[0] != x_prime.shape[0]:
        raise UsageError(f"reconstruction shape {x_prime.shape} does not match input {x.shape}")
    return ad.mse(ad.reshape(x, x_prime.shape), x_prime)


def total_loss(margin: Tensor, recon: Tensor, config: LossConfig = DEFAULT_LOSS) -> Tensor:
    return ad.add(margin, ad.scale(ad.as_tensor(recon), config.beta))
