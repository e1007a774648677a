"""Capsule network building blocks and the assembled model.

Layout conventions: images are ``[B, 1, H, W]``, primary capsules
``[B, N_PC, 8]``, routed capsules ``[B, N_out, 16]``. In class mode
``N_out == n_class``; in feature mode ``N_out == n_features`` and a softmax
head maps the flattened feature capsules to class probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import NetworkConfig
from .errors import ConfigError, UsageError
from .losses import (
    margin_loss_class,
    margin_loss_feature,
    reconstruction_loss,
    total_loss,
)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(ad.get_dtype())


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Scale ``s`` to length ``|s|^2 / (1 + |s|^2)`` along ``axis``.

    Written as ``s * |s| / (1 + |s|^2)``, which is the same map but finite at
    the origin, where the output and its gradient are both zero.
    """
    n = ad.l2norm(s, axis=axis, keepdims=True)
    return ad.mul(s, ad.div(n, ad.add(1.0, ad.square(n))))


def class_lengths(v: Tensor) -> Tensor:
    return ad.l2norm(v, axis=-1)


def predict(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(np.asarray(scores), axis=-1)


class PrimaryCapsLayer:
    """conv 9x9/1 -> relu -> conv 9x9/2 -> group into 8-d capsules -> squash."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        k, c = config.kernel_size, config.conv_channels
        caps_maps = config.caps_blocks * config.caps_dim
        self.config = config
        self.conv1_kernels = ad.parameter(
            glorot_uniform(rng, (c, 1, k, k), k * k, c * k * k), "conv1.kernels")
        self.caps_kernels = ad.parameter(
            glorot_uniform(rng, (caps_maps, c, k, k), c * k * k, caps_maps * k * k),
            "primary.kernels")

    def parameters(self) -> dict[str, Tensor]:
        return {"conv1.kernels": self.conv1_kernels, "primary.kernels": self.caps_kernels}

    def conv(self, images: Tensor) -> Tensor:
        return ad.relu(ad.conv2d(images, self.conv1_kernels, stride=1))

    def __call__(self, images: Tensor) -> Tensor:
        cfg = self.config
        images = ad.as_tensor(images)
        min_side = 2 * cfg.kernel_size - 1
        if images.ndim != 4 or images.shape[1] != 1:
            raise ConfigError(f"expected images [B, 1, H, W], got {images.shape}")
        if images.shape[2] < min_side or images.shape[3] < min_side:
            raise ConfigError(
                f"image {images.shape[2]}x{images.shape[3]} too small: "
                f"minimum size is {min_side}x{min_side}")
        h = self.conv(images)
        maps = ad.conv2d(h, self.caps_kernels, stride=cfg.caps_stride)
        B, _, gh, gw = maps.shape
        caps = ad.reshape(maps, (B, cfg.caps_blocks, cfg.caps_dim, gh, gw))
        caps = ad.transpose(caps, (0, 1, 3, 4, 2))
        caps = ad.reshape(caps, (B, cfg.caps_blocks * gh * gw, cfg.caps_dim))
        return squash(caps)


@dataclass
class RoutingState:
    u_hat: Tensor
    b: Tensor
    c: Tensor
    s: Tensor
    v: Tensor
    couplings: list[np.ndarray] = field(default_factory=list)


class RoutingLayer:
    """Transformation weights ``W[N_PC, N_out, 8, 16]`` plus routing-by-agreement.

    The routing logits are not parameters: they start at zero on every call.
    """

    def __init__(self, n_primary: int, n_out: int, iterations: int = 3,
                 in_dim: int = 8, out_dim: int = 16, mode: str = "class",
                 rng: Optional[np.random.Generator] = None, weights=None):
        if iterations < 1:
            raise ConfigError(f"routing iterations must be >= 1, got {iterations}")
        self.n_primary, self.n_out = n_primary, n_out
        self.in_dim, self.out_dim = in_dim, out_dim
        self.iterations = iterations
        self.mode = mode
        if weights is None:
            rng = rng or np.random.default_rng(0)
            weights = glorot_uniform(rng, (n_primary, n_out, in_dim, out_dim), in_dim, out_dim)
        self.W = ad.parameter(weights, "routing.W")
        if self.W.shape != (n_primary, n_out, in_dim, out_dim):
            raise ConfigError(f"routing weights have shape {self.W.shape}, expected "
                              f"{(n_primary, n_out, in_dim, out_dim)}")

    def parameters(self) -> dict[str, Tensor]:
        return {"routing.W": self.W}

    def __call__(self, u: Tensor) -> RoutingState:
        return dynamic_routing(u, self)


def dynamic_routing(u: Tensor, layer: RoutingLayer) -> RoutingState:
    u = ad.as_tensor(u)
    if u.ndim != 3 or u.shape[1:] != (layer.n_primary, layer.in_dim):
        raise ConfigError(f"routing input {u.shape} does not match "
                          f"[B, {layer.n_primary}, {layer.in_dim}]")
    if layer.iterations < 1:
        raise ConfigError(f"routing iterations must be >= 1, got {layer.iterations}")
    B = u.shape[0]
    N, J, D = layer.n_primary, layer.n_out, layer.out_dim

    # u_hat[b, i, j] = u[b, i] @ W[i, j], batched over i
    u_t = ad.transpose(u, (1, 0, 2))
    w = ad.reshape(ad.transpose(layer.W, (0, 2, 1, 3)), (N, layer.in_dim, J * D))
    u_hat = ad.transpose(ad.reshape(ad.matmul(u_t, w), (N, B, J, D)), (1, 0, 2, 3))

    b = Tensor(np.zeros((B, N, J), dtype=u.data.dtype))
    couplings = []
    for it in range(layer.iterations):
        c = ad.softmax(b, axis=2)
        couplings.append(c.data)
        s = ad.tsum(ad.mul(ad.reshape(c, (B, N, J, 1)), u_hat), axis=1)
        v = squash(s)
        if it < layer.iterations - 1:
            agreement = ad.tsum(ad.mul(u_hat, ad.reshape(v, (B, 1, J, D))), axis=3)
            b = ad.add(b, agreement)
    return RoutingState(u_hat=u_hat, b=b, c=c, s=s, v=v, couplings=couplings)


class FcHead:
    """Flatten feature capsules, affine map, softmax over classes."""

    def __init__(self, n_features: int, n_class: int, caps_dim: int = 16,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        d_in = caps_dim * n_features
        self.weights = ad.parameter(glorot_uniform(rng, (d_in, n_class), d_in, n_class), "fc.weights")
        self.bias = ad.parameter(np.zeros(n_class), "fc.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {"fc.weights": self.weights, "fc.bias": self.bias}

    def logits(self, features: Tensor) -> Tensor:
        flat = ad.reshape(features, (features.shape[0], -1))
        return ad.add(ad.matmul(flat, self.weights), self.bias)

    def __call__(self, features: Tensor) -> Tensor:
        return ad.softmax(self.logits(features), axis=1)


class Decoder:
    """Three dense stages: relu, relu, sigmoid; output is one value per pixel."""

    def __init__(self, d_in: int, n_pixels: int, widths=(512, 1024),
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        dims = [d_in, *widths, n_pixels]
        self.layers = []
        for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = ad.parameter(glorot_uniform(rng, (a, b), a, b), f"decoder.{k}.weights")
            bias = ad.parameter(np.zeros(b), f"decoder.{k}.bias")
            self.layers.append((w, bias))
        self.d_in = d_in

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for w, b in self.layers:
            out[w.name] = w
            out[b.name] = b
        return out

    def __call__(self, caps: Tensor, mask=None) -> Tensor:
        """Reconstruct images from ``caps[B, N_out, 16]``.

        ``mask`` (per-sample capsule index) keeps only that capsule; pass it in
        class mode and leave it out in feature mode.
        """
        caps = ad.as_tensor(caps)
        B = caps.shape[0]
        if mask is not None:
            idx = np.asarray(mask, dtype=np.int64).reshape(-1)
            if idx.size != B:
                raise UsageError(f"mask has {idx.size} entries for a batch of {B}")
            keep = np.zeros(caps.shape[:2] + (1,), dtype=caps.data.dtype)
            keep[np.arange(B), idx] = 1
            caps = ad.mul(caps, keep)
        h = ad.reshape(caps, (B, -1))
        if h.shape[1] != self.d_in:
            raise ConfigError(f"decoder expects {self.d_in} inputs, got {h.shape[1]}")
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            h = ad.add(ad.matmul(h, w), b)
            h = ad.sigmoid(h) if k == last else ad.relu(h)
        return h


def decode(decoder: Decoder, caps: Tensor, mode: str, mask=None) -> Tensor:
    """Mode-checked decoder call: class mode needs a mask, feature mode forbids one."""
    if mode == "class" and mask is None:
        raise UsageError("class-mode decoding requires a mask index per sample")
    if mode == "feature" and mask is not None:
        raise UsageError("feature-mode decoding takes the full capsule set; no mask allowed")
    return decoder(caps, mask)


@dataclass
class ForwardResult:
    scores: Tensor          # capsule lengths (class mode) or probabilities (feature mode)
    caps: Tensor
    state: RoutingState
    recon: Optional[Tensor] = None


class CapsNet:
    """Primary capsules -> routing -> (class lengths | FC softmax head) + decoder."""

    def __init__(self, config: NetworkConfig, seed: Optional[int] = None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.primary = PrimaryCapsLayer(config, rng)
        self.routing = RoutingLayer(config.n_primary, config.n_out, config.routing_iters,
                                    config.caps_dim, config.out_dim, config.head_mode, rng)
        self.head = FcHead(config.n_features, config.n_class, config.out_dim, rng) \
            if config.head_mode == "feature" else None
        self.decoder = Decoder(config.out_dim * config.n_out,
                               config.image_height * config.image_width,
                               config.decoder_widths, rng)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.primary.parameters())
        params.update(self.routing.parameters())
        if self.head is not None:
            params.update(self.head.parameters())
        params.update(self.decoder.parameters())
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def forward(self, images, labels=None, reconstruct: bool = False) -> ForwardResult:
        images = ad.as_tensor(images)
        u = self.primary(images)
        state = self.routing(u)
        caps = state.v
        if self.config.head_mode == "class":
            scores = class_lengths(caps)
        else:
            scores = self.head(caps)
        recon = None
        if reconstruct:
            if self.config.head_mode == "class":
                mask = labels if labels is not None else predict(scores.data)
                recon = decode(self.decoder, caps, "class", mask)
            else:
                recon = decode(self.decoder, caps, "feature")
        return ForwardResult(scores=scores, caps=caps, state=state, recon=recon)

    def loss(self, images, labels):
        """Forward a training batch; returns ``(total, margin, recon, scores)``."""
        images = ad.as_tensor(images)
        out = self.forward(images, labels, reconstruct=True)
        margin_fn = margin_loss_class if self.config.head_mode == "class" else margin_loss_feature
        margin = margin_fn(out.scores, labels, self.config.loss)
        recon = reconstruction_loss(images, out.recon)
        return total_loss(margin, recon, self.config.loss), margin, recon, out.scores

    def scores(self, images, batch_size: int = 256) -> np.ndarray:
        """Class scores without recording a tape, in chunks."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        chunks = []
        for start in range(0, len(images), batch_size):
            chunks.append(self.forward(Tensor(images[start:start + batch_size])).scores.data)
        if not chunks:
            return np.zeros((0, self.config.n_class), dtype=ad.get_dtype())
        return np.concatenate(chunks)
