"""Finite-difference verification of every backward rule in the network.

Each check builds a small, seeded instance of one layer (or loss, or the whole
network), computes analytic gradients on a tape, and compares a random sample
of parameter entries against the fourth-order central difference

    (8 (f(theta + h) - f(theta - h)) - (f(theta + 2h) - f(theta - 2h))) / (12 h)

with h = 1e-3, using relative error ``|a - n| / max(|a|, |n|, 1e-8)``. The
O(h^4) truncation stays well under the 64-bit tolerance even on probes where
the plain two-point rule's O(h^2) term does not. Non-scalar layer
outputs are reduced with a fixed random projection ``f = sum(R * out)``.

The analytic side runs at the working precision. The numeric side is evaluated
in float64 at the same parameter values, so rounding in a float32 forward pass
(about 6e-8 of the loss, divided by 2h) cannot masquerade as a gradient error.
A probe whose stencil moves any relu input across zero is replaced by another
entry, since the central difference there measures the kink, not the slope.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import NetworkConfig
from .errors import UsageError
from .layers import CapsNet, Decoder, FcHead, PrimaryCapsLayer, RoutingLayer, dynamic_routing
from .losses import margin_loss_class, margin_loss_feature, reconstruction_loss

TOLERANCE = {np.float32: 1e-2, np.float64: 1e-5}
STEP = 1e-3


@dataclass
class CheckResult:
    layer: str
    probes: int
    worst_rel_error: float
    tolerance: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.worst_rel_error < self.tolerance


@dataclass
class Instance:
    params: list[Tensor]
    forward: Callable[[], Tensor]
    # optional split of a scalar forward into additive terms; the oracle
    # differences each term on its own so a small term is not lost in the
    # rounding of a large one
    terms: Optional[Callable[[], Sequence[Tensor]]] = None


def _small_config(**kw) -> NetworkConfig:
    base = dict(image_height=17, image_width=17, conv_channels=6, caps_blocks=2,
                decoder_widths=(12, 10), routing_iters=3, n_class=4)
    base.update(kw)
    return NetworkConfig(**base)


def _images(rng, n, side=17, peak=1.0):
    return Tensor(rng.uniform(0, peak, size=(n, 1, side, side)))


def _conv(rng):
    x = ad.parameter(rng.normal(size=(2, 3, 9, 9)), "input")
    k = ad.parameter(rng.normal(size=(4, 3, 3, 3)) * 0.3, "kernels")
    return Instance([x, k], lambda: ad.conv2d(x, k, stride=2))


def _primary(rng):
    layer = PrimaryCapsLayer(_small_config(), rng)
    x = _images(rng, 2)
    return Instance(list(layer.parameters().values()), lambda: layer(x))


def _routing(rng):
    n_pc = 6
    layer = RoutingLayer(n_pc, 3, 3, rng=rng)
    u = Tensor(rng.normal(size=(2, n_pc, 8)) * 0.5)
    return Instance([layer.W], lambda: dynamic_routing(u, layer).v)


def _fc_head(rng):
    head = FcHead(3, 5, rng=rng)
    head.bias.data[:] = rng.normal(size=5) * 0.1
    feats = ad.parameter(rng.normal(size=(2, 3, 16)) * 0.3, "features")
    return Instance([head.weights, head.bias, feats], lambda: head(feats))


def _decoder(rng):
    dec = Decoder(2 * 16, 20, (12, 10), rng=rng)
    for _, b in dec.layers:
        b.data[:] = rng.uniform(0.05, 0.2, size=b.shape)
    caps = ad.parameter(rng.normal(size=(3, 2, 16)) * 0.5, "capsules")
    return Instance(list(dec.parameters().values()) + [caps], lambda: dec(caps))


def _away_from_margins(rng, shape):
    x = rng.uniform(0.0, 0.99, size=shape)
    # keep every entry clear of the hinge points at 0.1 and 0.9
    for m in (0.1, 0.9):
        near = np.abs(x - m) < 0.02
        x[near] += 0.05
    return x


def _margin_class(rng):
    lengths = ad.parameter(_away_from_margins(rng, (4, 5)), "lengths")
    labels = rng.integers(0, 5, size=4)
    return Instance([lengths], lambda: margin_loss_class(lengths, labels))


def _margin_feature(rng):
    logits = ad.parameter(rng.normal(size=(4, 5)) * 2, "logits")
    labels = rng.integers(0, 5, size=4)
    return Instance([logits], lambda: margin_loss_feature(ad.softmax(logits, axis=1), labels))


def _reconstruction(rng):
    x = Tensor(rng.uniform(size=(3, 1, 5, 5)))
    xr = ad.parameter(rng.uniform(size=(3, 25)), "reconstruction")
    return Instance([xr], lambda: reconstruction_loss(x, xr))


def _network(mode):
    def build(rng):
        cfg = _small_config(head_mode=mode, n_features=3 if mode == "feature" else None)
        net = CapsNet(cfg, seed=int(rng.integers(2**31)))
        # zero biases from init park decoder units right on the relu kink
        for name, p in net.parameters().items():
            if name.endswith("bias"):
                p.data[:] = rng.normal(size=p.shape) * 0.2
        # brighter inputs lift capsule lengths to ~0.1; at unit brightness a fresh
        # small network gives lengths ~0.002 where routing gradients vanish
        x = _images(rng, 2, peak=8.0)
        labels = rng.integers(0, cfg.n_class, size=2)

        def terms():
            _, margin, recon, _ = net.loss(x, labels)
            return [margin, ad.scale(recon, cfg.loss.beta)]

        return Instance(list(net.parameters().values()), lambda: net.loss(x, labels)[0], terms)
    return build


CHECKS: dict[str, Callable] = {
    "conv": _conv,
    "primary": _primary,
    "routing": _routing,
    "fc_head": _fc_head,
    "decoder": _decoder,
    "margin_class": _margin_class,
    "margin_feature": _margin_feature,
    "reconstruction": _reconstruction,
    "network_class": _network("class"),
    "network_feature": _network("feature"),
}

# groups accepted by --layer
GROUPS = {
    "losses": ("margin_class", "margin_feature", "reconstruction"),
    "network": ("network_class", "network_feature"),
}


def _evaluate(inst: Instance, projection: Optional[np.ndarray], target: int, idx: tuple,
              delta: float) -> tuple[np.ndarray, list]:
    # the oracle always runs in float64 on the working precision values, and the
    # step is applied after widening so it is not rounded to float32
    saved = [p.data for p in inst.params]
    try:
        for p in inst.params:
            p.data = p.data.astype(np.float64)
        inst.params[target].data[idx] += delta
        with ad.precision(np.float64), ad.record_kinks() as kinks:
            if inst.terms is not None:
                out = np.array([float(t.data) for t in inst.terms()])
            else:
                out = inst.forward().data
    finally:
        for p, d in zip(inst.params, saved):
            p.data = d
    return (out if projection is None else out * projection), kinks


def _same_side(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_instance(name: str, inst: Instance, rng: np.random.Generator, probes: int,
                   step: float, tolerance: float) -> CheckResult:
    with Tape() as tape:
        out = inst.forward()
    projection = None
    if out.size == 1:
        tape.backward(out, leaves=inst.params)
    else:
        projection = rng.normal(size=out.shape)
        tape.backward(out, grad=projection.astype(out.data.dtype), leaves=inst.params)
    analytic = [p.grad.copy() for p in inst.params]
    tape.clear()

    worst, count, skipped = 0.0, 0, 0
    for target, (p, g) in enumerate(zip(inst.params, analytic)):
        taken = 0
        for flat in rng.permutation(p.size):
            if taken == probes:
                break
            idx = np.unravel_index(flat, p.shape)
            values, kinks = zip(*(_evaluate(inst, projection, target, idx, d * step)
                                  for d in (1, -1, 2, -2)))
            if not all(_same_side(kinks[0], k) for k in kinks[1:]):
                # the stencil straddles a relu kink; draw another entry
                skipped += 1
                continue
            f1, fm1, f2, fm2 = values
            # differences are taken elementwise before reducing
            numeric = float(np.sum(8 * (f1 - fm1) - (f2 - fm2))) / (12 * step)
            a = float(g[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
            taken += 1
        count += taken
    return CheckResult(name, count, worst, tolerance, skipped)


def resolve_layers(layer_filter: Optional[Sequence[str]]) -> list[str]:
    if not layer_filter:
        return list(CHECKS)
    names = []
    for item in layer_filter:
        if item in CHECKS:
            names.append(item)
        elif item in GROUPS:
            names.extend(GROUPS[item])
        else:
            raise UsageError(f"unknown layer {item!r}; choose from "
                             f"{', '.join([*CHECKS, *GROUPS])}")
    return list(dict.fromkeys(names))


def run_gradcheck(seed: int = 0, layers: Optional[Sequence[str]] = None, dtype=np.float32,
                  probes: int = 20, step: Optional[float] = None,
                  tolerance: Optional[float] = None) -> list[CheckResult]:
    dtype = np.dtype(dtype).type
    step = STEP if step is None else step
    tolerance = TOLERANCE[dtype] if tolerance is None else tolerance
    results = []
    with ad.precision(dtype):
        order = list(CHECKS)
        for name in resolve_layers(layers):
            # keyed on the check itself so a filtered run rebuilds the same instance
            rng = np.random.default_rng([seed, order.index(name)])
            inst = CHECKS[name](rng)
            results.append(check_instance(name, inst, rng, probes, step, tolerance))
    return results
