"""Analytic cost accounting and wall-clock sweeps.

The accountant works from layer shapes alone. Activation bytes are the arrays
this implementation keeps alive between forward and backward: op outputs that
a backward closure holds, the im2col buffers of the convolutions, and one byte
per element for relu masks. Views of earlier tensors cost nothing.
Outputs that no backward closure captures (the raw conv output ahead of a
relu, pre-softmax logits, products that are immediately summed) are freed
during the forward pass and cost nothing. A test checks these closed forms
against tracemalloc on a live tape.

FLOPs are forward, per sample, with a multiply-add counted as two.

Absolute memory and time figures describe this CPU implementation only; the
reports carry a header saying so. What transfers to other frameworks is the
exact FC arithmetic and the ordering of the sweep columns.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import NetworkConfig
from .errors import ConfigError, UsageError
from .layers import CapsNet, class_lengths, decode
from .losses import margin_loss_class, margin_loss_feature, reconstruction_loss, total_loss
from .training import Adam

F32 = 4
MIB = 1024 * 1024
ROW_NAMES = ("conv1", "primary_caps", "routing", "head", "decoder")
REPORT_NOTE = ("Memory and time figures are for this single-threaded CPU implementation. "
               "Only the FC-head byte arithmetic and the ordering across columns are "
               "comparable with GPU framework measurements.")


def fingerprint(config: NetworkConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class CostRow:
    name: str
    params: int
    param_bytes: int
    grad_bytes: int
    optimizer_bytes: int
    activation_bytes: int      # per sample
    flops: int                 # forward, per sample

    @classmethod
    def build(cls, name: str, params: int, act_floats: int, mask_bytes: int, flops: int) -> "CostRow":
        return cls(name, params, params * F32, params * F32, 2 * params * F32,
                   act_floats * F32 + mask_bytes, flops)


@dataclass(frozen=True)
class CostReport:
    config: NetworkConfig
    rows: tuple[CostRow, ...]
    workspace_bytes: int       # batch-independent buffers held during a step
    fc_output_bytes: int       # probability vector per sample (feature mode)

    def row(self, name: str) -> CostRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def total(self, attr: str) -> int:
        return sum(getattr(r, attr) for r in self.rows)

    @property
    def params(self) -> int:
        return self.total("params")

    @property
    def activation_bytes(self) -> int:
        return self.total("activation_bytes")

    @property
    def fixed_bytes(self) -> int:
        """Parameters, gradients, Adam moments and per-step workspace."""
        return (self.total("param_bytes") + self.total("grad_bytes")
                + self.total("optimizer_bytes") + self.workspace_bytes)

    @property
    def fc_bytes(self) -> int:
        """Parameter bytes of the softmax head (zero in class mode)."""
        return self.row("head").param_bytes

    @property
    def fc_extra_bytes(self) -> int:
        """What the head adds on top of a class-capsule network for one sample:
        its weights and biases plus the probability vector it emits."""
        return self.fc_bytes + self.fc_output_bytes

    def to_dict(self) -> dict:
        return {
            "fingerprint": fingerprint(self.config),
            "rows": [asdict(r) for r in self.rows],
            "totals": {k: self.total(k) for k in
                       ("params", "param_bytes", "grad_bytes", "optimizer_bytes",
                        "activation_bytes", "flops")},
            "workspace_bytes": self.workspace_bytes,
            "fixed_bytes": self.fixed_bytes,
            "fc_bytes": self.fc_bytes,
            "fc_extra_bytes": self.fc_extra_bytes,
        }


def _conv_out(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def _squash(m: int, d: int) -> tuple[int, int]:
    # kept: the input vectors, their norms, 1 + norm^2 and the ratio; the
    # squashed output is charged to whoever consumes it
    return m * d + 3 * m, m * (3 * d + 4)


def _margin(n: int) -> tuple[int, int, int]:
    # kept: one-hot targets, lambda * (1 - T), both relu outputs and both squares
    return 6 * n, 2 * n, 12 * n


def account(config: NetworkConfig) -> CostReport:
    """Closed-form parameter, memory and FLOP counts for ``config``."""
    cfg = config.validate()
    H, W, k = cfg.image_height, cfg.image_width, cfg.kernel_size
    C = cfg.conv_channels
    h1, w1 = _conv_out(H, k, 1), _conv_out(W, k, 1)
    gh, gw = _conv_out(h1, k, cfg.caps_stride), _conv_out(w1, k, cfg.caps_stride)
    maps = cfg.caps_blocks * cfg.caps_dim
    N, J, din, D = cfg.n_primary, cfg.n_out, cfg.caps_dim, cfg.out_dim
    r = cfg.routing_iters
    P = H * W
    rows = []

    # conv1: input batch, im2col buffer, relu output and mask; the raw conv
    # output dies once relu has its mask
    p = C * k * k
    acts = H * W + h1 * w1 * k * k + C * h1 * w1
    rows.append(CostRow.build("conv1", p, acts, C * h1 * w1,
                              2 * k * k * C * h1 * w1 + C * h1 * w1))

    # primary capsules: im2col buffer, regrouped capsules, squash, output
    p = maps * C * k * k
    sq_a, sq_f = _squash(N, din)
    acts = gh * gw * C * k * k + sq_a + N * din
    rows.append(CostRow.build("primary_caps", p, acts, 0,
                              2 * C * k * k * maps * gh * gw + sq_f))

    # routing: u_hat, then per iteration the couplings, s, squash and v; the
    # weighted products and agreement terms are reduced and dropped
    p = N * J * din * D
    sq_a, sq_f = _squash(J, D)
    acts = N * J * D + r * (N * J + sq_a + J * D)
    flops = 2 * din * D * N * J + r * (4 * N * J + 2 * N * J * D + sq_f) \
        + (r - 1) * (2 * N * J * D + N * J)
    rows.append(CostRow.build("routing", p, acts, 0, flops))

    # head plus its margin loss
    m_a, m_mask, m_f = _margin(cfg.n_class)
    if cfg.head_mode == "class":
        p, acts, flops = 0, J + m_a, J * (2 * D + 1) + m_f
        fc_out = 0
    else:
        nc, d_in = cfg.n_class, D * cfg.n_features
        p = d_in * nc + nc
        acts = nc + m_a         # probabilities; logits are not kept
        flops = 2 * d_in * nc + nc + 4 * nc + m_f
        fc_out = nc * F32
    rows.append(CostRow.build("head", p, acts, m_mask, flops))

    # decoder plus reconstruction loss
    dims = [D * J, *cfg.decoder_widths, P]
    p = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    acts, mask, flops = 0, 0, 0
    if cfg.head_mode == "class":
        acts += J + J * D       # keep mask and masked capsules
        flops += J * D
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        acts += b               # activation output only
        flops += 2 * a * b + b
        if i < len(dims) - 2:
            mask += b
            flops += b
        else:
            flops += 4 * b
    acts += P                   # residual kept by the squared error
    flops += 3 * P
    rows.append(CostRow.build("decoder", p, acts, mask, flops))

    # the routing weights are regrouped once per step for a batched matmul
    workspace = N * J * din * D * F32
    return CostReport(cfg, tuple(rows), workspace, fc_out)


def max_batch(report: CostReport, budget_bytes: int) -> int:
    """Largest batch whose activations fit next to the fixed footprint."""
    fixed, per = report.fixed_bytes, report.activation_bytes
    if budget_bytes <= fixed:
        raise ConfigError(f"budget of {budget_bytes} bytes does not cover the fixed footprint "
                          f"of {fixed} bytes (parameters, gradients, optimizer state, workspace)")
    n = (budget_bytes - fixed) // per
    if n < 1:
        raise ConfigError(f"budget of {budget_bytes} bytes leaves room for no sample: fixed "
                          f"footprint {fixed} bytes, {per} bytes per sample")
    return int(n)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepSpec:
    """What to measure. ``datasets`` entries are ``{"name", "n_class"}`` plus an
    optional ``"path"``; without one, images are seeded uniform noise."""

    datasets: list[dict]
    n_features: list[int]
    baseline: bool = True
    budget_bytes: int = 11 * 1024**3
    repetitions: int = 3
    steps_per_rep: int = 4
    interleave: int = 6        # timing workers alive at once
    batch_size: int = 16
    seed: int = 0
    network: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repetitions < 3:
            raise ConfigError(f"timing needs at least 3 repetitions, got {self.repetitions}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.interleave < 1:
            raise ConfigError(f"interleave must be positive, got {self.interleave}")
        if self.steps_per_rep < 1:
            raise ConfigError(f"steps_per_rep must be positive, got {self.steps_per_rep}")
        for d in self.datasets:
            if "name" not in d or "n_class" not in d:
                raise ConfigError(f"dataset entry {d} needs 'name' and 'n_class'")
        if any(int(n) < 1 for n in self.n_features):
            raise ConfigError("n_features values must be >= 1")

    @property
    def columns(self) -> list[str]:
        return (["capsnet"] if self.baseline else []) + [f"nf={n}" for n in self.n_features]

    def config(self, dataset: dict, column: str) -> NetworkConfig:
        kw = dict(self.network)
        kw.update(n_class=int(dataset["n_class"]), batch_size=self.batch_size, seed=self.seed)
        if column == "capsnet":
            kw.update(head_mode="class", n_features=None)
        else:
            kw.update(head_mode="feature", n_features=int(column.split("=")[1]))
        try:
            return NetworkConfig(**kw).validate()
        except TypeError as exc:
            raise ConfigError(f"bad network override: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown sweep keys: {', '.join(sorted(extra))}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SweepSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read sweep spec {path}: {exc}") from None


@dataclass
class SweepResult:
    spec: SweepSpec
    rows: list[str]
    columns: list[str]
    seconds_per_sample: dict = field(default_factory=dict)   # (row, col) -> float | None
    direct_per_sample: dict = field(default_factory=dict)    # full-step timing, same keys
    trunk_seconds: dict = field(default_factory=dict)        # row -> median per batch
    tail_seconds: dict = field(default_factory=dict)         # (row, col) -> median per batch
    reports: dict = field(default_factory=dict)              # (row, col) -> CostReport
    errors: dict = field(default_factory=dict)               # (row, col) -> message

    def completed(self) -> int:
        return sum(v is not None for v in self.seconds_per_sample.values())

    def max_batch(self, row: str, col: str) -> Optional[int]:
        rep = self.reports.get((row, col))
        if rep is None:
            return None
        try:
            return max_batch(rep, self.spec.budget_bytes)
        except ConfigError:
            return None


def _batch(dataset: dict, config: NetworkConfig, n: int, seed: int):
    if dataset.get("path"):
        from .data import open_dataset

        ds = open_dataset(dataset["path"], "train", (config.image_height, config.image_width),
                          config.resize, config.n_class)
        idx = np.arange(n) % len(ds)
        return ds.images[idx], ds.labels[idx]
    rng = np.random.default_rng(seed)
    images = rng.uniform(0, 1, size=(n, 1, config.image_height, config.image_width))
    return images.astype(np.float32), rng.integers(0, config.n_class, size=n)


def _time_steps(fn, steps: int) -> float:
    t0 = time.perf_counter()
    for _ in range(steps):
        fn()
    return (time.perf_counter() - t0) / steps


def _full_step(model: CapsNet, opt: Adam, images: np.ndarray, labels: np.ndarray):
    params = list(model.parameters().values())

    def step():
        with Tape() as tape:
            total = model.loss(Tensor(images), labels)[0]
        tape.backward(total, leaves=params)
        tape.clear()
        opt.step()

    return step


def _trunk_step(model: CapsNet, images: np.ndarray, seed: int):
    """Primary capsule stage alone, backpropagating a fixed cotangent."""
    params = model.primary.parameters()
    opt = Adam(params)
    with Tape() as tape:
        shape = model.primary(Tensor(images)).shape
    tape.clear()
    cot = np.random.default_rng(seed).normal(size=shape).astype(ad.get_dtype())

    def step():
        with Tape() as tape:
            u = model.primary(Tensor(images))
        tape.backward(u, grad=cot, leaves=params.values())
        tape.clear()
        opt.step()

    return step


def _tail_step(model: CapsNet, images: np.ndarray, labels: np.ndarray):
    """Everything after the primary capsules, fed from a fixed capsule batch."""
    u0 = model.primary(Tensor(images)).data
    params = {n: p for n, p in model.parameters().items() if n not in model.primary.parameters()}
    opt = Adam(params)
    x = Tensor(images)
    cfg = model.config

    def step():
        u = ad.parameter(u0)
        with Tape() as tape:
            state = model.routing(u)
            caps = state.v
            if cfg.head_mode == "class":
                scores = class_lengths(caps)
                recon = decode(model.decoder, caps, "class", labels)
                margin = margin_loss_class(scores, labels, cfg.loss)
            else:
                scores = model.head(caps)
                recon = decode(model.decoder, caps, "feature")
                margin = margin_loss_feature(scores, labels, cfg.loss)
            total = total_loss(margin, reconstruction_loss(x, recon), cfg.loss)
        tape.backward(total, leaves=[u, *params.values()])
        tape.clear()
        opt.step()

    return step


def _build(kind: str, spec: SweepSpec, dataset: dict, column: str):
    cfg = spec.config(dataset, column)
    images, labels = _batch(dataset, cfg, spec.batch_size, spec.seed)
    model = CapsNet(cfg)
    if kind == "trunk":
        return _trunk_step(model, images, spec.seed)
    if kind == "tail":
        return _tail_step(model, images, labels)
    return _full_step(model, Adam(model.parameters(), cfg.lr), images, labels)


_JOB = None   # the step function owned by a timing worker process


def _job_start(kind, spec, dataset, column) -> None:
    global _JOB
    _JOB = _build(kind, spec, dataset, column)
    _JOB()  # warm-up, not counted


def _job_rep(steps: int) -> float:
    return _time_steps(_JOB, steps)


class _Timer:
    """One timing unit: a step function living in its own process, or inline."""

    def __init__(self, isolate: bool, kind: str, spec: SweepSpec, dataset: dict, column: str):
        self.pool = None
        if isolate:
            ctx = multiprocessing.get_context("spawn")
            self.pool = ProcessPoolExecutor(max_workers=1, mp_context=ctx)
            try:
                self.pool.submit(_job_start, kind, spec, dataset, column).result()
            except BaseException:
                self.close()
                raise
        else:
            self.fn = _build(kind, spec, dataset, column)
            self.fn()

    def rep(self, steps: int) -> float:
        if self.pool is not None:
            return self.pool.submit(_job_rep, steps).result()
        return _time_steps(self.fn, steps)

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown(cancel_futures=True)
            self.pool = None


def _time_group(units: list, spec: SweepSpec, isolate: bool, errors: dict) -> dict:
    """Median seconds per step for each unit, repetitions taken round-robin.

    ``units`` holds ``(key, kind, dataset, column)``. Interleaving means slow
    drift in machine speed lands on every unit alike instead of on whichever
    cell happened to run during it.
    """
    timers, samples = {}, {}
    try:
        for key, kind, dataset, column in units:
            try:
                timers[key] = _Timer(isolate, kind, spec, dataset, column)
                samples[key] = []
            except Exception as exc:
                errors[key] = f"{type(exc).__name__}: {exc}"
        for _ in range(spec.repetitions):
            for key in list(timers):
                try:
                    samples[key].append(timers[key].rep(spec.steps_per_rep))
                except Exception as exc:
                    errors[key] = f"{type(exc).__name__}: {exc}"
                    timers.pop(key).close()
                    samples.pop(key)
    finally:
        for t in timers.values():
            t.close()
    return {key: statistics.median(v) for key, v in samples.items()}


def measure(spec: SweepSpec, direct: bool = True, isolate: bool = True) -> SweepResult:
    """Median per-sample training-step time for every (dataset, column) cell.

    The primary capsule stage has the same shapes in every column of a row, so
    it is timed once per row and added to each cell's separately timed tail
    (routing, head, decoder, losses). The sum is the reported figure; a direct
    full-step timing of each cell is kept alongside when ``direct`` is set.

    Each timing unit runs in its own worker process unless ``isolate`` is off.
    Units of one kind are timed together in groups of ``spec.interleave``,
    their repetitions taken in turn; a repetition is the mean over
    ``spec.steps_per_rep`` consecutive steps and the reported value is the
    median over repetitions. A unit that raises or dies leaves its cell
    missing and the sweep carries on.
    """
    rows = [d["name"] for d in spec.datasets]
    res = SweepResult(spec, rows, spec.columns)
    B = spec.batch_size
    trunks, tails, fulls = [], [], []
    for dataset in spec.datasets:
        row = dataset["name"]
        first = None
        for col in res.columns:
            key = (row, col)
            res.seconds_per_sample[key] = None
            res.direct_per_sample[key] = None
            try:
                res.reports[key] = account(spec.config(dataset, col))
            except Exception as exc:
                res.errors[key] = f"{type(exc).__name__}: {exc}"
                continue
            first = first or col
            tails.append((key, "tail", dataset, col))
            if direct:
                fulls.append((key, "full", dataset, col))
        if first is not None:
            trunks.append((row, "trunk", dataset, first))

    def run(units):
        out, errors = {}, {}
        for i in range(0, len(units), spec.interleave):
            out.update(_time_group(units[i:i + spec.interleave], spec, isolate, errors))
        return out, errors

    trunk_s, trunk_err = run(trunks)
    tail_s, tail_err = run(tails)
    full_s, full_err = run(fulls)
    res.trunk_seconds.update(trunk_s)
    res.tail_seconds.update(tail_s)
    for key in res.reports:
        row = key[0]
        if row in trunk_err:
            res.errors[key] = trunk_err[row]
        elif key in tail_err:
            res.errors[key] = tail_err[key]
        elif row in trunk_s and key in tail_s:
            res.seconds_per_sample[key] = (trunk_s[row] + tail_s[key]) / B
        if key in full_s:
            res.direct_per_sample[key] = full_s[key] / B
        elif key in full_err and key not in res.errors:
            res.errors[key] = full_err[key]
    return res


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

MISSING = "NA"


def _table(result: SweepResult, value) -> list[list]:
    out = []
    for row in result.rows:
        cells = []
        for col in result.columns:
            v = value(row, col)
            cells.append(MISSING if v is None else v)
        out.append([row, *cells])
    return out


def _fmt(v) -> str:
    if v == MISSING:
        return v
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def emit_report(result: SweepResult, out_dir) -> list[Path]:
    """Write CSV tables and ``report.json``; refuse when no cell completed."""
    if not result.rows or not result.columns or result.completed() == 0:
        raise UsageError("sweep has no completed cells; nothing written")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mib = lambda b: round(b / MIB, 4)
    tables = {
        "time_per_sample": _table(result, lambda r, c: result.seconds_per_sample.get((r, c))),
        "max_batch": _table(result, result.max_batch),
        "memory_per_sample_mib": _table(
            result, lambda r, c: mib(result.reports[(r, c)].activation_bytes)
            if (r, c) in result.reports else None),
        "fc_extra_mib": _table(
            result, lambda r, c: mib(result.reports[(r, c)].fc_extra_bytes)
            if (r, c) in result.reports else None),
    }
    written = []
    header = ["dataset", *result.columns]
    for name, rows in tables.items():
        path = out / f"{name}.csv"
        lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)

    cells = {}
    for (r, c), rep in sorted(result.reports.items()):
        cells[f"{r}/{c}"] = {"config": rep.config.to_dict(), "cost": rep.to_dict(),
                             "max_batch": result.max_batch(r, c)}
    key = lambda d: {f"{r}/{c}": v for (r, c), v in sorted(d.items())}
    doc: dict[str, Any] = {
        "note": REPORT_NOTE,
        "sweep": result.spec.to_dict(),
        "rows": result.rows,
        "columns": result.columns,
        "cells": cells,
        "tables": {k: v for k, v in tables.items() if k != "time_per_sample"},
        "errors": key(result.errors),
        "measured": {
            "time_per_sample": tables["time_per_sample"],
            "direct_per_sample": key(result.direct_per_sample),
            "trunk_seconds_per_batch": dict(sorted(result.trunk_seconds.items())),
            "tail_seconds_per_batch": key(result.tail_seconds),
        },
        "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = out / "report.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written


def format_report(report: CostReport, budget_bytes: Optional[int] = None) -> str:
    cols = ("params", "param_bytes", "grad_bytes", "optimizer_bytes", "activation_bytes", "flops")
    lines = [f"{'layer':<14}" + "".join(f"{c:>18}" for c in cols)]
    for r in report.rows:
        lines.append(f"{r.name:<14}" + "".join(f"{getattr(r, c):>18}" for c in cols))
    lines.append(f"{'total':<14}" + "".join(f"{report.total(c):>18}" for c in cols))
    lines.append(f"fixed footprint: {report.fixed_bytes} bytes "
                 f"(workspace {report.workspace_bytes})")
    lines.append(f"activation per sample: {report.activation_bytes} bytes "
                 f"({report.activation_bytes / MIB:.3f} MiB)")
    if report.config.head_mode == "feature":
        lines.append(f"fc head: {report.fc_bytes} bytes ({report.fc_bytes / MIB:.4f} MiB); "
                     f"with its output {report.fc_extra_bytes} bytes "
                     f"({report.fc_extra_bytes / MIB:.4f} MiB)")
    if budget_bytes is not None:
        lines.append(f"max batch for {budget_bytes} bytes: {max_batch(report, budget_bytes)}")
    return "\n".join(lines)
