"""Optimizer, epoch loop, checkpoints and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Tape, Tensor
from .config import NetworkConfig
from .data import BatchIterator, Dataset
from .errors import ConfigError, DivergenceError, IngestError, NumericError, UsageError
from .layers import CapsNet, predict

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.bin"
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.csv"


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p -= (lr * step).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def step(self) -> None:
        adam_step({n: p.data for n, p in self.params.items()},
                  {n: p.grad for n, p in self.params.items()}, self.state, self.lr)


# ---------------------------------------------------------------------------
# metric log and checkpoints
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "mean_loss", "train_accuracy", "seconds", "seconds_per_sample")


@dataclass
class MetricLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, epoch: int, mean_loss: float, train_accuracy: float, seconds: float,
               n_samples: int) -> None:
        if self.rows and epoch <= self.rows[-1]["epoch"]:
            raise UsageError(f"metric rows must increase in epoch ({epoch} after "
                             f"{self.rows[-1]['epoch']})")
        self.rows.append({
            "epoch": epoch,
            "mean_loss": mean_loss,
            "train_accuracy": train_accuracy,
            "seconds": seconds,
            "seconds_per_sample": seconds / max(n_samples, 1),
        })

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["mean_loss"]), repr(r["train_accuracy"]),
                            f"{r['seconds']:.6f}", f"{r['seconds_per_sample']:.9f}"])

    @classmethod
    def read_csv(cls, path) -> "MetricLog":
        log = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                log.rows.append({"epoch": int(r["epoch"]),
                                 **{k: float(r[k]) for k in METRIC_COLUMNS[1:]}})
        return log


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    epoch: int
    train_accuracy: float

    @classmethod
    def from_model(cls, model: CapsNet, epoch: int, train_accuracy: float) -> "Checkpoint":
        params = {n: p.data.astype(np.float32, copy=True) for n, p in model.parameters().items()}
        return cls(model.config, params, epoch, train_accuracy)

    def build_model(self) -> CapsNet:
        model = CapsNet(self.config)
        for name, p in model.parameters().items():
            if name not in self.params:
                raise ConfigError(f"checkpoint lacks parameter {name}")
            if self.params[name].shape != p.shape:
                raise ConfigError(f"checkpoint {name} has shape {self.params[name].shape}, "
                                  f"model expects {p.shape}")
            p.data = self.params[name].astype(p.data.dtype, copy=True)
        return model

    def manifest(self) -> dict:
        entries, offset = [], 0
        for name, arr in self.params.items():
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
        return {
            "format": "float32-le",
            "file": CHECKPOINT_FILE,
            "epoch": self.epoch,
            "train_accuracy": self.train_accuracy,
            "config": self.config.to_dict(),
            "params": entries,
        }

    def save(self, out_dir, extra: Optional[dict] = None) -> Path:
        """Write ``checkpoint.bin`` and merge the checkpoint entry into ``manifest.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / CHECKPOINT_FILE, "wb") as f:
            for arr in self.params.values():
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        manifest_path = out / MANIFEST_FILE
        doc = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        doc.update(extra or {})
        doc["checkpoint"] = self.manifest()
        manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        root = path if path.is_dir() else path.parent
        try:
            doc = json.loads((root / MANIFEST_FILE).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IngestError(f"cannot read checkpoint manifest in {root}: {exc}") from None
        info = doc.get("checkpoint", doc)
        raw = np.fromfile(root / info.get("file", CHECKPOINT_FILE), dtype="<f4")
        params = {}
        for entry in info["params"]:
            n = int(np.prod(entry["shape"]))
            chunk = raw[entry["offset"]:entry["offset"] + n]
            if chunk.size != n:
                raise IngestError(f"checkpoint truncated while reading {entry['name']}")
            params[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float32)
        config = NetworkConfig.from_dict(info["config"])
        return cls(config, params, int(info["epoch"]), float(info["train_accuracy"]))


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


def _check_dataset(config: NetworkConfig, dataset: Dataset) -> None:
    if dataset.class_count != config.n_class:
        raise UsageError(f"dataset has {dataset.class_count} classes, config expects "
                         f"{config.n_class}")
    if dataset.image_size != (config.image_height, config.image_width):
        raise ConfigError(f"dataset images are {dataset.image_size}, config expects "
                          f"{(config.image_height, config.image_width)}")


def train(config: NetworkConfig, train_set: Dataset,
          on_epoch: Optional[Callable[[dict], None]] = None) -> tuple[Checkpoint, MetricLog]:
    """Run the epoch loop and keep the parameters with the best training accuracy."""
    config.validate()
    _check_dataset(config, train_set)
    model = CapsNet(config)
    params = model.parameters()
    opt = Adam(params, config.lr)
    batches = BatchIterator(train_set, config.batch_size, config.seed)
    log = MetricLog()

    if config.epochs == 0:
        acc = float(np.mean(predict(model.scores(train_set.images)) == train_set.labels)) \
            if len(train_set) else 0.0
        return Checkpoint.from_model(model, 0, acc), log

    best: Optional[Checkpoint] = None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        for xb, yb in batches.epoch(epoch):
            try:
                with Tape() as tape:
                    total, _, _, scores = model.loss(Tensor(xb), yb)
                value = float(total.data)
                if not np.isfinite(value):
                    raise NumericError("non-finite loss")
                tape.backward(total, leaves=params.values())
            except NumericError as exc:
                raise DivergenceError(f"training diverged in epoch {epoch} ({exc}); last finite "
                                      f"epoch was {epoch - 1}", epoch - 1) from None
            finally:
                tape.clear()
            opt.step()
            loss_sum += value * len(yb)
            correct += int((predict(scores.data) == yb).sum())
            seen += len(yb)
        elapsed = time.perf_counter() - t0
        acc = correct / max(seen, 1)
        log.append(epoch, loss_sum / max(seen, 1), acc, elapsed, seen)
        logger.info("epoch %d loss %.5f train_acc %.4f (%.1fs)", epoch, loss_sum / max(seen, 1),
                    acc, elapsed)
        if on_epoch is not None:
            on_epoch(log.rows[-1])
        if best is None or acc >= best.train_accuracy:
            best = Checkpoint.from_model(model, epoch, acc)
    return best, log


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray      # rows: true class, columns: predicted class
    scores: np.ndarray

    def write_confusion_csv(self, path) -> None:
        k = self.confusion.shape[0]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["true\\pred", *range(k)])
            for i in range(k):
                w.writerow([i, *self.confusion[i].tolist()])


def evaluate(checkpoint, test_set: Dataset, batch_size: int = 256) -> EvalResult:
    """Accuracy, per-class accuracy and confusion counts for a checkpoint or model."""
    model = checkpoint if isinstance(checkpoint, CapsNet) else checkpoint.build_model()
    _check_dataset(model.config, test_set)
    scores = model.scores(test_set.images, batch_size)
    preds = predict(scores)
    k = model.config.n_class
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (test_set.labels, preds), 1)
    totals = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(totals > 0, np.diag(confusion) / np.maximum(totals, 1), np.nan)
    acc = float(np.mean(preds == test_set.labels)) if len(test_set) else float("nan")
    return EvalResult(acc, per_class, confusion, scores)
