"""Capsule networks with class capsules or feature capsules plus a softmax head,
on a small numpy autodiff engine, with cost accounting and benchmark sweeps."""

from .autodiff import Tape, Tensor
from .bench import CostReport, SweepSpec, account, emit_report, max_batch, measure
from .config import NetworkConfig
from .errors import CapsError, ConfigError, DivergenceError, IngestError, NumericError, UsageError
from .layers import CapsNet, dynamic_routing, squash
from .losses import LossConfig
from .training import Checkpoint, MetricLog, evaluate, train

__all__ = [
    "CapsError", "CapsNet", "Checkpoint", "ConfigError", "CostReport", "DivergenceError",
    "IngestError", "LossConfig", "MetricLog", "NetworkConfig", "NumericError", "SweepSpec",
    "Tape", "Tensor", "UsageError", "account", "dynamic_routing", "emit_report", "evaluate",
    "max_batch", "measure", "squash", "train",
]
__version__ = "0.1.0"
