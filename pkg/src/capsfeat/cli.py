"""Command-line entry point: ``capsfeat {train,eval,bench,gradcheck,account}``.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numeric divergence or a sweep with no completed cell, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bench
from .config import NetworkConfig
from .data import Dataset, open_dataset
from .errors import CapsError, ConfigError, IngestError, NumericError, UsageError
from .gradcheck import CHECKS, GROUPS, run_gradcheck
from .training import CHECKPOINT_FILE, MANIFEST_FILE, Checkpoint, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5
METRICS_FILE = "metrics.csv"


class DataError(IngestError):
    """Raised by the CLI itself for missing or unusable ``--data``."""


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

OVERRIDES = [
    # flag, config field, type, help
    ("--head", "head_mode", str, "head mode: class or feature"),
    ("--n-features", "n_features", int, "number of feature capsules (feature mode)"),
    ("--classes", "n_class", int, "number of classes"),
    ("--epochs", "epochs", int, "training epochs"),
    ("--batch", "batch_size", int, "mini-batch size"),
    ("--seed", "seed", int, "seed for initialisation, shuffling and splits"),
    ("--lr", "lr", float, "Adam learning rate"),
    ("--routing-iters", "routing_iters", int, "dynamic routing iterations"),
    ("--image-size", None, int, "square input side in pixels"),
    ("--resize", "resize", str, "resize policy for image folders: pad or bilinear"),
]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (NetworkConfig fields)")
    for flag, _, typ, text in OVERRIDES:
        kw = {"choices": ["class", "feature"]} if flag == "--head" else {}
        p.add_argument(flag, type=typ, help=f"{text} (overrides --config)", **kw)


def resolve_config(args: argparse.Namespace) -> NetworkConfig:
    data = NetworkConfig.load(args.config).to_dict() if args.config else {}
    for flag, field, _, _ in OVERRIDES:
        value = getattr(args, flag[2:].replace("-", "_"))
        if value is None:
            continue
        if flag == "--image-size":
            data["image_height"] = data["image_width"] = value
        else:
            data[field] = value
    if args.head == "class" and args.n_features is None:
        data["n_features"] = None
    return NetworkConfig.from_dict(data).validate()


def _dataset(path: Optional[str], part: str, config: NetworkConfig):
    if path is None:
        raise DataError("--data is required: pass an IDX directory or an image folder "
                        "with manifest.csv")
    ds = open_dataset(path, part, (config.image_height, config.image_width), config.resize,
                      None, seed=config.seed)
    if len(ds) and ds.labels.max() >= config.n_class:
        raise ConfigError(f"{path} has labels up to {ds.labels.max()} but the config has "
                          f"{config.n_class} classes")
    if ds.image_size != (config.image_height, config.image_width):
        raise ConfigError(f"{path} holds {ds.image_size[0]}x{ds.image_size[1]} images, config "
                          f"expects {config.image_height}x{config.image_width}")
    return Dataset(ds.images, ds.labels, config.n_class, ds.split, ds.name)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = resolve_config(args)
    data = _dataset(args.data, "train", config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = {
        "config": config.to_dict(),
        "data": str(args.data),
        "dataset_fingerprint": data.fingerprint(),
        "train_samples": len(data),
        "seed": config.seed,
        "artifacts": {"checkpoint": CHECKPOINT_FILE, "manifest": MANIFEST_FILE,
                      "metrics": METRICS_FILE},
    }
    # the run record goes down before any training so a crash leaves it behind
    (out / MANIFEST_FILE).write_text(json.dumps({"run": run}, indent=2, sort_keys=True) + "\n")

    def report(row):
        print(f"epoch {row['epoch']:>3}  loss {row['mean_loss']:.5f}  "
              f"train_acc {row['train_accuracy']:.4f}  {row['seconds']:.1f}s", flush=True)

    ck, metrics = train(config, data, on_epoch=report)
    metrics.write_csv(out / METRICS_FILE)
    ck.save(out)
    print(f"best epoch {ck.epoch} (train accuracy {ck.train_accuracy:.4f}); wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    data = _dataset(args.data, args.part, ck.config)
    res = evaluate(ck, data)
    print(f"accuracy {res.accuracy:.4f} on {len(data)} samples")
    print(f"{'class':>5} {'count':>6} {'accuracy':>9}")
    for k, (n, a) in enumerate(zip(res.confusion.sum(axis=1), res.per_class_accuracy)):
        print(f"{k:>5} {n:>6} {'-' if np.isnan(a) else f'{a:.4f}':>9}")
    path = Path(args.confusion) if args.confusion else \
        Path(args.checkpoint if Path(args.checkpoint).is_dir() else Path(args.checkpoint).parent) \
        / "confusion.csv"
    res.write_confusion_csv(path)
    print(f"confusion matrix written to {path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = bench.SweepSpec.load(args.sweep)
    if args.budget is not None:
        spec.budget_bytes = args.budget
    if args.repetitions is not None:
        spec.repetitions = args.repetitions
        spec.__post_init__()
    result = bench.measure(spec, direct=not args.no_direct)
    for (row, col), msg in sorted(result.errors.items()):
        print(f"cell {row}/{col} failed: {msg}", file=sys.stderr)
    if result.completed() == 0:
        print("no sweep cell completed; nothing written", file=sys.stderr)
        return EXIT_NUMERIC
    for path in bench.emit_report(result, args.out):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtype = {"float32": np.float32, "float64": np.float64}[args.dtype]
    layers = [x for item in (args.layer or []) for x in item.split(",") if x]
    results = run_gradcheck(seed=args.seed, layers=layers or None, dtype=dtype,
                            probes=args.probes)
    print(f"{'check':<16} {'probes':>6} {'worst rel err':>14} {'tolerance':>10}  status")
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.layer:<16} {r.probes:>6} {r.worst_rel_error:>14.3e} {r.tolerance:>10.0e}  {status}")
    failed = [r.layer for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_account(args) -> int:
    config = resolve_config(args)
    report = bench.account(config)
    if args.json:
        doc = report.to_dict()
        if args.budget is not None:
            doc["max_batch"] = bench.max_batch(report, args.budget)
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(bench.format_report(report, args.budget))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capsfeat", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    t = sub.add_parser("train", help="train a network and write checkpoint, manifest, metrics")
    _add_config_flags(t)
    t.add_argument("--data", help="IDX directory, image folder with manifest.csv, or manifest")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True, help="directory holding checkpoint.bin")
    e.add_argument("--data", help="dataset path, as for train")
    e.add_argument("--part", choices=["train", "test"], default="test",
                   help="which part of the dataset to score (default: test)")
    e.add_argument("--confusion", help="confusion CSV path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run a timing sweep and write CSV/JSON reports")
    b.add_argument("--sweep", required=True, help="JSON sweep spec")
    b.add_argument("--budget", type=int, help="memory budget in bytes for max batch")
    b.add_argument("--out", required=True, help="report directory")
    b.add_argument("--repetitions", type=int, help="timing repetitions per cell (>= 3)")
    b.add_argument("--no-direct", action="store_true",
                   help="skip the direct full-step timing kept alongside each cell")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="compare analytic gradients to finite differences")
    g.add_argument("--seed", type=int, default=0, help="seed for instances and probes")
    g.add_argument("--layer", action="append",
                   help=f"check to run, repeatable or comma-separated; one of "
                        f"{', '.join([*CHECKS, *GROUPS])}")
    g.add_argument("--dtype", choices=["float32", "float64"], default="float32",
                   help="working precision of the analytic gradient")
    g.add_argument("--probes", type=int, default=20, help="probes per check")
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("account", help="print parameter, memory and FLOP accounting")
    _add_config_flags(a)
    a.add_argument("--budget", type=int, help="memory budget in bytes; adds the max batch")
    a.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    a.set_defaults(func=cmd_account)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, UsageError, CapsError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
