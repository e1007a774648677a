"""Dataset loading (IDX, PGM folders), stratified splitting and batching.

Shuffles use a fixed, documented generator (:class:`XorShift64Star`) rather
than numpy's so that splits and batch orders are reproducible from the seed
alone.

XorShift64Star
    state_0 = splitmix64(seed)  (replaced by 1 if it comes out zero)
    x ^= x >> 12; x ^= x << 25; x ^= x >> 27   (all mod 2**64)
    output = x * 0x2545F4914F6CDD1D mod 2**64
Shuffles are Fisher-Yates from the last index down: j = next() % (i + 1).
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import IngestError, UsageError

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    def __init__(self, seed: int):
        self.state = splitmix64(seed & MASK64) or 1

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def below(self, n: int) -> int:
        return self.next_u64() % n

    def shuffle(self, items: list) -> list:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def stream_seed(seed: int, stream: int) -> int:
    """Derive an independent generator seed for ``(seed, stream)``."""
    return splitmix64(((seed & MASK64) * GOLDEN + stream) & MASK64)


def permutation(n: int, seed: int, stream: int = 0) -> np.ndarray:
    return np.array(XorShift64Star(stream_seed(seed, stream)).shuffle(list(range(n))), dtype=np.int64)


@dataclass
class Dataset:
    images: np.ndarray          # [N, 1, H, W] float32 in [0, 1]
    labels: np.ndarray          # [N] int64
    class_count: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise IngestError(f"images must be [N, 1, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise IngestError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise IngestError(f"labels must lie in [0, {self.class_count}), "
                              f"found range [{self.labels.min()}, {self.labels.max()}]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, indices, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count,
                       split or self.split, self.name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<4i", len(self), *self.image_size, self.class_count))
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from None


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IngestError(f"{path}: truncated header at offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IngestError(f"{path}: unexpected magic 0x{magic:08x} at offset 0 "
                          f"(wanted 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IngestError(f"{path}: truncated header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) < header_end + count:
        raise IngestError(f"{path}: truncated data at offset {len(raw)}, "
                          f"expected {header_end + count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path, class_count: Optional[int] = None,
             split: str = "train") -> Dataset:
    pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(pixels) != len(labels):
        raise IngestError(f"image/label count mismatch: {len(pixels)} images in {images_path} "
                          f"(offset 4) vs {len(labels)} labels in {labels_path} (offset 4)")
    images = pixels.astype(np.float32) / np.float32(255.0)
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 0
    return Dataset(images[:, None], labels, class_count, split, Path(images_path).stem)


def _to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    n, _, h, w = dataset.images.shape
    if dataset.class_count > 256:
        raise UsageError("IDX label files store one byte per label")
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w)
    opener = gzip.open if str(images_path).endswith(".gz") else open
    with opener(images_path, "wb") as f:
        f.write(header + _to_bytes(dataset.images).tobytes())
    opener = gzip.open if str(labels_path).endswith(".gz") else open
    with opener(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# PGM folders
# ---------------------------------------------------------------------------


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM into a uint8 ``[H, W]`` array."""
    raw = _read_bytes(path)
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise IngestError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise IngestError(f"{path}: malformed PGM header") from None
    if not 0 < maxval < 256:
        raise IngestError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    if len(raw) < pos + w * h:
        raise IngestError(f"{path}: truncated raster at offset {len(raw)}")
    img = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    if maxval != 255:
        img = np.rint(img.astype(np.float32) * (255.0 / maxval)).astype(np.uint8)
    return img


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + image.tobytes())


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of a 2-d array."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (x - lo).astype(np.float32)

    y0, y1, fy = coords(h, height)
    x0, x1, fx = coords(w, width)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def pad_or_crop(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Centre the image on a zero canvas, cropping any dimension that is too large."""
    img = np.asarray(img, dtype=np.float32)
    out = np.zeros((height, width), dtype=np.float32)
    h, w = img.shape
    sy, sx = max((h - height) // 2, 0), max((w - width) // 2, 0)
    dy, dx = max((height - h) // 2, 0), max((width - w) // 2, 0)
    ch, cw = min(h, height), min(w, width)
    out[dy:dy + ch, dx:dx + cw] = img[sy:sy + ch, sx:sx + cw]
    return out


def fit_image(img: np.ndarray, height: int, width: int, policy: str = "pad") -> np.ndarray:
    if policy == "pad":
        return pad_or_crop(img, height, width)
    if policy == "bilinear":
        return resize_bilinear(img, height, width)
    raise UsageError(f"unknown resize policy {policy!r}")


def load_image_dir(root, manifest="manifest.csv", size=(28, 28), resize: str = "pad",
                   class_count: Optional[int] = None, split: str = "train") -> Dataset:
    """Load ``relative_path,label`` rows from ``root/manifest`` as PGM images."""
    root = Path(root)
    manifest_path = Path(manifest) if os.path.isabs(str(manifest)) else root / manifest
    try:
        lines = manifest_path.read_text().splitlines()
    except OSError as exc:
        raise IngestError(f"cannot read manifest {manifest_path}: {exc}") from None
    images, labels = [], []
    for lineno, row in enumerate(csv.reader(lines), start=1):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise IngestError(f"{manifest_path}:{lineno}: expected 'relative_path,label'")
        rel, label = row[0].strip(), row[1].strip()
        if lineno == 1 and label.lower() == "label":
            continue
        try:
            label_value = int(label)
        except ValueError:
            raise IngestError(f"{manifest_path}:{lineno}: non-integer label {label!r}") from None
        try:
            img = read_pgm(root / rel)
        except IngestError as exc:
            raise IngestError(f"{manifest_path}:{lineno}: {exc}") from None
        images.append(fit_image(img.astype(np.float32) / 255.0, size[0], size[1], resize))
        labels.append(label_value)
    if class_count is None:
        class_count = max(labels) + 1 if labels else 0
    stack = np.stack(images)[:, None] if images else np.zeros((0, 1, *size), np.float32)
    return Dataset(stack, np.array(labels, dtype=np.int64), class_count, split, root.name)


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------


def split(dataset: Dataset, ratio: float = 2 / 3, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split: each class contributes ``round(ratio * n_c)`` training samples."""
    if not 0 < ratio < 1:
        raise UsageError(f"split ratio must lie in (0, 1), got {ratio}")
    train_idx, test_idx = [], []
    for k in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == k)
        if members.size == 0:
            continue
        order = members[permutation(members.size, seed, stream=k)]
        n_train = int(round(ratio * members.size))
        if n_train == 0 or n_train == members.size:
            warnings.warn(f"class {k} has {members.size} samples; one side of the split is empty")
        train_idx.append(order[:n_train])
        test_idx.append(order[n_train:])
    train_idx = np.sort(np.concatenate(train_idx)) if train_idx else np.zeros(0, np.int64)
    test_idx = np.sort(np.concatenate(test_idx)) if test_idx else np.zeros(0, np.int64)
    return dataset.subset(train_idx, "train"), dataset.subset(test_idx, "test")


class BatchIterator:
    """Epoch-wise minibatches; the order for epoch ``e`` depends only on ``(seed, e)``."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise UsageError(f"batch_size must be positive, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.cursor = 0

    def order(self, epoch: int) -> np.ndarray:
        return permutation(len(self.dataset), self.seed, stream=1_000_003 + epoch)

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self.order(epoch)
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            yield self.dataset.images[idx], self.dataset.labels[idx]

    def __iter__(self):
        batches = self.epoch(self.cursor)
        self.cursor += 1
        return batches

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)


IDX_TRAIN = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
IDX_TEST = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _find(root: Path, stem: str) -> Optional[Path]:
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    return None


def open_dataset(path, part: str = "train", size: Sequence[int] = (28, 28),
                 resize: str = "pad", class_count: Optional[int] = None,
                 ratio: float = 2 / 3, seed: int = 0) -> Dataset:
    """Resolve a ``--data`` argument to the requested part of a dataset.

    ``path`` may be an IDX directory (``train-*``/``t10k-*`` files), a PGM folder
    with ``manifest.csv`` (split ``ratio`` : ``1 - ratio`` by ``seed``), or a
    manifest file itself.
    """
    if part not in ("train", "test"):
        raise UsageError(f"part must be 'train' or 'test', got {part!r}")
    root = Path(path)
    if not root.exists():
        raise IngestError(f"data path {root} does not exist")
    if root.is_dir():
        names = IDX_TRAIN if part == "train" else IDX_TEST
        imgs, labs = _find(root, names[0]), _find(root, names[1])
        if imgs and labs:
            ds = load_idx(imgs, labs, class_count, part)
            return ds
        manifest = root / "manifest.csv"
    else:
        manifest, root = root, root.parent
    if not manifest.exists():
        raise IngestError(f"{path}: no IDX files and no manifest.csv")
    full = load_image_dir(root, manifest, tuple(size), resize, class_count)
    train, test = split(full, ratio, seed)
    return train if part == "train" else test
