import gzip
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsfeat.data import (
    BatchIterator,
    Dataset,
    XorShift64Star,
    fit_image,
    load_idx,
    load_image_dir,
    open_dataset,
    pad_or_crop,
    permutation,
    read_pgm,
    resize_bilinear,
    split,
    splitmix64,
    stream_seed,
    write_idx,
    write_pgm,
)
from capsfeat.errors import IngestError, UsageError


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def write_pair(tmp_path, images, labels, img_magic=0x803, lab_magic=0x801):
    n, h, w = images.shape
    ip, lp = tmp_path / "img", tmp_path / "lab"
    ip.write_bytes(idx_bytes(img_magic, (n, h, w), images.astype(np.uint8).ravel()))
    lp.write_bytes(idx_bytes(lab_magic, (len(labels),), np.asarray(labels, np.uint8)))
    return ip, lp


# -- PRNG ------------------------------------------------------------------


def xorshift_reference(seed, count):
    """numpy-uint64 transcription of the documented generator."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = z ^ (z >> np.uint64(31))
        if x == 0:
            x = np.uint64(1)
        out = []
        for _ in range(count):
            x ^= x >> np.uint64(12)
            x ^= x << np.uint64(25)
            x ^= x >> np.uint64(27)
            out.append(int(x * np.uint64(0x2545F4914F6CDD1D)))
    return out


def reference_shuffle(n, seed):
    items = list(range(n))
    draws = iter(xorshift_reference(seed, n))
    for i in range(n - 1, 0, -1):
        j = next(draws) % (i + 1)
        items[i], items[j] = items[j], items[i]
    return items


def test_splitmix64_published_vector():
    assert splitmix64(0) == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 5])
def test_generator_matches_reference(seed):
    g = XorShift64Star(seed)
    assert [g.next_u64() for _ in range(50)] == xorshift_reference(seed, 50)


@pytest.mark.parametrize("seed", [0, 7, 123456789])
def test_shuffle_matches_reference(seed):
    assert XorShift64Star(seed).shuffle(list(range(40))) == reference_shuffle(40, seed)


def test_permutation_streams_and_seeds():
    a = permutation(100, 3)
    assert sorted(a) == list(range(100))
    assert np.array_equal(a, permutation(100, 3))
    assert np.array_equal(a, reference_shuffle(100, stream_seed(3, 0)))
    assert not np.array_equal(a, permutation(100, 4))
    assert not np.array_equal(a, permutation(100, 3, stream=1))


# -- IDX -------------------------------------------------------------------


def test_ten_image_file(tmp_path):
    imgs = np.arange(10 * 4 * 4).reshape(10, 4, 4) % 256
    ds = load_idx(*write_pair(tmp_path, imgs, list(range(10))))
    assert len(ds) == 10
    assert ds.images.shape == (10, 1, 4, 4)
    assert ds.class_count == 10


def test_bad_magic(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((2, 3, 3)), [0, 1], img_magic=0x802)
    with pytest.raises(IngestError, match="unexpected magic 0x00000802 at offset 0"):
        load_idx(ip, lp)


def test_pixel_255_is_one(tmp_path):
    imgs = np.full((1, 2, 2), 255)
    ds = load_idx(*write_pair(tmp_path, imgs, [0]))
    assert np.all(np.abs(ds.images - 1.0) <= 1e-7)


def test_truncated_file_names_offset(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((3, 4, 4)), [0, 1, 2])
    ip.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(IngestError, match=r"offset \d+"):
        load_idx(ip, lp)
    ip.write_bytes(b"\x00\x00")
    with pytest.raises(IngestError, match="offset 2"):
        load_idx(ip, lp)


def test_count_mismatch(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((3, 4, 4)), [0, 1])
    with pytest.raises(IngestError, match="count mismatch"):
        load_idx(ip, lp)


def test_missing_file(tmp_path):
    with pytest.raises(IngestError):
        load_idx(tmp_path / "nope", tmp_path / "nada")


@given(st.integers(1, 12), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1),
       st.booleans())
@settings(max_examples=25, deadline=None)
def test_idx_round_trip_bit_identical(n, h, w, seed, gz):
    import tempfile
    from pathlib import Path

    r = np.random.default_rng(seed)
    # pixels on the k/255 grid survive the byte encoding exactly
    imgs = r.integers(0, 256, size=(n, 1, h, w)).astype(np.float32) / np.float32(255)
    ds = Dataset(imgs, r.integers(0, 10, size=n), 10)
    with tempfile.TemporaryDirectory() as d:
        suffix = ".gz" if gz else ""
        ip, lp = Path(d) / f"i{suffix}", Path(d) / f"l{suffix}"
        write_idx(ds, ip, lp)
        back = load_idx(ip, lp, class_count=10)
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels)


def test_gzip_idx(tmp_path):
    ip, lp = write_pair(tmp_path, np.full((2, 3, 3), 51), [1, 0])
    gi = tmp_path / "img.gz"
    gi.write_bytes(gzip.compress(ip.read_bytes()))
    ds = load_idx(gi, lp)
    assert ds.images.max() == pytest.approx(0.2)


# -- PGM folders -----------------------------------------------------------


def make_corpus(root, n_per_class, n_class=2, size=(10, 12)):
    rows = []
    r = np.random.default_rng(0)
    for k in range(n_class):
        for i in range(n_per_class):
            rel = f"{k}/img{i}.pgm"
            (root / str(k)).mkdir(exist_ok=True)
            write_pgm(root / rel, r.integers(0, 256, size=size))
            rows.append(f"{rel},{k}")
    (root / "manifest.csv").write_text("\n".join(rows) + "\n")
    return rows


def test_pgm_round_trip_with_comment(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n# made by hand\n4 3\n255\n" + img.tobytes())
    assert np.array_equal(read_pgm(p), img)


def test_pgm_rejects_ascii(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(IngestError, match="binary PGM"):
        read_pgm(p)


def test_three_line_manifest(tmp_path):
    make_corpus(tmp_path, 1, n_class=3)
    ds = load_image_dir(tmp_path, size=(28, 28))
    assert len(ds) == 3
    assert ds.images.shape == (3, 1, 28, 28)
    assert list(ds.labels) == [0, 1, 2]


def test_header_row_is_skipped(tmp_path):
    rows = make_corpus(tmp_path, 1, n_class=2)
    (tmp_path / "manifest.csv").write_text("path,label\n" + "\n".join(rows))
    assert len(load_image_dir(tmp_path)) == 2


def test_non_integer_label_names_line(tmp_path):
    rows = make_corpus(tmp_path, 2, n_class=1)
    rows.insert(1, "0/img0.pgm,cat")
    (tmp_path / "manifest.csv").write_text("\n".join(rows))
    with pytest.raises(IngestError, match=r"manifest.csv:2: non-integer label 'cat'"):
        load_image_dir(tmp_path)


def test_unreadable_image_names_line(tmp_path):
    (tmp_path / "manifest.csv").write_text("missing.pgm,0\n")
    with pytest.raises(IngestError, match=r"manifest.csv:1:"):
        load_image_dir(tmp_path)


def test_sixty_samples_split_two_to_one(tmp_path):
    make_corpus(tmp_path, 30, n_class=2)
    train = open_dataset(tmp_path, "train")
    test = open_dataset(tmp_path, "test")
    assert (len(train), len(test)) == (40, 20)


def test_pad_centres_and_crop_centres():
    img = np.ones((2, 2))
    out = pad_or_crop(img, 4, 4)
    assert out.sum() == 4 and out[1:3, 1:3].all()
    big = np.arange(36.0).reshape(6, 6)
    assert np.array_equal(pad_or_crop(big, 2, 2), big[2:4, 2:4])


def test_bilinear_identity_and_constant():
    img = np.random.default_rng(0).uniform(size=(5, 7))
    assert np.allclose(resize_bilinear(img, 5, 7), img)
    assert np.allclose(resize_bilinear(np.full((5, 7), 0.3), 28, 28), 0.3)
    assert fit_image(img, 9, 9, "bilinear").shape == (9, 9)
    with pytest.raises(UsageError):
        fit_image(img, 9, 9, "stretch")


# -- split and batches -----------------------------------------------------


def balanced(n_per_class, n_class=3):
    labels = np.repeat(np.arange(n_class), n_per_class)
    imgs = np.arange(len(labels), dtype=np.float32)[:, None, None, None] * np.ones((1, 1, 2, 2)) / 1000
    return Dataset(imgs, labels, n_class)


def test_split_thirty_per_class():
    train, test = split(balanced(30), 2 / 3, seed=0)
    assert list(train.class_counts()) == [20, 20, 20]
    assert list(test.class_counts()) == [10, 10, 10]
    assert train.split == "train" and test.split == "test"


def test_split_is_deterministic_and_seed_dependent():
    ds = balanced(30)
    a, _ = split(ds, seed=5)
    b, _ = split(ds, seed=5)
    c, _ = split(ds, seed=6)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_split_uses_documented_shuffle():
    ds = balanced(9, n_class=1)
    train, _ = split(ds, 2 / 3, seed=11)
    order = reference_shuffle(9, stream_seed(11, 0))
    assert np.array_equal(train.images[:, 0, 0, 0] * 1000, np.sort(order[:6]).astype(np.float32))


@given(st.integers(1, 40), st.integers(1, 5), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_split_disjoint_and_complete(n_per_class, n_class, seed):
    ds = balanced(n_per_class, n_class)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        train, test = split(ds, 2 / 3, seed)
    ids = lambda d: set(np.rint(d.images[:, 0, 0, 0] * 1000).astype(int))
    assert ids(train).isdisjoint(ids(test))
    assert ids(train) | ids(test) == set(range(len(ds)))


def test_split_warns_on_empty_side():
    with pytest.warns(UserWarning, match="class 0"):
        split(balanced(1, n_class=1), 2 / 3)


def test_split_ratio_bounds():
    with pytest.raises(UsageError):
        split(balanced(3), 1.0)


@given(st.integers(1, 50), st.integers(1, 16), st.integers(0, 1000), st.integers(0, 5))
@settings(max_examples=40, deadline=None)
def test_batches_cover_each_epoch_once(n, batch, seed, epoch):
    ds = Dataset(np.arange(n, dtype=np.float32)[:, None, None, None] * np.ones((1, 1, 1, 1)) / 100,
                 np.zeros(n, np.int64), 1)
    it = BatchIterator(ds, batch, seed)
    seen = np.concatenate([x[:, 0, 0, 0] for x, _ in it.epoch(epoch)])
    assert sorted(np.rint(seen * 100).astype(int)) == list(range(n))
    assert len(list(it.epoch(epoch))) == len(it)


def test_batch_order_is_pure_function_of_seed_and_epoch():
    ds = balanced(10)
    a, b = BatchIterator(ds, 4, seed=1), BatchIterator(ds, 4, seed=1)
    assert np.array_equal(a.order(3), b.order(3))
    assert not np.array_equal(a.order(3), a.order(4))
    first = [y for _, y in a]
    second = [y for _, y in a]
    assert all(np.array_equal(x, y) for x, y in zip(first, [y for _, y in b.epoch(0)]))
    assert not all(np.array_equal(x, y) for x, y in zip(first, second))


def test_dataset_invariants():
    with pytest.raises(IngestError):
        Dataset(np.zeros((2, 1, 3, 3)), [0, 5], 3)
    with pytest.raises(IngestError):
        Dataset(np.zeros((2, 1, 3, 3)), [0], 3)
    ds = balanced(2)
    assert ds.fingerprint() == balanced(2).fingerprint()
    assert ds.fingerprint() != balanced(3).fingerprint()
