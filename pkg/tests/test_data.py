import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ramf.data import (
    LabeledDataset,
    batch_iter,
    class_angle,
    generate_synthetic,
    load_cache,
    load_idx,
    save_cache,
    split_incremental,
    synthetic_image,
    write_idx,
)


def _idx_pair(tmp_path, n_images=4, n_labels=4, h=3, w=3, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, size=(n_images, h, w), dtype=np.uint8)
    labels = rng.integers(0, 3, size=n_labels)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(ip, lp, imgs, labels)
    return ip, lp, imgs, labels


# ---------------------------------------------------------------------------
# IDX


def test_idx_round_trip_replicates_gray(tmp_path):
    ip, lp, imgs, labels = _idx_pair(tmp_path)
    ds = load_idx(ip, lp)
    assert ds.images.shape == (4, 3, 3, 3)
    for c in range(3):
        np.testing.assert_array_equal(ds.images[:, c], imgs / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)


def test_idx_255_maps_to_one(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    write_idx(ip, lp, np.full((1, 2, 2), 255, np.uint8), [0])
    assert (load_idx(ip, lp).images == 1.0).all()


def test_idx_header_is_big_endian(tmp_path):
    ip, lp, *_ = _idx_pair(tmp_path)
    assert struct.unpack(">4i", ip.read_bytes()[:16]) == (2051, 4, 3, 3)
    assert struct.unpack(">2i", lp.read_bytes()[:8]) == (2049, 4)


@pytest.mark.parametrize("which", ["images", "labels"])
def test_idx_bad_magic_rejected(tmp_path, which):
    ip, lp, *_ = _idx_pair(tmp_path)
    target = ip if which == "images" else lp
    raw = bytearray(target.read_bytes())
    raw[2:4] = b"\x08\x07"
    target.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="magic"):
        load_idx(ip, lp)


def test_idx_swapped_files_rejected(tmp_path):
    ip, lp, *_ = _idx_pair(tmp_path)
    with pytest.raises(ValueError, match="magic"):
        load_idx(lp, ip)


def test_idx_count_mismatch(tmp_path):
    rng = np.random.default_rng(0)
    ip, lp = tmp_path / "i", tmp_path / "l"
    write_idx(ip, lp, rng.integers(0, 256, (100, 2, 2), dtype=np.uint8), np.zeros(99, np.uint8))
    with pytest.raises(ValueError, match="100 images but 99 labels"):
        load_idx(ip, lp)


def test_idx_truncated_payload(tmp_path):
    ip, lp, *_ = _idx_pair(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(ValueError, match="payload"):
        load_idx(ip, lp)


# ---------------------------------------------------------------------------
# cache


def test_cache_round_trip_and_layout(tmp_path):
    ds = generate_synthetic(3, 4, 8, 8, seed=2)
    p = tmp_path / "d.bin"
    save_cache(p, ds)
    raw = p.read_bytes()
    assert raw[:4] == b"RAMF"
    assert struct.unpack("<6I", raw[4:28]) == (1, 3, 12, 3, 8, 8)
    assert len(raw) == 28 + 12 * 3 * 64 + 12
    back = load_cache(p)
    np.testing.assert_array_equal(back.labels, ds.labels)
    # 8-bit quantisation error is at most half a level
    assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-12
    assert not list(tmp_path.glob("*.tmp"))


def test_cache_rejects_foreign_file(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        load_cache(p)


# ---------------------------------------------------------------------------
# synthetic


def test_synthetic_deterministic_per_index():
    a = synthetic_image(3, 7, 10, 16, 16, seed=5)
    b = synthetic_image(3, 7, 10, 16, 16, seed=5)
    np.testing.assert_array_equal(a, b)
    ds = generate_synthetic(10, 8, 16, 16, seed=5)
    np.testing.assert_array_equal(ds.images[3 * 8 + 7], a)


def test_synthetic_changes_with_seed():
    assert not np.array_equal(synthetic_image(0, 0, 10, 16, 16, 0), synthetic_image(0, 0, 10, 16, 16, 1))


def test_synthetic_range_and_shape():
    ds = generate_synthetic(10, 20, 16, 16, seed=0)
    assert ds.images.shape == (200, 3, 16, 16)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert np.bincount(ds.labels).tolist() == [20] * 10


def test_class_angles_never_multiple_of_90():
    for k in range(2, 101):
        for c in range(k):
            assert class_angle(c, k) % 90 != 0


def test_class_means_are_separated():
    # frozen check of the generator: every pair of class-mean images is > 0.5 apart in L2
    ds = generate_synthetic(10, 200, 16, 16, seed=0)
    means = np.stack([ds.images[ds.labels == c].mean(axis=0).ravel() for c in range(10)])
    d = np.linalg.norm(means[:, None] - means[None], axis=2)
    off = d[~np.eye(10, dtype=bool)]
    assert off.min() > 0.5


def test_synthetic_rejects_bad_sizes():
    with pytest.raises(ValueError):
        generate_synthetic(1, 5)
    with pytest.raises(ValueError):
        generate_synthetic(3, 0)


def test_dataset_validates_labels():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 3, 8, 8)), np.array([0, 5]), 3)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 3, 8, 8)), np.array([0]), 3)


# ---------------------------------------------------------------------------
# splits


def test_split_cifar_shape():
    s = split_incremental(100, 50, 5, 10, seed=0)
    assert [len(c) for c in s.stage_classes] == [50, 10, 10, 10, 10, 10]
    flat = [c for stage in s.stage_classes for c in stage]
    assert len(set(flat)) == 100


def test_split_desk_shape():
    s = split_incremental(10, 5, 5, 1, seed=3)
    assert [len(c) for c in s.stage_classes] == [5, 1, 1, 1, 1, 1]


def test_split_capacity_error():
    with pytest.raises(ValueError, match="exceed"):
        split_incremental(100, 50, 5, 11)


@settings(max_examples=200, deadline=None)
@given(
    k=st.integers(2, 60),
    data=st.data(),
)
def test_split_disjoint_property(k, data):
    initial = data.draw(st.integers(1, k))
    per = data.draw(st.integers(1, k))
    stages = data.draw(st.integers(0, (k - initial) // per))
    seed = data.draw(st.integers(0, 2**31))
    s = split_incremental(k, initial, stages, per, seed)
    flat = [c for stage in s.stage_classes for c in stage]
    assert len(flat) == len(set(flat)) == initial + stages * per
    assert set(flat) <= set(range(k))
    assert s.seen(s.num_stages - 1) == flat


# ---------------------------------------------------------------------------
# batching


def _tiny(n=10):
    return LabeledDataset(np.zeros((n, 3, 8, 8)), np.arange(n) % 3, 3)


def test_batches_cover_every_sample_once():
    ds = _tiny(10)
    labels = np.concatenate([y for _, y in batch_iter(ds, 4, 1)])
    assert sorted(labels.tolist()) == sorted(ds.labels.tolist())
    assert [len(y) for _, y in batch_iter(ds, 4, 1)] == [4, 4, 2]


def test_batch_order_seeded():
    ds = LabeledDataset(np.zeros((10, 3, 8, 8)), np.arange(10), 10)
    a = [y.tolist() for _, y in batch_iter(ds, 3, 7)]
    b = [y.tolist() for _, y in batch_iter(ds, 3, 7)]
    c = [y.tolist() for _, y in batch_iter(ds, 3, 8)]
    assert a == b and a != c


def test_batch_larger_than_dataset():
    assert [len(y) for _, y in batch_iter(_tiny(5), 64, 0)] == [5]


def test_batch_errors():
    with pytest.raises(ValueError):
        list(batch_iter(_tiny(5), 1, 0))
    with pytest.raises(ValueError):
        list(batch_iter(LabeledDataset(np.zeros((0, 3, 8, 8)), np.zeros(0, np.int64), 3), 4, 0))
