import gzip

import numpy as np
import pytest

from wcalab.data import (IdxFormatError, export_csv, filter_binary, load_idx, load_mnist, make_blobs, pca_fit,
                         pca_inverse, pca_transform, read_idx, split_by_index, write_idx)
from wcalab.numerics import FactorizationError, Rng

from helpers import DATA, mnist_available


@pytest.fixture
def tiny_idx(tmp_path):
    imgs = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    labs = np.array([7, 1], dtype=np.uint8)
    return write_idx(tmp_path / "img.gz", imgs), write_idx(tmp_path / "lab", labs), imgs, labs


def test_idx_round_trip(tiny_idx):
    img, lab, imgs, labs = tiny_idx
    np.testing.assert_array_equal(read_idx(img), imgs)
    ds = load_idx(img, lab)
    assert ds.features.shape == (2, 9)
    assert ds.features.max() == pytest.approx(170 / 255)
    np.testing.assert_array_equal(ds.labels, [7, 1])
    assert ds.box == (0.0, 1.0)


def test_idx_hand_written_header(tmp_path):
    raw = bytes.fromhex("00000801") + (3).to_bytes(4, "big") + bytes([4, 0, 9])
    p = tmp_path / "l"
    p.write_bytes(raw)
    np.testing.assert_array_equal(read_idx(p), [4, 0, 9])


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad.gz"
    p.write_bytes(gzip.compress(b"\x00\x00\x09\x99" + bytes(12)))
    with pytest.raises(IdxFormatError, match="magic"):
        read_idx(p)


def test_idx_truncated(tmp_path):
    p = tmp_path / "t"
    p.write_bytes(bytes.fromhex("00000801") + (5).to_bytes(4, "big") + bytes(2))
    with pytest.raises(IdxFormatError, match="truncated"):
        read_idx(p)


def test_idx_count_mismatch(tmp_path, tiny_idx):
    img, _, _, _ = tiny_idx
    lab = write_idx(tmp_path / "three", np.zeros(3, dtype=np.uint8))
    with pytest.raises(IdxFormatError, match="labels"):
        load_idx(img, lab)


def test_pca_examples():
    X = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    pca = pca_fit(X, 1)
    np.testing.assert_allclose(pca.components, [[1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(pca.explained, [2.0])
    np.testing.assert_allclose(pca_transform(pca, X)[:, 0], [2, -2, 0, 0], atol=1e-12)
    with pytest.raises(ValueError):
        pca_fit(X, 3)


def test_pca_full_rank_round_trip_and_orthonormal():
    X = np.random.default_rng(0).normal(size=(50, 6))
    pca = pca_fit(X, 6)
    np.testing.assert_allclose(pca.components @ pca.components.T, np.eye(6), atol=1e-9)
    np.testing.assert_allclose(pca_inverse(pca, pca_transform(pca, X)), X, atol=1e-9)
    assert np.all(np.diff(pca.explained) <= 0)


def test_filter_binary():
    from wcalab.data import LabeledDataset
    ds = LabeledDataset(np.eye(4), np.array([0, 1, 2, 1]), name="toy")
    b = filter_binary(ds, 1, 0)
    np.testing.assert_array_equal(b.labels, [-1, 1, 1])
    assert "binary" in b.provenance
    with pytest.raises(ValueError):
        filter_binary(ds, 0, 5)
    head, tail = split_by_index(b, 2 / 3)
    assert len(head) == 2 and len(tail) == 1


def test_blobs_moments_and_determinism():
    a = make_blobs(Rng(4), 20_000, [[0.0, 0.0], [3.0, 1.0]], np.array([[1.0, 0.5], [0.5, 2.0]]))
    b = make_blobs(Rng(4), 20_000, [[0.0, 0.0], [3.0, 1.0]], np.array([[1.0, 0.5], [0.5, 2.0]]))
    np.testing.assert_array_equal(a.features, b.features)
    one = a.features[a.labels == 1]
    np.testing.assert_allclose(one.mean(0), [3.0, 1.0], atol=0.05)
    np.testing.assert_allclose(np.cov(one.T), [[1.0, 0.5], [0.5, 2.0]], atol=0.06)
    clipped = make_blobs(Rng(4), 100, [[0.5, 0.5]], np.eye(2), box=(0.0, 1.0))
    assert clipped.features.min() >= 0 and clipped.features.max() <= 1
    with pytest.raises(FactorizationError):
        make_blobs(Rng(0), 5, [[0.0, 0.0]], np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_export_csv(tmp_path):
    ds = make_blobs(Rng(1), 2, [[0.0], [1.0]], np.eye(1))
    text = export_csv(ds, tmp_path / "b.csv").read_text()
    assert text.startswith("# source: blobs > blobs(n=2,c=2)\nlabel,x0\n")


@pytest.mark.skipif(not mnist_available(), reason="MNIST files not present")
def test_mnist_binary_subset():
    train = load_mnist(DATA, "train")
    assert train.features.shape[1] == 784
    b = filter_binary(train, 0, 1)
    # the bundled files are a 5k subset, so the count is the subset's own
    assert len(b) == int(np.sum((train.labels == 0) | (train.labels == 1)))
    assert set(np.unique(b.labels)) == {-1, 1}
    assert 0.0 <= b.features.min() and b.features.max() <= 1.0
