"""Synthetic dataset generators: shapes, determinism, and IDX compatibility."""
import numpy as np

from marginlab import data, synth


def test_digit_images_shape_and_dtype():
    imgs, labels = synth.digit_images(120, seed=0)
    assert imgs.shape == (120, 28, 28)
    assert imgs.dtype == np.uint8
    assert labels.shape == (120,)
    assert set(np.unique(labels)) <= set(range(10))
    # every class present with a reasonable share
    counts = np.bincount(labels, minlength=10)
    assert counts.min() >= 3


def test_digit_images_deterministic():
    a = synth.digit_images(40, seed=5)
    b = synth.digit_images(40, seed=5)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = synth.digit_images(40, seed=6)
    assert not np.array_equal(a[0], c[0])


def test_digit_images_have_sparse_strokes():
    imgs, _ = synth.digit_images(200, seed=11)
    X = imgs.reshape(200, -1) / 255.0
    dark = (X < 0.05).mean()
    assert 0.4 < dark < 0.9, f"stroke sparsity off: {dark:.2f} dark"
    # intra-class variation: no two samples are bitwise identical
    flat = {x.tobytes() for x in imgs}
    assert len(flat) == 200


def test_blob_points_geometry():
    pts, labels = synth.blob_points(90, seed=2, num_classes=3)
    assert pts.shape == (90, 1, 2) and pts.dtype == np.uint8
    X = pts.reshape(90, 2) / 255.0
    # class centers sit on a circle of radius 0.3 around (0.5, 0.5)
    for c in range(3):
        center = X[labels == c].mean(axis=0)
        r = np.linalg.norm(center - 0.5)
        assert abs(r - 0.3) < 0.08, f"class {c} center radius {r:.3f}"


def test_write_datasets_round_trip_through_idx(tmp_path):
    ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
    synth.write_digit_dataset(ip, lp, 30, seed=1)
    ds = data.load_idx_dataset(ip, lp)
    assert len(ds) == 30 and ds.input_dim == 784

    synth.write_blob_dataset(ip, lp, 30, seed=1)
    ds = data.load_idx_dataset(ip, lp)
    assert len(ds) == 30 and ds.input_dim == 2
