import struct

import numpy as np
import pytest

from gaprune.data import load_idx, make_synthetic, write_idx
from gaprune.errors import ConfigError, FormatError
from gaprune.nn import predict


def _pair(tmp_path, n=5):
    images = np.arange(n * 4, dtype=np.uint8).reshape(n, 2, 2)
    images[0, 0, 0] = 255
    labels = np.arange(n, dtype=np.uint8) % 3
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lab", labels)
    return images, labels


def test_idx_header_bytes(tmp_path):
    _pair(tmp_path)
    raw = (tmp_path / "img").read_bytes()
    assert raw[:16] == struct.pack(">IIII", 0x803, 5, 2, 2)
    assert (tmp_path / "lab").read_bytes()[:8] == struct.pack(">II", 0x801, 5)


def test_idx_round_trip_and_scaling(tmp_path):
    images, labels = _pair(tmp_path)
    data = load_idx(tmp_path / "img", tmp_path / "lab")
    assert data.x_train.shape == (5, 4)
    assert data.n_classes == 3
    assert data.x_train.max() == 1.0
    assert data.x_train.min() == 1.0 / 255.0
    # no validation split keeps the permuted full set
    order = np.argsort(data.x_train[:, 1])
    np.testing.assert_allclose(data.x_train[order], images.reshape(5, 4) / 255.0)
    np.testing.assert_array_equal(data.y_train[order], labels)


def test_idx_bad_magic(tmp_path):
    _pair(tmp_path)
    with pytest.raises(FormatError, match="magic"):
        load_idx(tmp_path / "lab", tmp_path / "lab")


def test_idx_count_mismatch(tmp_path):
    _pair(tmp_path)
    write_idx(tmp_path / "lab", np.zeros(4, dtype=np.uint8))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_truncated(tmp_path):
    _pair(tmp_path)
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "img").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        load_idx(tmp_path / "img", tmp_path / "lab")
    (tmp_path / "img").write_bytes(raw[:6])
    with pytest.raises(FormatError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_synthetic_teacher_is_perfect():
    data = make_synthetic([5, 7, 3], 500, seed=4)
    for x, y in ((data.x_train, data.y_train), (data.x_val, data.y_val)):
        assert np.array_equal(predict(data.teacher, x).argmax(axis=1), y)
    assert len(data.y_val) == 100


def test_synthetic_reproducible():
    a = make_synthetic([5, 7, 3], 300, noise=0.1, seed=9)
    b = make_synthetic([5, 7, 3], 300, noise=0.1, seed=9)
    c = make_synthetic([5, 7, 3], 300, noise=0.1, seed=10)
    assert a.x_train.tobytes() == b.x_train.tobytes()
    assert np.array_equal(a.y_val, b.y_val)
    assert a.x_train.tobytes() != c.x_train.tobytes()


def test_synthetic_noise_fraction():
    clean = make_synthetic([5, 7, 3], 10000, seed=2, val_fraction=0.0)
    noisy = make_synthetic([5, 7, 3], 10000, noise=0.2, seed=2, val_fraction=0.0)
    assert clean.x_train.tobytes() == noisy.x_train.tobytes()
    flipped = np.mean(clean.y_train != noisy.y_train)
    assert abs(flipped - 0.2) < 3 * np.sqrt(0.2 * 0.8 / 10000)


@pytest.mark.parametrize("classes", [2, 4])
def test_synthetic_class_prior(classes):
    data = make_synthetic([6, 16, classes], 10000, seed=1, val_fraction=0.0)
    freq = np.bincount(data.y_train, minlength=classes) / 10000
    p = 1.0 / classes
    assert np.all(np.abs(freq - p) < 3 * np.sqrt(p * (1 - p) / 10000) + 0.01)


def test_synthetic_config_errors():
    with pytest.raises(ConfigError):
        make_synthetic([5, 1], 10)
    with pytest.raises(ConfigError):
        make_synthetic([5, 3], 10, noise=1.5)
