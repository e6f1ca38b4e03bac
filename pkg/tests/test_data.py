import numpy as np
import pytest

from normkd.data import (Dataset, DatasetError, batch_indices, batch_iterator, generate_synthetic,
                         load_binary_dataset, standardize, write_binary_dataset)


def test_single_record_all_white(tmp_path):
    path = tmp_path / "one.bin"
    path.write_bytes(bytes([3]) + bytes([255]) * (2 * 2 * 3))
    ds = load_binary_dataset(path, 2, 2, 3, num_classes=10)
    assert len(ds) == 1 and ds.labels[0] == 3
    assert ds.images.shape == (1, 2, 2, 3)
    assert np.all(ds.images == 1.0)


def test_empty_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    ds = load_binary_dataset(path, 4, 4, 3, num_classes=10)
    assert len(ds) == 0


def test_channel_planar_layout(tmp_path):
    # record: label, then R plane, G plane, B plane (each row-major 1x2)
    path = tmp_path / "planar.bin"
    path.write_bytes(bytes([1, 10, 20, 30, 40, 50, 60]))
    ds = load_binary_dataset(path, 1, 2, 3, num_classes=2)
    np.testing.assert_array_equal(ds.images[0, 0] * 255, [[10, 30, 50], [20, 40, 60]])


def test_write_then_read_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(2, 3, 4, 3), dtype=np.uint8)
    labels = [7, 2]
    path = tmp_path / "two.bin"
    write_binary_dataset(path, imgs, labels)
    raw = path.read_bytes()
    assert len(raw) == 2 * (1 + 36)
    ds = load_binary_dataset(path, 3, 4, 3, num_classes=10)
    np.testing.assert_array_equal(ds.labels, labels)
    back = np.rint(ds.images * 255).astype(np.uint8)
    np.testing.assert_array_equal(back, imgs)
    write_binary_dataset(tmp_path / "again.bin", back, ds.labels)
    assert (tmp_path / "again.bin").read_bytes() == raw


def test_truncated_and_bad_label(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(bytes(10))
    with pytest.raises(DatasetError, match="multiple"):
        load_binary_dataset(p, 2, 2, 3, num_classes=10)
    p.write_bytes(bytes([12]) + bytes(12))
    with pytest.raises(DatasetError, match="label"):
        load_binary_dataset(p, 2, 2, 3, num_classes=10)


def test_synthetic_zero_noise_equals_template():
    ds = generate_synthetic(3, 4, (2, 2, 1), 0.0, seed=5)
    for k in range(3):
        block = ds.images[ds.labels == k]
        assert np.all(block == block[0])
        assert np.all((block >= 0) & (block <= 1))
    assert not np.array_equal(ds.images[0], ds.images[4])


def test_synthetic_is_deterministic():
    a = generate_synthetic(4, 5, (3, 3, 2), 0.2, seed=9)
    b = generate_synthetic(4, 5, (3, 3, 2), 0.2, seed=9)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    c = generate_synthetic(4, 5, (3, 3, 2), 0.2, seed=10)
    assert a.images.tobytes() != c.images.tobytes()


def test_synthetic_streams_share_templates():
    train = generate_synthetic(2, 3, (2, 2, 1), 0.0, seed=1, stream="train")
    test = generate_synthetic(2, 3, (2, 2, 1), 0.0, seed=1, stream="test")
    np.testing.assert_array_equal(train.images, test.images)
    noisy_a = generate_synthetic(2, 3, (2, 2, 1), 0.1, seed=1, stream="train")
    noisy_b = generate_synthetic(2, 3, (2, 2, 1), 0.1, seed=1, stream="test")
    assert not np.array_equal(noisy_a.images, noisy_b.images)


def test_synthetic_linear_probe_separability():
    # sigma=0.1, 10 classes: a width-32 linear probe on a random projection fits the train set
    ds = generate_synthetic(10, 20, (8, 8, 3), 0.1, seed=0)
    rng = np.random.default_rng(0)
    x = ds.images.reshape(len(ds), -1)
    proj = rng.normal(size=(x.shape[1], 32)) / np.sqrt(x.shape[1])
    feats = (x - x.mean(0)) @ proj
    w = np.zeros((32, 10))
    onehot = np.eye(10)[ds.labels]
    for _ in range(50):
        z = feats @ w
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        w -= 0.5 * feats.T @ (p - onehot) / len(ds)
    assert np.mean(np.argmax(feats @ w, 1) == ds.labels) >= 0.95


def test_batch_iterator_one_big_batch():
    ds = generate_synthetic(2, 3, (2, 2, 1), 0.1, seed=0)
    batches = list(batch_iterator(ds, 100, shuffle_seed=1, epoch=0))
    assert len(batches) == 1 and len(batches[0][1]) == 6


def test_batch_indices_cover_epoch_once():
    idx = batch_indices(23, 5, shuffle_seed=3, epoch=2)
    assert [len(b) for b in idx] == [5, 5, 5, 5, 3]
    assert sorted(np.concatenate(idx).tolist()) == list(range(23))


def test_batch_order_repeatable():
    a = batch_indices(50, 8, 11, 4)
    b = batch_indices(50, 8, 11, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = batch_indices(50, 8, 11, 5)
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_standardize_uses_train_statistics():
    train = Dataset(np.random.default_rng(0).uniform(size=(20, 2, 2, 3)), np.zeros(20), 1)
    test = Dataset(np.random.default_rng(1).uniform(size=(5, 2, 2, 3)), np.zeros(5), 1)
    st, sv = standardize(train, test)
    np.testing.assert_allclose(st.images.mean(axis=(0, 1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(st.images.std(axis=(0, 1, 2)), 1, atol=1e-12)
    assert sv.images.shape == test.images.shape


def test_dataset_rejects_bad_labels():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 1, 1)), [0, 3], 3)
