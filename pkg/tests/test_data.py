import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from replaceblock import data as D


def random_cifar(n, seed=0):
    r = np.random.default_rng(seed)
    return r.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8), r.integers(0, 10, n)


class TestCifar:
    def test_record_size(self):
        assert D.CIFAR_RECORD == 3073

    def test_ten_records(self, tmp_path):
        imgs, labels = random_cifar(10)
        D.write_cifar10_file(tmp_path / "b.bin", imgs, labels)
        assert (tmp_path / "b.bin").stat().st_size == 10 * 3073
        ds = D.read_cifar10_file(tmp_path / "b.bin")
        assert len(ds) == 10
        np.testing.assert_array_equal(ds.images, imgs)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_pixel_scaling_oracle(self, tmp_path):
        record = bytearray(3073)
        record[0] = 7
        record[1] = 200  # R plane, pixel (0,0)
        record[1 + 1024] = 17  # G plane, pixel (0,0)
        record[1 + 32 + 5] = 99  # R plane, pixel (1,5)
        (tmp_path / "one.bin").write_bytes(bytes(record))
        ds = D.read_cifar10_file(tmp_path / "one.bin")
        px = ds.pixels()
        assert ds.labels[0] == 7
        assert px[0, 0, 0, 0] == pytest.approx(200 / 255)
        assert px[0, 1, 0, 0] == pytest.approx(17 / 255)
        assert px[0, 0, 1, 5] == pytest.approx(99 / 255)
        assert 0 <= px.min() and px.max() <= 1

    def test_rejects_truncated(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"\x00" * 3000)
        with pytest.raises(D.DatasetError, match="multiple of 3073"):
            D.read_cifar10_file(tmp_path / "bad.bin")

    def test_rejects_label_byte(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(bytes([10]) + b"\x00" * 3072)
        with pytest.raises(D.DatasetError, match="label"):
            D.read_cifar10_file(tmp_path / "bad.bin")

    def test_load_directory(self, tmp_path):
        sub = tmp_path / "cifar-10-batches-bin"
        sub.mkdir()
        for i, name in enumerate(["data_batch_1.bin", "data_batch_2.bin", "test_batch.bin"]):
            D.write_cifar10_file(sub / name, *random_cifar(5, i))
        train, test = D.load_cifar10(tmp_path)
        assert len(train) == 10 and len(test) == 5

    def test_missing_directory(self, tmp_path):
        with pytest.raises(D.DatasetError, match="not found"):
            D.load_cifar10(tmp_path / "nope")


class TestMnist:
    def _write(self, tmp_path, n=3, seed=0):
        r = np.random.default_rng(seed)
        imgs = r.integers(0, 256, (n, 28, 28), dtype=np.uint8)
        labels = r.integers(0, 10, n)
        D.write_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx", imgs, labels)
        return imgs, labels

    def test_round_trip_and_padding(self, tmp_path):
        imgs, labels = self._write(tmp_path, 1)
        ds = D.load_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")
        assert ds.images.shape == (1, 1, 32, 32)
        np.testing.assert_array_equal(ds.images[0, 0, 2:30, 2:30], imgs[0])
        border = np.ones((32, 32), bool)
        border[2:30, 2:30] = False
        assert not ds.images[0, 0][border].any()
        np.testing.assert_array_equal(ds.labels, labels)

    def test_gzip(self, tmp_path):
        imgs, _ = self._write(tmp_path)
        for name in ("i.idx", "l.idx"):
            (tmp_path / (name + ".gz")).write_bytes(gzip.compress((tmp_path / name).read_bytes()))
        ds = D.load_mnist_idx(tmp_path / "i.idx.gz", tmp_path / "l.idx.gz")
        np.testing.assert_array_equal(ds.images[:, 0, 2:30, 2:30], imgs)

    def test_rejects_magic(self, tmp_path):
        self._write(tmp_path)
        raw = bytearray((tmp_path / "i.idx").read_bytes())
        raw[3] = 0x04  # 2052
        (tmp_path / "i.idx").write_bytes(bytes(raw))
        with pytest.raises(D.DatasetError, match="magic"):
            D.load_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")

    def test_rejects_swapped_files(self, tmp_path):
        self._write(tmp_path, n=10)
        with pytest.raises(D.DatasetError, match="magic"):
            D.load_mnist_idx(tmp_path / "l.idx", tmp_path / "i.idx")

    def test_rejects_count_mismatch(self, tmp_path):
        r = np.random.default_rng(0)
        D.write_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx", r.integers(0, 255, (3, 28, 28)), [1, 2])
        with pytest.raises(D.DatasetError, match="3 images but 2 labels"):
            D.load_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")

    def test_rejects_truncated_header(self, tmp_path):
        self._write(tmp_path)
        (tmp_path / "i.idx").write_bytes(b"\x00\x00")
        with pytest.raises(D.DatasetError, match="header"):
            D.load_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")


class TestAugment:
    def test_neutral_draw_is_identity(self, rng):
        img = rng.random((3, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(D.flip_crop(img, False, 4, 4), img)

    def test_flip_twice(self, rng):
        img = rng.random((3, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(D.flip_crop(D.flip_crop(img, True, 4, 4), True, 4, 4), img)

    def test_crop_origin_oracle(self, rng):
        img = rng.random((3, 32, 32)).astype(np.float32)
        padded = np.zeros((3, 40, 40), np.float32)
        padded[:, 4:36, 4:36] = img
        np.testing.assert_array_equal(D.flip_crop(img, False, 0, 0), padded[:, :32, :32])

    @settings(max_examples=50, deadline=None)
    @given(st.booleans(), st.integers(0, 8), st.integers(0, 8))
    def test_crop_index_oracle(self, flip, dy, dx):
        img = np.arange(2 * 6 * 6, dtype=np.float32).reshape(2, 6, 6) + 1
        out = D.flip_crop(img, flip, dy, dx)
        src = img[..., ::-1] if flip else img
        for i in range(6):
            for j in range(6):
                y, x = i + dy - 4, j + dx - 4
                want = src[:, y, x] if 0 <= y < 6 and 0 <= x < 6 else 0
                np.testing.assert_array_equal(out[:, i, j], want)

    def test_augment_keeps_shape(self, rng):
        assert D.augment(rng.random((3, 32, 32)), rng).shape == (3, 32, 32)


class TestNormalize:
    def _ds(self, seed=0):
        imgs, labels = random_cifar(50, seed)
        return D.Dataset(imgs, labels)

    def test_zero_mean_output(self):
        ds = self._ds()
        stats = D.NormStats.from_dataset(ds)
        out = D.normalize(ds.pixels().astype(np.float64), stats)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1, atol=1e-5)

    def test_constants_reproduce(self):
        assert D.NormStats.from_dataset(self._ds()) == D.NormStats.from_dataset(self._ds())

    def test_round_trip(self, rng):
        stats = D.NormStats.from_dataset(self._ds())
        x = rng.random((4, 3, 32, 32)).astype(np.float32)
        np.testing.assert_allclose(D.denormalize(D.normalize(x, stats), stats), x, atol=1e-6)

    def test_rejects_zero_std(self):
        ds = D.Dataset(np.full((4, 3, 32, 32), 9, np.uint8), np.zeros(4, int))
        with pytest.raises(D.DatasetError, match="standard deviation"):
            D.NormStats.from_dataset(ds)


class TestBatching:
    def _ds(self, n=70):
        imgs, labels = random_cifar(n, 3)
        return D.Dataset(imgs, labels)

    def test_epoch_is_permutation(self):
        it = D.BatchIterator(self._ds(), 16, seed=5)
        for e in (1, 2):
            assert sorted(it.order(e)) == list(range(70))
        assert not np.array_equal(it.order(1), it.order(2))
        sizes = [len(y) for _, y in it.epoch(1)]
        assert sizes == [16, 16, 16, 16, 6] and len(it) == 5

    def test_labels_follow_order(self):
        ds = self._ds()
        it = D.BatchIterator(ds, 16, seed=5)
        labels = np.concatenate([y for _, y in it.epoch(3)])
        np.testing.assert_array_equal(labels, ds.labels[it.order(3)])

    def test_same_seed_same_batches(self):
        ds = self._ds()
        stats = D.NormStats.from_dataset(ds)
        a = list(D.BatchIterator(ds, 32, 9, stats).epoch(1))
        b = list(D.BatchIterator(ds, 32, 9, stats).epoch(1))
        for (xa, ya), (xb, yb) in zip(a, b):
            assert xa.dtype == np.float32
            np.testing.assert_array_equal(xa, xb)
            np.testing.assert_array_equal(ya, yb)

    def test_augmentation_independent_of_batch_size(self):
        ds = self._ds()
        by_idx = {}
        for bs in (7, 64):
            it = D.BatchIterator(ds, bs, 2)
            xs = np.concatenate([x for x, _ in it.epoch(1)])
            by_idx[bs] = xs[np.argsort(it.order(1))]
        np.testing.assert_array_equal(by_idx[7], by_idx[64])

    def test_no_augment_gives_raw_pixels(self):
        ds = self._ds()
        it = D.BatchIterator(ds, 100, 0, augment=False)
        (x, _), = list(it.epoch(1))
        np.testing.assert_array_equal(x, ds.pixels(it.order(1)))

    def test_rejects_empty(self):
        with pytest.raises(D.DatasetError):
            D.BatchIterator(D.Dataset(np.zeros((0, 3, 32, 32), np.uint8), np.zeros(0, int)), 8, 0)


def test_balanced_subset():
    imgs, labels = random_cifar(500, 1)
    sub = D.balanced_subset(D.Dataset(imgs, labels), 100)
    assert len(sub) == 100
    assert np.all(np.bincount(sub.labels, minlength=10) == 10)


def test_synthetic_is_deterministic_and_balanced():
    a, _ = D.synthetic_cifar(40, 10, seed=3)
    b, _ = D.synthetic_cifar(40, 10, seed=3)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (40, 3, 32, 32) and a.images.dtype == np.uint8
    assert np.all(np.bincount(a.labels, minlength=10) == 4)
