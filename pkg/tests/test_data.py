import struct

import numpy as np
import pytest

from squeezekd.data import (
    AugmentPolicy,
    DataFormatError,
    DatasetSpec,
    augment,
    compute_normalization,
    derive_rng,
    epoch_batches,
    eval_batches,
    hflip,
    load_binary_dataset,
    load_datasets,
    normalize,
    synth_dataset,
)


class TestSynthDataset:
    def test_balanced_classes(self):
        ds = synth_dataset(num_classes=2, num_samples=100, seed=0)
        counts = np.bincount(ds.labels)
        assert list(counts) == [50, 50]

    def test_zero_noise_gives_identical_images_within_class(self):
        ds = synth_dataset(num_classes=3, num_samples=30, noise=0.0, seed=1)
        for k in range(3):
            imgs = ds.images[ds.labels == k]
            assert (imgs == imgs[0]).all()

    def test_images_in_unit_interval(self):
        ds = synth_dataset(num_classes=4, num_samples=200, noise=0.8, seed=2)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_train_test_share_patterns(self):
        train = synth_dataset(2, 20, noise=0.0, seed=3, split="train")
        test = synth_dataset(2, 20, noise=0.0, seed=99, split="test")
        np.testing.assert_array_equal(train.images[0], test.images[0])

    def test_linear_probe_separates_low_noise(self):
        ds = synth_dataset(num_classes=4, num_samples=400, noise=0.1, seed=4)
        x = ds.images.reshape(len(ds), -1).astype(np.float64)
        x = np.hstack([x, np.ones((len(ds), 1))])
        onehot = np.eye(4)[ds.labels]
        w, *_ = np.linalg.lstsq(x, onehot, rcond=None)
        acc = (np.argmax(x @ w, axis=1) == ds.labels).mean()
        assert acc > 0.9

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="at least one sample per class"):
            synth_dataset(num_classes=5, num_samples=3)


class TestNormalization:
    def test_stats_standardize_training_split(self):
        ds = synth_dataset(num_classes=2, num_samples=500, noise=0.5, seed=5)
        mean, std = compute_normalization(ds.images)
        normed = normalize(ds.images.astype(np.float64), mean, std)
        assert np.abs(normed.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(normed.std(axis=(0, 2, 3)) - 1.0).max() < 1e-4

    def test_all_zero_pixels_normalize_to_constant(self):
        images = np.zeros((4, 1, 3, 3), dtype=np.float32)
        mean, std = compute_normalization(images)
        assert (std > 0).all()
        normed = normalize(images, mean, std)
        np.testing.assert_allclose(normed, -mean[0] / std[0])

    def test_load_datasets_attaches_train_stats_to_both(self):
        spec = DatasetSpec(kind="synth", num_classes=2, train_samples=50, test_samples=20)
        train, test = load_datasets(spec, seed=0)
        np.testing.assert_array_equal(train.mean, test.mean)
        expected_mean, _ = compute_normalization(train.images)
        np.testing.assert_array_equal(train.mean, expected_mean)


def write_cifar_like(path, labels, images):
    """images: uint8 [M,c,H,W]; 1 label byte + pixel bytes per record."""
    with open(path, "wb") as fh:
        for lbl, img in zip(labels, images):
            fh.write(bytes([lbl]))
            fh.write(img.tobytes())


class TestCifarLikeLoader:
    def test_record_count(self, tmp_path):
        imgs = np.zeros((2, 1, 2, 2), dtype=np.uint8)
        write_cifar_like(tmp_path / "d.bin", [0, 1], imgs)
        ds = load_binary_dataset(tmp_path / "d.bin", "cifar-like", num_classes=2,
                                 image_size=(1, 2, 2))
        assert len(ds) == 2

    def test_pixels_scaled_and_stats_match_hand_computation(self, tmp_path):
        rng = np.random.default_rng(6)
        imgs = rng.integers(0, 256, size=(3, 2, 2, 2), dtype=np.uint8)
        write_cifar_like(tmp_path / "d.bin", [0, 1, 0], imgs)
        ds = load_binary_dataset(tmp_path / "d.bin", "cifar-like", num_classes=2,
                                 image_size=(2, 2, 2))
        assert ds.images.max() <= 1.0
        mean, std = compute_normalization(ds.images)
        hand = imgs.astype(np.float64) / 255.0
        np.testing.assert_allclose(mean, hand.mean(axis=(0, 2, 3)), atol=1e-6)
        np.testing.assert_allclose(std, hand.std(axis=(0, 2, 3)), atol=1e-6)

    def test_truncated_file_reports_offset(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(bytes(7))  # record size is 5
        with pytest.raises(DataFormatError, match="byte offset 5"):
            load_binary_dataset(tmp_path / "bad.bin", "cifar-like", num_classes=2,
                                image_size=(1, 2, 2))

    def test_label_out_of_range_reports_offset(self, tmp_path):
        imgs = np.zeros((3, 1, 2, 2), dtype=np.uint8)
        write_cifar_like(tmp_path / "d.bin", [0, 7, 1], imgs)
        with pytest.raises(DataFormatError, match="record 1 has label 7.*byte offset 5"):
            load_binary_dataset(tmp_path / "d.bin", "cifar-like", num_classes=2,
                                image_size=(1, 2, 2))


def write_idx(path, array):
    dims = array.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, 0x08, len(dims)))
        fh.write(struct.pack(f">{len(dims)}I", *dims))
        fh.write(array.tobytes())


class TestIdxLikeLoader:
    def test_roundtrip_three_dim_images(self, tmp_path):
        rng = np.random.default_rng(7)
        imgs = rng.integers(0, 256, size=(4, 3, 3), dtype=np.uint8)
        labels = np.array([0, 1, 1, 0], dtype=np.uint8)
        write_idx(tmp_path / "images.idx", imgs)
        write_idx(tmp_path / "labels.idx", labels)
        ds = load_binary_dataset(tmp_path, "idx-like", num_classes=2)
        assert ds.images.shape == (4, 1, 3, 3)
        np.testing.assert_allclose(ds.images[:, 0] * 255.0, imgs, atol=1e-6)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_missing_file(self, tmp_path):
        write_idx(tmp_path / "images.idx", np.zeros((1, 2, 2), dtype=np.uint8))
        with pytest.raises(DataFormatError, match="labels.idx"):
            load_binary_dataset(tmp_path, "idx-like", num_classes=2)

    def test_truncated_payload(self, tmp_path):
        write_idx(tmp_path / "images.idx", np.zeros((2, 2, 2), dtype=np.uint8))
        raw = (tmp_path / "images.idx").read_bytes()
        (tmp_path / "images.idx").write_bytes(raw[:-3])
        write_idx(tmp_path / "labels.idx", np.zeros(2, dtype=np.uint8))
        with pytest.raises(DataFormatError, match="payload"):
            load_binary_dataset(tmp_path, "idx-like", num_classes=2)


class TestAugment:
    def test_disabled_knobs_are_identity(self):
        rng = np.random.default_rng(8)
        batch = rng.random((4, 1, 8, 8)).astype(np.float32)
        out = augment(batch, AugmentPolicy(pad=0, hflip_prob=0.0), derive_rng(0, 1))
        np.testing.assert_array_equal(out, batch)
        assert out is not batch

    def test_hflip_is_involution(self):
        rng = np.random.default_rng(9)
        batch = rng.random((3, 2, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(hflip(hflip(batch)), batch)

    def test_fixed_seed_reproduces_batch(self):
        rng = np.random.default_rng(10)
        batch = rng.random((6, 1, 8, 8)).astype(np.float32)
        policy = AugmentPolicy(pad=2, hflip_prob=0.5)
        a = augment(batch, policy, derive_rng(3, 2))
        b = augment(batch, policy, derive_rng(3, 2))
        np.testing.assert_array_equal(a, b)

    def test_shapes_and_labels_preserved(self):
        rng = np.random.default_rng(11)
        batch = rng.random((5, 1, 8, 8)).astype(np.float32)
        out = augment(batch, AugmentPolicy(pad=3, hflip_prob=1.0), derive_rng(0, 0))
        assert out.shape == batch.shape

    def test_crop_larger_than_padded_rejected(self):
        with pytest.raises(ValueError, match="exceeds padded size"):
            augment(np.zeros((1, 1, 4, 4), dtype=np.float32),
                    AugmentPolicy(pad=1, crop=(10, 10)), derive_rng(0, 0))


class TestBatchIteration:
    def _dataset(self, n=37):
        spec = DatasetSpec(kind="synth", num_classes=2, train_samples=n, test_samples=10)
        train, _ = load_datasets(spec, seed=0)
        return train

    def test_epoch_visits_every_index_once(self):
        ds = self._dataset()
        seen = []
        for x, y in epoch_batches(ds, 8, epoch=0, seed=0, policy=None):
            seen.extend(y.tolist())
            assert x.shape[0] == len(y)
        assert len(seen) == 37
        assert sorted(np.bincount(seen)) == sorted(np.bincount(ds.labels))

    def test_order_differs_across_epochs_but_reproduces(self):
        ds = self._dataset()
        def order(epoch):
            out = []
            for x, _ in epoch_batches(ds, 8, epoch=epoch, seed=5, policy=None):
                out.append(x)
            return np.concatenate(out)
        a0, a0b, a1 = order(0), order(0), order(1)
        np.testing.assert_array_equal(a0, a0b)
        assert (a0 != a1).any()

    def test_augment_stream_independent_of_order_stream(self):
        # same visit order regardless of augmentation settings
        ds = self._dataset()
        labels_plain = [y for _, y in epoch_batches(ds, 8, 0, 7, policy=None)]
        labels_aug = [y for _, y in epoch_batches(ds, 8, 0, 7,
                                                  policy=AugmentPolicy(pad=2))]
        for a, b in zip(labels_plain, labels_aug):
            np.testing.assert_array_equal(a, b)

    def test_eval_batches_in_order_and_normalized(self):
        ds = self._dataset(16)
        xs = np.concatenate([x for x, _ in eval_batches(ds, 5)])
        expected = normalize(ds.images, ds.mean, ds.std).astype(np.float32)
        np.testing.assert_array_equal(xs, expected)

    def test_batches_require_stats(self):
        ds = synth_dataset(2, 10)
        with pytest.raises(ValueError, match="normalization stats"):
            next(epoch_batches(ds, 4, 0, 0))


class TestSpecValidation:
    def test_binary_kind_requires_path(self):
        with pytest.raises(ValueError, match="dataset.path"):
            DatasetSpec(kind="cifar", path="")

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            DatasetSpec(kind="imagenet")
