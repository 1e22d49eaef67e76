import numpy as np
import pytest

from core.errors import DataError
from core.services.dataset_service import (
    CIFAR_DIR,
    CIFAR_RECORD,
    CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
    DatasetService,
    load_dataset,
    parse_cifar_records,
    stratified_indices,
    synthetic_shapes,
)


def _records(labels, fill=None):
    out = bytearray()
    for i, y in enumerate(labels):
        pixels = np.full(3072, (i * 7) % 256 if fill is None else fill, dtype=np.uint8)
        out += bytes([y]) + pixels.tobytes()
    return bytes(out)


@pytest.fixture
def cifar_dir(tmp_path):
    root = tmp_path / CIFAR_DIR
    root.mkdir()
    for name in CIFAR_TRAIN_FILES:
        (root / name).write_bytes(_records([i % 10 for i in range(20)]))
    (root / CIFAR_TEST_FILE).write_bytes(_records([i % 10 for i in range(20)]))
    return tmp_path


class TestSyntheticShapes:
    def test_same_seed_same_bytes(self):
        a, _ = load_dataset("synthetic-shapes", 7, train_size=12, eval_size=4)
        b, _ = load_dataset("synthetic-shapes", 7, train_size=12, eval_size=4)
        assert a.images.tobytes() == b.images.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        a, _ = load_dataset("synthetic-shapes", 7, train_size=12, eval_size=4)
        b, _ = load_dataset("synthetic-shapes", 8, train_size=12, eval_size=4)
        assert a.images.tobytes() != b.images.tobytes()

    def test_shapes_ranges_and_balance(self):
        train, held = load_dataset("synthetic-shapes", 1, train_size=20, eval_size=6, num_classes=5, image_size=16)
        assert train.images.shape == (20, 3, 16, 16)
        assert held.images.shape == (6, 3, 16, 16)
        assert train.images.min() >= 0.0 and train.images.max() <= 1.0
        assert train.labels.dtype == np.int64
        counts = np.bincount(np.concatenate([train.labels, held.labels]), minlength=5)
        assert counts.tolist() == [6, 5, 5, 5, 5]

    def test_classes_are_visually_distinct(self, rng):
        images, labels = synthetic_shapes(8, 8, 32, rng)
        flat = images.reshape(8, -1)
        assert len({row.tobytes() for row in flat}) == 8
        assert sorted(labels.tolist()) == list(range(8))

    def test_too_many_classes(self, rng):
        with pytest.raises(DataError):
            synthetic_shapes(4, 9, 32, rng)

    def test_too_small(self, rng):
        with pytest.raises(DataError):
            synthetic_shapes(4, 4, 6, rng)

    def test_unknown_dataset(self):
        with pytest.raises(DataError):
            DatasetService().load_dataset("imagenet", 0)

    def test_subset_and_class_counts(self):
        train, _ = load_dataset("synthetic-shapes", 2, train_size=8, eval_size=2)
        assert len(train.subset(3)) == 3
        assert train.class_counts().sum() == 8


class TestCifarRecords:
    def test_label_and_pixel_scaling(self):
        raw = bytes([6]) + bytes(range(256)) * 12
        images, labels = parse_cifar_records(raw, "batch")
        assert labels.tolist() == [6]
        assert images.shape == (1, 3, 32, 32)
        assert images[0, 0, 0, 0] == 0.0
        assert images[0, 0, 0, 255 % 32] == pytest.approx(31 / 255)
        assert images.max() == 1.0

    def test_truncated_record(self):
        with pytest.raises(DataError, match="offset 3073"):
            parse_cifar_records(_records([1, 2])[:-5], "batch")

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            parse_cifar_records(_records([3, 12]), "batch")

    def test_record_length(self):
        assert CIFAR_RECORD == 1 + 32 * 32 * 3


class TestCifarSubset:
    def test_stratified_subset(self, cifar_dir):
        service = DatasetService(cifar_dir)
        train, held = service.load_dataset("cifar10-subset", 5, train_size=8, eval_size=4, num_classes=4)
        assert train.class_counts().tolist() == [2, 2, 2, 2]
        assert held.class_counts().tolist() == [1, 1, 1, 1]
        assert train.images.shape == (8, 3, 32, 32)

    def test_flat_directory_layout(self, cifar_dir):
        train, _ = DatasetService(cifar_dir / CIFAR_DIR).load_dataset(
            "cifar10-subset", 5, train_size=4, eval_size=2, num_classes=2)
        assert len(train) == 4

    def test_deterministic_under_seed(self, cifar_dir):
        a, _ = DatasetService(cifar_dir).load_dataset("cifar10-subset", 5, 8, 4, 4)
        b, _ = DatasetService(cifar_dir).load_dataset("cifar10-subset", 5, 8, 4, 4)
        assert a.images.tobytes() == b.images.tobytes()

    def test_missing_batch_file(self, cifar_dir):
        (cifar_dir / CIFAR_DIR / CIFAR_TRAIN_FILES[2]).unlink()
        with pytest.raises(DataError):
            DatasetService(cifar_dir).load_dataset("cifar10-subset", 5, 8, 4, 4)

    def test_too_many_samples_per_class(self, cifar_dir):
        with pytest.raises(DataError):
            DatasetService(cifar_dir).load_dataset("cifar10-subset", 5, 8, 40, 4)

    def test_rejects_other_image_sizes_and_class_counts(self, cifar_dir):
        with pytest.raises(DataError):
            DatasetService(cifar_dir).load_dataset("cifar10-subset", 5, 8, 4, 4, image_size=16)
        with pytest.raises(DataError):
            DatasetService(cifar_dir).load_dataset("cifar10-subset", 5, 8, 4, 11)


def test_stratified_indices_give_remainder_to_earlier_classes(rng):
    labels = np.repeat(np.arange(3), 5)
    idx = stratified_indices(labels, 7, 3, rng)
    assert np.bincount(labels[idx], minlength=3).tolist() == [3, 2, 2]
    assert len(set(idx.tolist())) == 7
