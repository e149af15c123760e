import numpy as np
import pytest
import torch
from PIL import Image

from src.datamodel import (DatasetLayout, MultiDomainDataset, generate_synthetic_msda, iterate_batches,
                           load_multi_domain_dataset, split_held_out)
from src.errors import ConfigurationError, ContractError, IngestionError
from src.models import ShiftKind, SyntheticShiftConfig


class TestMultiDomainDataset:
    def test_target_labels_hidden_from_training(self, small_dataset):
        """Test that training accessors never return target labels"""
        _, labels = small_dataset.training_arrays(small_dataset.target_id)
        assert labels is None
        assert small_dataset.sample(small_dataset.target_id, 0).label is None

    def test_evaluation_view_has_target_labels(self, small_dataset):
        """Test that the evaluation store exposes target labels"""
        inputs, labels = small_dataset.evaluation_arrays(small_dataset.target_id)
        assert len(inputs) == len(labels) == 60

    def test_arrays_are_read_only(self, small_dataset):
        """Test that the dataset cannot be mutated through its arrays"""
        inputs, _ = small_dataset.training_arrays(0)
        with pytest.raises(ValueError):
            inputs[0, 0] = 1.0

    def test_label_range_checked(self):
        """Test that labels outside the class range are rejected"""
        x = np.zeros((2, 2), dtype=np.float32)
        with pytest.raises(ContractError):
            MultiDomainDataset(["a", "t"], ["c0", "c1"], [x, x], [np.array([0, 2])])

    def test_shape_mismatch(self):
        """Test that every domain must share one input shape"""
        with pytest.raises(IngestionError):
            MultiDomainDataset(["a", "t"], ["c0"], [np.zeros((2, 2)), np.zeros((2, 3))], [np.array([0, 0])])

    def test_no_target_labels(self):
        """Test evaluation access without target labels"""
        x = np.zeros((2, 2), dtype=np.float32)
        dataset = MultiDomainDataset(["a", "t"], ["c0", "c1"], [x, x], [np.array([0, 1])])
        assert not dataset.has_target_eval_labels
        with pytest.raises(ContractError):
            dataset.evaluation_arrays(dataset.target_id)


class TestSyntheticGenerator:
    def test_deterministic(self, small_shift_config):
        """Test that one seed gives one dataset"""
        a = generate_synthetic_msda(small_shift_config)
        b = generate_synthetic_msda(small_shift_config)
        for d in range(a.num_domains):
            np.testing.assert_array_equal(a.evaluation_arrays(d)[0], b.evaluation_arrays(d)[0])

    def test_layout(self, small_dataset):
        """Test domain names, ids and balanced labels"""
        assert small_dataset.domain_names == ["source_0", "source_1", "target"]
        assert small_dataset.target_id == 2
        assert small_dataset.input_shape == (2,)
        _, labels = small_dataset.training_arrays(0)
        assert np.bincount(labels).tolist() == [20, 20, 20]

    def test_rotation_preserves_radius(self):
        """Test that rotation moves points around the origin only"""
        base = SyntheticShiftConfig(num_source_domains=2, shift_magnitudes=[0.0, 90.0, 180.0], seed=3)
        dataset = generate_synthetic_msda(base)
        x0 = dataset.evaluation_arrays(0)[0]
        x2 = dataset.evaluation_arrays(2)[0]
        assert abs(np.linalg.norm(x0, axis=1).mean() - np.linalg.norm(x2, axis=1).mean()) < 0.2

    def test_translation_moves_mean(self):
        """Test that translation moves the domain mean along the diagonal"""
        cfg = SyntheticShiftConfig(num_source_domains=2, shift_kind=ShiftKind.TRANSLATION,
                                   shift_magnitudes=[0.0, 1.0, 5.0], samples_per_domain=600, seed=1)
        dataset = generate_synthetic_msda(cfg)
        shift = dataset.evaluation_arrays(2)[0].mean(axis=0) - dataset.evaluation_arrays(0)[0].mean(axis=0)
        np.testing.assert_allclose(shift, [5.0 / np.sqrt(2)] * 2, atol=0.15)

    def test_label_noise_only_on_sources(self):
        """Test that corrupted labels are recorded and the target stays clean"""
        cfg = SyntheticShiftConfig(num_source_domains=2, shift_magnitudes=[0.0, 10.0, 20.0],
                                   label_noise_rate=0.3, samples_per_domain=300, seed=2)
        dataset = generate_synthetic_msda(cfg)
        mask = dataset.noisy_mask(0)
        assert 0.2 < mask.mean() < 0.4
        assert not dataset.noisy_mask(dataset.target_id).any()

    def test_rotated_target_defeats_source_centroids(self):
        """Test that a nearest-centroid classifier fitted on the sources does worse on the rotated target"""
        cfg = SyntheticShiftConfig(num_source_domains=3, shift_magnitudes=[0.0, 30.0, 60.0, 90.0],
                                   samples_per_domain=300, seed=4)
        dataset = generate_synthetic_msda(cfg)
        fit_x, fit_y, held_x, held_y = [], [], [], []
        for k in range(dataset.num_source_domains):
            x, y = dataset.evaluation_arrays(k)
            fit_x.append(x[:200])
            fit_y.append(y[:200])
            held_x.append(x[200:])
            held_y.append(y[200:])
        fit_x, fit_y = np.concatenate(fit_x), np.concatenate(fit_y)
        centroids = np.stack([fit_x[fit_y == c].mean(axis=0) for c in range(dataset.num_classes)])

        def accuracy(x, y):
            distances = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
            return float((distances.argmin(axis=1) == y).mean())

        source_accuracy = accuracy(np.concatenate(held_x), np.concatenate(held_y))
        target_accuracy = accuracy(*dataset.evaluation_arrays(dataset.target_id))
        assert source_accuracy > 0.9
        assert target_accuracy < source_accuracy - 0.2


class TestBatchIterator:
    def test_one_entry_per_domain(self, small_dataset):
        """Test that every batch holds B samples of every domain"""
        batch = next(iterate_batches(small_dataset, 16, seed=0))
        assert len(batch.per_domain) == 3
        assert all(inputs.shape == (16, 2) for inputs, _ in batch.per_domain)
        assert batch.per_domain[-1][1] is None
        assert batch.has_target

    def test_epoch_covers_largest_domain(self, small_dataset):
        """Test the number of batches per epoch"""
        batches = iterate_batches(small_dataset, 16, seed=0)
        assert batches.batches_per_epoch == 4
        assert len(list(batches.epoch())) == 4

    def test_every_sample_seen_once_per_pass(self, small_dataset):
        """Test that a domain is exhausted before it is reshuffled"""
        batches = iterate_batches(small_dataset, 20, seed=3)
        seen = np.concatenate([next(batches).indices[0] for _ in range(3)])
        assert sorted(seen.tolist()) == list(range(60))

    def test_same_seed_same_order(self, small_dataset):
        """Test that batch order is reproducible"""
        a = next(iterate_batches(small_dataset, 8, seed=5))
        b = next(iterate_batches(small_dataset, 8, seed=5))
        for (xa, _), (xb, _) in zip(a.per_domain, b.per_domain):
            assert torch.equal(xa, xb)

    def test_target_only_iteration(self, small_dataset):
        """Test selecting a subset of domains"""
        batch = next(iterate_batches(small_dataset, 8, seed=0, domain_ids=[small_dataset.target_id]))
        assert batch.domain_ids == [2]
        assert batch.target_inputs.shape == (8, 2)

    def test_invalid_batch_size(self, small_dataset):
        """Test that the batch size must be positive"""
        with pytest.raises(ConfigurationError):
            iterate_batches(small_dataset, 0, seed=0)


class TestSplitHeldOut:
    def test_disjoint_and_complete(self, small_dataset):
        """Test that the split partitions every domain"""
        train, val = split_held_out(small_dataset, 0.25, seed=0)
        for d in range(small_dataset.num_domains):
            assert train.domain_size(d) + val.domain_size(d) == 60
        assert val.domain_size(0) == 15

    def test_stratified_by_class(self, small_dataset):
        """Test that each class is split in the same proportion"""
        _, val = split_held_out(small_dataset, 0.25, seed=0)
        _, labels = val.training_arrays(0)
        assert np.bincount(labels).tolist() == [5, 5, 5]

    def test_fraction_too_small(self, small_dataset):
        """Test the one-sample granularity check"""
        with pytest.raises(ConfigurationError):
            split_held_out(small_dataset, 0.01, seed=0)


class TestDiskIngestion:
    def _write_image(self, path, value):
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.full((4, 4, 3), value, dtype=np.uint8)).save(path)

    def test_directory_layout(self, tmp_path):
        """Test sorted source ids, class indices and unlabeled target"""
        for domain in ("photo", "art"):
            for cls in ("dog", "cat"):
                self._write_image(tmp_path / domain / cls / "1.png", 10)
        self._write_image(tmp_path / "sketch" / "a.png", 200)
        dataset = load_multi_domain_dataset(tmp_path, DatasetLayout(target_domain="sketch"))
        assert dataset.domain_names == ["art", "photo", "sketch"]
        assert dataset.class_names == ["cat", "dog"]
        assert dataset.input_shape == (3, 4, 4)
        assert not dataset.has_target_eval_labels
        np.testing.assert_allclose(dataset.training_arrays(2)[0].max(), 200 / 255.0, rtol=1e-6)

    def test_labeled_target_feeds_evaluation(self, tmp_path):
        """Test that class folders under the target become evaluation labels"""
        self._write_image(tmp_path / "art" / "cat" / "1.png", 1)
        self._write_image(tmp_path / "art" / "dog" / "1.png", 2)
        self._write_image(tmp_path / "sketch" / "dog" / "1.png", 3)
        dataset = load_multi_domain_dataset(tmp_path, {"target_domain": "sketch"})
        assert dataset.evaluation_arrays(1)[1].tolist() == [1]
        assert dataset.training_arrays(1)[1] is None

    def test_class_mismatch(self, tmp_path):
        """Test that sources must share class names"""
        self._write_image(tmp_path / "art" / "cat" / "1.png", 1)
        self._write_image(tmp_path / "photo" / "dog" / "1.png", 1)
        self._write_image(tmp_path / "sketch" / "a.png", 1)
        with pytest.raises(IngestionError):
            load_multi_domain_dataset(tmp_path, DatasetLayout(target_domain="sketch"))

    def test_manifest(self, tmp_path):
        """Test manifest-driven ingestion with .npy samples"""
        for name, value in (("a0", 0.0), ("a1", 1.0), ("t0", 2.0)):
            np.save(tmp_path / f"{name}.npy", np.full(3, value, dtype=np.float32))
        manifest = tmp_path / "manifest.txt"
        manifest.write_text("path=a0.npy domain=art class=cat\npath=a1.npy domain=art class=dog\n"
                            "# target\npath=t0.npy domain=sketch\n")
        dataset = load_multi_domain_dataset(tmp_path, DatasetLayout(target_domain="sketch",
                                                                    manifest_path=str(manifest)))
        assert dataset.domain_names == ["art", "sketch"]
        assert dataset.training_arrays(0)[1].tolist() == [0, 1]

    def test_missing_target(self, tmp_path):
        """Test that an absent target domain is an ingestion error"""
        self._write_image(tmp_path / "art" / "cat" / "1.png", 1)
        with pytest.raises(IngestionError):
            load_multi_domain_dataset(tmp_path, DatasetLayout(target_domain="sketch"))
