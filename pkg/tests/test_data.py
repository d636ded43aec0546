import numpy as np
import pytest
import torch

from committee_distill.data import (
    LabeledDataset,
    ToyParams,
    default_reference_ipc,
    in_memory_dataset,
    load_manifest,
    load_split,
    materialize_dataset,
    normalize_images,
    denormalize_images,
)
from committee_distill.errors import ConfigError, EmptyDataset, LabelError

SMALL = ToyParams(train_per_class=8, test_per_class=4, seed=3)


class TestManifest:
    def test_materialize_and_reload(self, tmp_path):
        manifest = materialize_dataset("toy10", tmp_path, params=SMALL)
        again = load_manifest(tmp_path / "toy10" / "manifest.json")
        assert manifest.to_json() == again.to_json()
        assert manifest.num_classes == 10
        assert set(manifest.splits) == {"train", "test"}

    def test_split_loading_and_hash_verification(self, tmp_path):
        manifest = materialize_dataset("toy10", tmp_path, params=SMALL)
        train = load_split(manifest, "train", tmp_path)
        assert len(train) == 80
        # corrupt the file; verification must fail
        fpath = tmp_path / "toy10" / "train.npz"
        blob = bytearray(fpath.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        fpath.write_bytes(bytes(blob))
        with pytest.raises(ConfigError, match="hash"):
            load_split(manifest, "train", tmp_path)

    def test_missing_split(self, tmp_path):
        manifest = materialize_dataset("toy10", tmp_path, params=SMALL)
        with pytest.raises(ConfigError):
            load_split(manifest, "validation", tmp_path)

    def test_reference_ipc_convention(self):
        assert default_reference_ipc((32, 32)) == 50
        assert default_reference_ipc((64, 64)) == 10
        assert default_reference_ipc((224, 224)) == 10

    def test_rendering_is_deterministic(self, tmp_path):
        a = materialize_dataset("toy10", tmp_path / "a", params=SMALL)
        b = materialize_dataset("toy10", tmp_path / "b", params=SMALL)
        assert a.splits["train"]["sha256"] == b.splits["train"]["sha256"]
        assert a.splits["test"]["sha256"] == b.splits["test"]["sha256"]

    def test_splits_disjoint(self):
        train, test = in_memory_dataset("toy10", params=SMALL)
        train_rows = {train.images[i].numpy().tobytes() for i in range(len(train))}
        for i in range(len(test)):
            assert test.images[i].numpy().tobytes() not in train_rows


class TestLabeledDataset:
    def test_label_range_enforced(self):
        train, _ = in_memory_dataset("toy10", params=SMALL)
        bad = train.labels.clone()
        bad[0] = 99
        with pytest.raises(LabelError):
            LabeledDataset(train.images, bad, train.manifest, "train")

    def test_empty_split_rejected(self):
        train, _ = in_memory_dataset("toy10", params=SMALL)
        with pytest.raises(EmptyDataset):
            LabeledDataset(train.images[:0], train.labels[:0],
                           train.manifest, "train")

    def test_class_indices_partition(self):
        train, _ = in_memory_dataset("toy10", params=SMALL)
        seen = np.concatenate([train.class_indices(c) for c in range(10)])
        assert sorted(seen.tolist()) == list(range(len(train)))
        for c in range(10):
            assert (train.labels[train.class_indices(c)] == c).all()

    def test_normalized_train_split_has_zero_mean_unit_std(self):
        train, _ = in_memory_dataset("toy10", params=SMALL)
        mean = train.images.mean(dim=(0, 2, 3))
        std = train.images.std(dim=(0, 2, 3))
        assert torch.allclose(mean, torch.zeros(3), atol=0.01)
        assert torch.allclose(std, torch.ones(3), atol=0.01)

    def test_normalize_denormalize_round_trip(self):
        train, _ = in_memory_dataset("toy10", params=SMALL)
        raw = (torch.rand(4, 3, 32, 32) * 255).round().to(torch.uint8)
        normalized = normalize_images(raw, train.manifest)
        back = denormalize_images(normalized, train.manifest)
        assert torch.allclose(back, raw.float() / 255.0, atol=1e-5)
