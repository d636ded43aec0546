"""Desk-scale labeled datasets: procedural generators, manifests, splits.

Nothing is downloaded. Each bundled dataset is rendered deterministically from
its generator parameters, stored as uint8 npz files, and described by a JSON
manifest carrying split hashes, per-channel normalization constants, and the
reference IPC used for prior-performance assignment.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, EmptyDataset, LabelError

MANIFEST_FORMAT_VERSION = 1

# Appendix convention: 50 images per class at low resolution, 10 above it.
SMALL_RESOLUTION_CUTOFF = 32
REFERENCE_IPC_SMALL = 50
REFERENCE_IPC_LARGE = 10


def default_reference_ipc(resolution) -> int:
    h, w = resolution
    if max(h, w) <= SMALL_RESOLUTION_CUTOFF:
        return REFERENCE_IPC_SMALL
    return REFERENCE_IPC_LARGE


@dataclass
class DatasetManifest:
    dataset_id: str
    num_classes: int
    resolution: tuple[int, int]
    channels: int
    splits: dict  # split -> {"file": str, "sha256": str, "count": int}
    normalization: dict  # {"mean": [...], "std": [...]}
    reference_ipc: int
    format_version: int = MANIFEST_FORMAT_VERSION

    def to_json(self) -> str:
        d = {
            "format_version": self.format_version,
            "dataset_id": self.dataset_id,
            "num_classes": self.num_classes,
            "resolution": list(self.resolution),
            "channels": self.channels,
            "splits": self.splits,
            "normalization": self.normalization,
            "reference_ipc": self.reference_ipc,
        }
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("format_version") != MANIFEST_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported manifest format_version {d.get('format_version')!r}")
        return cls(
            dataset_id=d["dataset_id"],
            num_classes=d["num_classes"],
            resolution=tuple(d["resolution"]),
            channels=d["channels"],
            splits=d["splits"],
            normalization=d["normalization"],
            reference_ipc=d["reference_ipc"],
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


class LabeledDataset:
    """Normalized image tensor plus integer labels for one split."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor,
                 manifest: DatasetManifest, split: str):
        if images.shape[0] == 0:
            raise EmptyDataset(f"split {split!r} of {manifest.dataset_id} is empty")
        if labels.min().item() < 0 or labels.max().item() >= manifest.num_classes:
            raise LabelError(
                f"labels must lie in [0, {manifest.num_classes}), "
                f"got range [{labels.min().item()}, {labels.max().item()}]")
        self.images = images
        self.labels = labels
        self.manifest = manifest
        self.split = split
        self._class_indices = None

    def __len__(self):
        return self.images.shape[0]

    @property
    def dataset_id(self):
        return self.manifest.dataset_id

    @property
    def num_classes(self):
        return self.manifest.num_classes

    def class_indices(self, cls: int) -> np.ndarray:
        if self._class_indices is None:
            labels = self.labels.numpy()
            self._class_indices = {
                c: np.nonzero(labels == c)[0] for c in range(self.num_classes)}
        return self._class_indices[cls]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.manifest.digest().encode())
        h.update(self.split.encode())
        h.update(self.images.numpy().tobytes())
        h.update(self.labels.numpy().tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# procedural rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyParams:
    """Knobs for the procedural class-pattern renderer."""

    num_classes: int = 10
    resolution: tuple[int, int] = (32, 32)
    train_per_class: int = 200
    test_per_class: int = 50
    noise_sigma: float = 0.18
    blob_strength: float = 0.8
    grating_strength: float = 0.9
    color_jitter: float = 0.25
    seed: int = 2024
    # None -> resolution convention; desk sets override for tractable priors
    reference_ipc: int | None = None


_PALETTE = np.array([
    [0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.25, 0.35, 0.9], [0.9, 0.8, 0.2],
    [0.8, 0.3, 0.8], [0.2, 0.8, 0.8], [0.95, 0.55, 0.15], [0.55, 0.35, 0.2],
    [0.6, 0.9, 0.4], [0.5, 0.5, 0.95], [0.85, 0.4, 0.55], [0.35, 0.6, 0.5],
])


def _render_sample(rng: np.random.Generator, cls: int, params: ToyParams) -> np.ndarray:
    """One sample whose class signature is flip-invariant: a distinct color,
    a ring frequency, and a vertical-stripe frequency (all survive mirroring,
    matching the augmentation assumptions of natural image classes)."""
    h, w = params.resolution
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")

    ring_freq = 1.5 + (cls % 5) * 0.9 + rng.normal(0, 0.08)
    stripe_freq = 2.0 + (cls % 3) * 1.4 + rng.normal(0, 0.08)
    ring_phase = rng.uniform(0, 2 * math.pi)
    stripe_phase = rng.uniform(0, 2 * math.pi)

    cx, cy = rng.uniform(-0.4, 0.4, size=2)
    r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    rings = np.sin(ring_freq * math.pi * r + ring_phase)
    stripes = np.sin(stripe_freq * math.pi * yy + stripe_phase)

    radius = rng.uniform(0.25, 0.45)
    blob = np.exp(-(r ** 2) / (2 * radius ** 2))

    color = _PALETTE[cls % len(_PALETTE)].copy()
    color += rng.normal(0, params.color_jitter, size=3)
    color = np.clip(color, 0.05, 0.95)

    base = 0.45 + 0.1 * rng.normal()
    img = np.empty((3, h, w), dtype=np.float64)
    for c in range(3):
        img[c] = (base
                  + params.grating_strength * 0.22 * (rings + 0.7 * stripes)
                  * (0.4 + color[c])
                  + params.blob_strength * 0.5 * blob * (color[c] - 0.5))
    img += rng.normal(0, params.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _render_split(params: ToyParams, per_class: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    images = np.empty((params.num_classes * per_class, 3, *params.resolution),
                      dtype=np.uint8)
    labels = np.empty(params.num_classes * per_class, dtype=np.int64)
    i = 0
    for cls in range(params.num_classes):
        for _ in range(per_class):
            img = _render_sample(rng, cls, params)
            images[i] = np.round(img * 255.0).astype(np.uint8)
            labels[i] = cls
            i += 1
    # store shuffled so contiguous slices are class-mixed, like shipped datasets
    perm = rng.permutation(len(labels))
    return images[perm], labels[perm]


DATASET_PRESETS: dict[str, ToyParams] = {
    # Small, easy set for unit tests (overfit checks, oracles).
    "toy10": ToyParams(train_per_class=40, test_per_class=20, noise_sigma=0.10,
                       seed=7, reference_ipc=2),
    # The CIFAR-10-like desk set used by the acceptance pipeline: harder,
    # larger, same 10-class 32x32 shape.
    "cifar10like": ToyParams(train_per_class=200, test_per_class=100,
                             noise_sigma=0.22, color_jitter=0.35, seed=2024,
                             reference_ipc=3),
}


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def data_root(override=None) -> str:
    if override is not None:
        return str(override)
    return os.environ.get("COMMITTEE_DISTILL_DATA_ROOT", os.path.join(os.getcwd(), "data"))


def materialize_dataset(dataset_id: str, root=None, params: ToyParams | None = None,
                        reference_ipc: int | None = None) -> DatasetManifest:
    """Render a bundled dataset to disk (idempotent) and return its manifest."""
    if params is None:
        if dataset_id not in DATASET_PRESETS:
            raise ConfigError(f"unknown dataset_id {dataset_id!r}; "
                              f"bundled: {sorted(DATASET_PRESETS)}")
        params = DATASET_PRESETS[dataset_id]
    root = data_root(root)
    ddir = os.path.join(root, dataset_id)
    manifest_path = os.path.join(ddir, "manifest.json")
    if os.path.exists(manifest_path):
        return load_manifest(manifest_path)

    os.makedirs(ddir, exist_ok=True)
    splits = {}
    train_arrays = None
    for split, per_class, seed_off in (("train", params.train_per_class, 0),
                                       ("test", params.test_per_class, 1)):
        images, labels = _render_split(params, per_class, params.seed + seed_off)
        if split == "train":
            train_arrays = images
        fname = f"{split}.npz"
        fpath = os.path.join(ddir, fname)
        np.savez_compressed(fpath, images=images, labels=labels)
        splits[split] = {"file": fname, "sha256": _sha256_file(fpath),
                         "count": int(labels.shape[0])}

    train_float = train_arrays.astype(np.float64) / 255.0
    mean = train_float.mean(axis=(0, 2, 3))
    std = train_float.std(axis=(0, 2, 3))
    manifest = DatasetManifest(
        dataset_id=dataset_id,
        num_classes=params.num_classes,
        resolution=params.resolution,
        channels=3,
        splits=splits,
        normalization={"mean": [round(float(v), 6) for v in mean],
                       "std": [round(float(v), 6) for v in std]},
        reference_ipc=_pick_reference_ipc(params, reference_ipc),
    )
    with open(manifest_path, "w") as fh:
        fh.write(manifest.to_json())
    return manifest


def _pick_reference_ipc(params: ToyParams, override) -> int:
    if override is not None:
        return override
    if params.reference_ipc is not None:
        return params.reference_ipc
    return default_reference_ipc(params.resolution)


def load_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        return DatasetManifest.from_json(fh.read())


def load_split(manifest: DatasetManifest, split: str, root=None,
               verify: bool = True) -> LabeledDataset:
    """Load a split as normalized float tensors, verifying the file hash."""
    root = data_root(root)
    if split not in manifest.splits:
        raise ConfigError(f"manifest has no split {split!r}")
    entry = manifest.splits[split]
    fpath = os.path.join(root, manifest.dataset_id, entry["file"])
    if not os.path.exists(fpath):
        raise ConfigError(f"split file missing: {fpath}")
    if verify and _sha256_file(fpath) != entry["sha256"]:
        raise ConfigError(f"split file hash mismatch: {fpath}")
    with np.load(fpath) as npz:
        images = npz["images"]
        labels = npz["labels"]
    return LabeledDataset(
        images=normalize_images(torch.from_numpy(images), manifest),
        labels=torch.from_numpy(labels),
        manifest=manifest,
        split=split,
    )


def normalize_images(uint8_images: torch.Tensor, manifest: DatasetManifest) -> torch.Tensor:
    mean = torch.tensor(manifest.normalization["mean"], dtype=torch.float32)
    std = torch.tensor(manifest.normalization["std"], dtype=torch.float32)
    x = uint8_images.to(torch.float32) / 255.0
    return (x - mean.view(1, -1, 1, 1)) / std.view(1, -1, 1, 1)


def denormalize_images(images: torch.Tensor, manifest_or_norm) -> torch.Tensor:
    """Back to [0, 1] pixel space, clamped; used only at export time."""
    norm = (manifest_or_norm.normalization
            if isinstance(manifest_or_norm, DatasetManifest) else manifest_or_norm)
    mean = torch.tensor(norm["mean"], dtype=images.dtype)
    std = torch.tensor(norm["std"], dtype=images.dtype)
    x = images * std.view(1, -1, 1, 1) + mean.view(1, -1, 1, 1)
    return x.clamp(0.0, 1.0)


def in_memory_dataset(dataset_id: str = "toy10", params: ToyParams | None = None,
                      reference_ipc: int | None = None):
    """Render train/test splits directly to tensors (no files); for tests."""
    params = params or DATASET_PRESETS[dataset_id]
    train_images, train_labels = _render_split(params, params.train_per_class,
                                               params.seed)
    test_images, test_labels = _render_split(params, params.test_per_class,
                                             params.seed + 1)
    train_float = train_images.astype(np.float64) / 255.0
    manifest = DatasetManifest(
        dataset_id=dataset_id,
        num_classes=params.num_classes,
        resolution=params.resolution,
        channels=3,
        splits={"train": {"file": "<memory>", "sha256": "", "count": len(train_labels)},
                "test": {"file": "<memory>", "sha256": "", "count": len(test_labels)}},
        normalization={"mean": [round(float(v), 6)
                                for v in train_float.mean(axis=(0, 2, 3))],
                       "std": [round(float(v), 6)
                               for v in train_float.std(axis=(0, 2, 3))]},
        reference_ipc=_pick_reference_ipc(params, reference_ipc),
    )
    train = LabeledDataset(normalize_images(torch.from_numpy(train_images), manifest),
                           torch.from_numpy(train_labels), manifest, "train")
    test = LabeledDataset(normalize_images(torch.from_numpy(test_images), manifest),
                          torch.from_numpy(test_labels), manifest, "test")
    return train, test
