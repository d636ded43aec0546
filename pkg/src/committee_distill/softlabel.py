"""Teacher soft labels with batch-specific normalization, plus the
running-statistics baseline and the raw batch/running statistic arithmetic.

Batch-specific labeling recomputes every BN layer's statistics from the batch
being labeled, so a sample's label depends on the composition of its batch.
Labels are raw logits; the KD loss applies its own temperature.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    DegenerateNormalization,
    EmptyBatch,
    InvalidMomentum,
)
from .model_zoo import bn_override, model_digest

DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True)
class SoftLabelConfig:
    mode: str = "batch-specific"  # batch-specific | running
    epsilon: float = DEFAULT_EPSILON
    protect_running_stats: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.mode not in ("batch-specific", "running"):
            raise ValueError(f"mode must be batch-specific or running, "
                             f"got {self.mode!r}")


@dataclass
class SoftLabelBatch:
    logits: torch.Tensor
    batch_digest: str
    teacher_digest: str


def batch_stats(features: torch.Tensor, epsilon: float = DEFAULT_EPSILON):
    """Per-channel batch mean and (biased) variance + epsilon over (N, H, W)."""
    if features.numel() == 0 or features.shape[0] == 0:
        raise EmptyBatch("batch_stats on an empty input")
    if features.dim() != 4:
        features = features.view(features.shape[0], features.shape[1], 1, -1)
    mean = features.mean(dim=(0, 2, 3))
    var = features.var(dim=(0, 2, 3), unbiased=False) + epsilon
    return mean, var


def running_stat_update(running, batch, momentum: float):
    """One exponential update: new = momentum*running + (1-momentum)*batch."""
    if not 0.0 <= momentum <= 1.0:
        raise InvalidMomentum(f"momentum must be in [0, 1], got {momentum}")
    run_mean, run_var = running
    batch_mean, batch_var = batch
    mean = momentum * run_mean + (1.0 - momentum) * batch_mean
    var = momentum * run_var + (1.0 - momentum) * batch_var
    return mean, var


def batch_digest(batch: torch.Tensor) -> str:
    t = batch.detach().cpu().contiguous()
    h = hashlib.sha256()
    h.update(str(t.dtype).encode())
    h.update(str(tuple(t.shape)).encode())
    h.update(t.numpy().tobytes())
    return h.hexdigest()


def _unwrap(teacher):
    return teacher.model if hasattr(teacher, "model") else teacher


def _check_batch(batch: torch.Tensor):
    if batch.numel() == 0 or batch.shape[0] == 0:
        raise EmptyBatch("soft labels need a nonempty batch")
    if batch.shape[0] < 2 and batch.shape[-2] == 1 and batch.shape[-1] == 1:
        raise DegenerateNormalization(
            "single sample with 1x1 spatial maps: variance would be epsilon-only")


def bssl_labels(teacher, batch: torch.Tensor,
                cfg: SoftLabelConfig = SoftLabelConfig()) -> SoftLabelBatch:
    """Logits with every BN layer normalizing by the batch's own statistics.

    Weights and affine BN parameters stay frozen. With
    ``protect_running_stats`` (default) the running buffers are untouched;
    without it they drift with each call, mirroring a plain train-mode toggle.
    """
    model = _unwrap(teacher)
    _check_batch(batch)
    with bn_override(model, stats_mode="batch",
                     freeze_running=cfg.protect_running_stats):
        with torch.no_grad():
            logits = model(batch)
    return SoftLabelBatch(logits=logits, batch_digest=batch_digest(batch),
                          teacher_digest=model_digest(model))


def running_labels(teacher, batch: torch.Tensor) -> SoftLabelBatch:
    """Baseline logits with BN in running-statistics (inference) mode."""
    model = _unwrap(teacher)
    if batch.numel() == 0 or batch.shape[0] == 0:
        raise EmptyBatch("soft labels need a nonempty batch")
    with bn_override(model, stats_mode="running"):
        with torch.no_grad():
            logits = model(batch)
    return SoftLabelBatch(logits=logits, batch_digest=batch_digest(batch),
                          teacher_digest=model_digest(model))


def soft_labels(teacher, batch: torch.Tensor, cfg: SoftLabelConfig) -> SoftLabelBatch:
    if cfg.mode == "batch-specific":
        return bssl_labels(teacher, batch, cfg)
    return running_labels(teacher, batch)


class LabelCache:
    """Optional cache keyed by (teacher_digest, batch_digest) for audits."""

    def __init__(self):
        self._entries: dict[tuple[str, str], torch.Tensor] = {}

    def __len__(self):
        return len(self._entries)

    def get(self, teacher_digest: str, bdigest: str):
        return self._entries.get((teacher_digest, bdigest))

    def put(self, labels: SoftLabelBatch):
        self._entries[(labels.teacher_digest, labels.batch_digest)] = \
            labels.logits.detach().clone()

    def save(self, path):
        keys = [json.dumps(k) for k in self._entries]
        arrays = {f"logits_{i}": v.numpy() for i, v in enumerate(self._entries.values())}
        np.savez_compressed(path, keys=np.array(keys), **arrays)

    @classmethod
    def load(cls, path) -> "LabelCache":
        cache = cls()
        if not os.path.exists(path):
            return cache
        with np.load(path, allow_pickle=False) as npz:
            keys = [tuple(json.loads(k)) for k in npz["keys"]]
            for i, key in enumerate(keys):
                cache._entries[key] = torch.from_numpy(npz[f"logits_{i}"])
        return cache
