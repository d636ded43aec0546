"""Post-evaluation: train a fresh student on the distilled set with teacher
soft labels (temperature-scaled KL divergence), CutMix, small batches, and the
smoothed cosine learning-rate schedule."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .augment import AugmentFlags, augment_batch
from .data import LabeledDataset
from .errors import (
    ConfigError,
    DegenerateBatch,
    EmptyDataset,
    ShapeError,
    TrainingDiverged,
)
from .model_zoo import BackboneSpec, build_backbone
from .recover import SyntheticSet
from .schedules import cosine_lr
from .softlabel import SoftLabelConfig, bssl_labels, running_labels
from .squeeze import evaluate

LABEL_MODES = ("batch-specific", "running")


@dataclass(frozen=True)
class PostEvalConfig:
    student_arch: str = "tiny_cnn"
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 300
    scheduler_cycles: int = 1  # the schedule's cycle parameter
    min_lr: float = 0.0
    augmentation: AugmentFlags = field(default_factory=lambda: AugmentFlags(cutmix=True))
    cutmix_beta: float = 1.0
    kd_temperature: float = 1.0
    label_mode: str = "batch-specific"
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.kd_temperature <= 0:
            raise ConfigError(f"kd_temperature must be > 0, "
                              f"got {self.kd_temperature}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}, "
                              f"got {self.label_mode!r}")
        if self.scheduler_cycles not in (1, 2):
            raise ConfigError(f"scheduler_cycles must be 1 or 2, "
                              f"got {self.scheduler_cycles}")


def effective_batch_size(cfg: PostEvalConfig, images_per_class: int) -> int:
    # appendix rule: batch 16, dropping to 10 for very small per-class budgets
    if images_per_class <= 16 and cfg.batch_size == 16:
        return 10
    return cfg.batch_size


@dataclass
class EpochStats:
    epoch: int
    train_top1: float
    test_top1: float
    mean_loss: float
    lr: float


@dataclass
class TrainingTrace:
    per_epoch: list[EpochStats] = field(default_factory=list)
    batch_order_digest: str = ""

    def epochs(self):
        return [row.epoch for row in self.per_epoch]

    def column(self, name):
        return [getattr(row, name) for row in self.per_epoch]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_top1", "test_top1", "mean_loss", "lr"])
            for row in self.per_epoch:
                writer.writerow([row.epoch, row.train_top1, row.test_top1,
                                 row.mean_loss, row.lr])

    @classmethod
    def from_csv(cls, path) -> "TrainingTrace":
        trace = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                trace.per_epoch.append(EpochStats(
                    epoch=int(rec["epoch"]), train_top1=float(rec["train_top1"]),
                    test_top1=float(rec["test_top1"]),
                    mean_loss=float(rec["mean_loss"]), lr=float(rec["lr"])))
        return trace


def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
            temperature: float = 1.0) -> torch.Tensor:
    """Batch-mean KL(teacher || student) at temperature tau, scaled by tau^2."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"logit shape mismatch: {tuple(student_logits.shape)} "
                         f"vs {tuple(teacher_logits.shape)}")
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    t = temperature
    log_p_student = F.log_softmax(student_logits / t, dim=1)
    p_teacher = F.softmax(teacher_logits / t, dim=1)
    return F.kl_div(log_p_student, p_teacher, reduction="batchmean") * (t * t)


@dataclass
class CutMixLabels:
    primary: torch.Tensor
    partner: torch.Tensor
    lam: float
    box: tuple[int, int, int, int]  # (top, bottom, left, right), half-open
    perm: np.ndarray


def cutmix(images: torch.Tensor, hard_labels: torch.Tensor,
           rng: np.random.Generator, beta_param: float = 1.0):
    """Standard CutMix; lambda is recomputed from the exact pasted pixel count.

    Teacher labels are generated on the mixed images downstream, so only the
    hard-label bookkeeping needs the (lambda, partner) pair returned here.
    """
    n, _, h, w = images.shape
    if n < 2:
        raise DegenerateBatch("cutmix needs a batch of >= 2")
    lam = float(rng.beta(beta_param, beta_param))
    perm = rng.permutation(n)
    cut_ratio = math.sqrt(1.0 - lam)
    cut_h, cut_w = int(h * cut_ratio), int(w * cut_ratio)
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    top = max(cy - cut_h // 2, 0)
    bottom = min(cy + (cut_h + 1) // 2, h)
    left = max(cx - cut_w // 2, 0)
    right = min(cx + (cut_w + 1) // 2, w)

    mixed = images.clone()
    if bottom > top and right > left:
        mixed[:, :, top:bottom, left:right] = \
            images[perm][:, :, top:bottom, left:right]
    pasted = (bottom - top) * (right - left)
    lam_exact = 1.0 - pasted / (h * w)
    return mixed, CutMixLabels(primary=hard_labels,
                               partner=hard_labels[torch.from_numpy(perm)],
                               lam=lam_exact, box=(top, bottom, left, right),
                               perm=perm)


def train_student(distilled: SyntheticSet, teacher, test_set: LabeledDataset,
                  cfg: PostEvalConfig,
                  student_spec: BackboneSpec | None = None):
    """Train a fresh student on the distilled set; returns (test_top1, trace).

    Each batch is augmented, CutMixed, then labeled by the teacher under the
    configured label mode; the student takes one KD step per batch. The lr is
    held per epoch and replays the cosine schedule exactly. RNG streams for
    batch order, augmentation, and CutMix are separate, so switching the label
    mode leaves every other random draw unchanged.
    """
    cfg.validate()
    if len(distilled) == 0:
        raise EmptyDataset("distilled set is empty")

    if student_spec is None:
        student_spec = BackboneSpec(
            arch_id=cfg.student_arch,
            num_classes=distilled.num_classes,
            input_resolution=tuple(distilled.images.shape[-2:]),
            channels=distilled.images.shape[1])
    student = build_backbone(student_spec, seed=cfg.seed * 31 + 7)
    opt = torch.optim.AdamW(student.parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    label_cfg = SoftLabelConfig(mode=cfg.label_mode)

    n = len(distilled)
    batch = effective_batch_size(cfg, distilled.ipc)
    order_gen = torch.Generator().manual_seed(cfg.seed * 7919 + 3)
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 23]))
    cut_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 29]))

    order_hash = hashlib.sha256()
    trace = TrainingTrace()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.learning_rate, cfg.min_lr,
                       cfg.scheduler_cycles)
        for group in opt.param_groups:
            group["lr"] = lr
        perm = torch.randperm(n, generator=order_gen)
        order_hash.update(perm.numpy().tobytes())
        student.train()
        epoch_loss = 0.0
        batches = 0
        hits = 0.0
        seen = 0
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            x = distilled.images[idx]
            y = distilled.labels[idx]
            if cfg.augmentation.any_geometric:
                x = augment_batch(x, cfg.augmentation, aug_rng)
            mix = None
            if cfg.augmentation.cutmix and x.shape[0] >= 2:
                x, mix = cutmix(x, y, cut_rng, cfg.cutmix_beta)
            if cfg.label_mode == "batch-specific":
                soft = bssl_labels(teacher, x, label_cfg)
            else:
                soft = running_labels(teacher, x)
            logits = student(x)
            loss = kd_loss(logits, soft.logits, cfg.kd_temperature)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"KD loss non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
            # hard-label accuracy on the augmented stream; CutMix batches
            # score lam toward the primary labels and (1-lam) to the partner
            pred = logits.detach().argmax(dim=1)
            if mix is not None:
                batch_hits = (mix.lam * (pred == mix.primary).float().sum()
                              + (1 - mix.lam) * (pred == mix.partner).float().sum())
            else:
                batch_hits = (pred == y).float().sum()
            hits += float(batch_hits)
            seen += x.shape[0]
        trace.per_epoch.append(EpochStats(
            epoch=epoch,
            train_top1=100.0 * hits / seen,
            test_top1=evaluate(student, test_set),
            mean_loss=epoch_loss / batches,
            lr=lr))
    trace.batch_order_digest = order_hash.hexdigest()
    return trace.per_epoch[-1].test_top1, trace
