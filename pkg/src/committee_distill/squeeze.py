"""Teacher pre-training on the original dataset with cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .augment import AugmentFlags, augment_batch
from .data import LabeledDataset
from .errors import ConfigError, EmptyDataset, LabelError, TrainingDiverged
from .model_zoo import (
    BackboneSpec,
    build_backbone,
    config_digest,
    freeze,
)
from .schedules import cosine_lr


@dataclass(frozen=True)
class SqueezeConfig:
    optimizer_kind: str = "adam"  # adam | sgd
    learning_rate: float = 1e-3
    momentum_or_betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    scheduler: str = "cosine"  # cosine | none
    augmentation: AugmentFlags = field(default_factory=AugmentFlags)
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer_kind not in ("adam", "sgd"):
            raise ConfigError(f"optimizer_kind must be adam or sgd, "
                              f"got {self.optimizer_kind!r}")
        if self.scheduler not in ("cosine", "none"):
            raise ConfigError(f"scheduler must be cosine or none, "
                              f"got {self.scheduler!r}")


# Per-dataset presets; the appendix-style CIFAR recipe (Adam, lr 1e-3,
# wd 1e-4, cosine, crop+flip) scaled to desk budgets (epochs / 4).
SQUEEZE_PRESETS: dict[str, SqueezeConfig] = {
    "toy10": SqueezeConfig(epochs=30, batch_size=64),
    "cifar10like": SqueezeConfig(epochs=50, batch_size=128),
}


def squeeze_preset(dataset_id: str) -> SqueezeConfig:
    if dataset_id not in SQUEEZE_PRESETS:
        return SqueezeConfig()
    return SQUEEZE_PRESETS[dataset_id]


@dataclass
class TrainedTeacher:
    model: object
    dataset_id: str
    train_accuracy: float
    test_accuracy: float | None
    config_digest: str
    loss_history: list[float] = field(default_factory=list)

    @property
    def arch_id(self) -> str:
        return self.model.spec.arch_id


def _make_optimizer(model, cfg: SqueezeConfig):
    if cfg.optimizer_kind == "adam":
        betas = tuple(cfg.momentum_or_betas) if len(cfg.momentum_or_betas) == 2 \
            else (0.9, 0.999)
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                betas=betas, weight_decay=cfg.weight_decay)
    momentum = cfg.momentum_or_betas[0] if cfg.momentum_or_betas else 0.9
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                           momentum=momentum, weight_decay=cfg.weight_decay)


def pretrain(spec: BackboneSpec, dataset: LabeledDataset, cfg: SqueezeConfig,
             test_set: LabeledDataset | None = None) -> TrainedTeacher:
    """Train a backbone on ``dataset`` and return it frozen, with accuracies."""
    cfg.validate()
    labels = dataset.labels
    if labels.min().item() < 0 or labels.max().item() >= spec.num_classes:
        raise LabelError(f"dataset labels outside [0, {spec.num_classes})")

    model = build_backbone(spec, cfg.seed)
    opt = _make_optimizer(model, cfg)
    n = len(dataset)
    order_gen = torch.Generator().manual_seed(cfg.seed * 9973 + 1)
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))

    loss_history = []
    model.train()
    for epoch in range(cfg.epochs):
        if cfg.scheduler == "cosine":
            lr = cosine_lr(epoch, cfg.epochs, cfg.learning_rate)
            for group in opt.param_groups:
                group["lr"] = lr
        perm = torch.randperm(n, generator=order_gen)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = dataset.images[idx]
            y = dataset.labels[idx]
            if cfg.augmentation.any_geometric:
                x = augment_batch(x, cfg.augmentation, aug_rng)
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"cross-entropy became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        loss_history.append(epoch_loss / batches)

    freeze(model)
    train_acc = evaluate(model, dataset)
    test_acc = evaluate(model, test_set) if test_set is not None else None
    digest = config_digest({
        "spec": spec.__dict__ | {"input_resolution": list(spec.input_resolution)},
        "squeeze": {k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in cfg.__dict__.items() if k != "augmentation"},
        "augmentation": cfg.augmentation.__dict__,
        "train_split": dataset.digest(),
    })
    return TrainedTeacher(model=model, dataset_id=dataset.dataset_id,
                          train_accuracy=train_acc, test_accuracy=test_acc,
                          config_digest=digest, loss_history=loss_history)


def evaluate(model, dataset: LabeledDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent with BN in running-statistics mode."""
    if dataset is None or len(dataset) == 0:
        raise EmptyDataset("evaluate needs a nonempty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            pred = model(x).argmax(dim=1)
            correct += (pred == y).sum().item()
    model.train(was_training)
    return 100.0 * correct / len(dataset)
