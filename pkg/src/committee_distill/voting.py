"""Committee subset sampling, prior-performance-guided weights, and the
weighted recovery loss that drives image synthesis.

A member's recovery loss is cross-entropy against the synthetic slot labels
plus a batch-norm alignment term: the squared L2 distance between the batch
statistics the synthetic images induce and the teacher's running statistics,
summed over layers. The committee loss is the weight-weighted sum of member
losses; gradients flow only into the pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch.nn import functional as F

from .errors import InvalidScore, InvalidSubsetSize, ShapeError
from .model_zoo import bn_override

DEFAULT_TEMPERATURE = 4.0
DEFAULT_LAMBDA_BN = 0.01

VOTER_MODES = ("prior", "equal", "random")


@dataclass(frozen=True)
class VotingConfig:
    subset_size: int = 2  # N in the committee-subset draw
    temperature: float = DEFAULT_TEMPERATURE
    voter_mode: str = "prior"
    seed: int = 0

    def validate(self, committee_size: int | None = None):
        if self.subset_size < 2:
            raise InvalidSubsetSize(
                f"subset size must be >= 2, got {self.subset_size}")
        if committee_size is not None and self.subset_size > committee_size:
            raise InvalidSubsetSize(
                f"subset size {self.subset_size} exceeds committee size "
                f"{committee_size}")
        if self.temperature <= 0:
            raise InvalidScore(f"temperature must be > 0, got {self.temperature}")
        if self.voter_mode not in VOTER_MODES:
            raise InvalidScore(f"voter_mode must be one of {VOTER_MODES}, "
                               f"got {self.voter_mode!r}")

    def with_seed(self, seed: int) -> "VotingConfig":
        return replace(self, seed=seed)


@dataclass
class WeightVector:
    pairs: list[tuple[str, float]]

    def __post_init__(self):
        total = sum(w for _, w in self.pairs)
        if abs(total - 1.0) > 1e-9:
            raise InvalidScore(f"weights must sum to 1 within 1e-9, got {total!r}")

    @property
    def weights(self):
        return [w for _, w in self.pairs]

    @property
    def arch_ids(self):
        return [a for a, _ in self.pairs]


@dataclass
class MemberLoss:
    arch_id: str
    ce: float
    bn_align: float
    weight: float
    weighted: float
    loss: torch.Tensor | None = None  # differentiable composite, pre-weight


@dataclass
class LossBreakdown:
    total: torch.Tensor  # 0-dim, differentiable
    per_member: list[MemberLoss]
    lambda_bn: float

    @property
    def total_value(self) -> float:
        return float(self.total.detach())


def sample_committee(committee_size: int, cfg: VotingConfig) -> list[int]:
    """Draw N distinct indices uniformly without replacement (seeded)."""
    cfg.validate(committee_size)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    idx = rng.choice(committee_size, size=cfg.subset_size, replace=False)
    return sorted(int(i) for i in idx)


def ppg_weights(alphas, temperature: float = DEFAULT_TEMPERATURE,
                voter_mode: str = "prior", seed: int = 0,
                arch_ids=None) -> WeightVector:
    """Softmax-over-prior weights (or the uniform / random-simplex ablations)."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise InvalidScore("alphas must be nonempty")
    if any(not math.isfinite(a) for a in alphas):
        raise InvalidScore(f"non-finite prior score in {alphas}")
    if temperature <= 0:
        raise InvalidScore(f"temperature must be > 0, got {temperature}")
    if voter_mode not in VOTER_MODES:
        raise InvalidScore(f"unknown voter_mode {voter_mode!r}")
    n = len(alphas)
    if arch_ids is None:
        arch_ids = [str(i) for i in range(n)]

    if voter_mode == "equal":
        w = np.full(n, 1.0 / n)
    elif voter_mode == "random":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        w = rng.dirichlet(np.ones(n))
    else:
        a = np.asarray(alphas, dtype=np.float64)
        z = (a - a.max()) / temperature
        e = np.exp(z)
        w = e / e.sum()
    w = w / w.sum()
    return WeightVector(pairs=[(aid, float(wi)) for aid, wi in zip(arch_ids, w)])


def _unwrap(teacher):
    return teacher.model if hasattr(teacher, "model") else teacher


def recover_loss(teacher, images: torch.Tensor, labels: torch.Tensor,
                 lambda_bn: float = DEFAULT_LAMBDA_BN,
                 weight: float = 1.0) -> MemberLoss:
    """One member's composite loss: ce + lambda_bn * bn_align.

    The forward pass normalizes with the batch's own statistics (running
    buffers frozen); those captured statistics are then aligned to the running
    statistics with squared L2 per layer, summed over layers.
    """
    model = _unwrap(teacher)
    if images.dim() != 4:
        raise ShapeError(f"expected NCHW synthetic batch, got {tuple(images.shape)}")
    if images.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"batch/label mismatch: {images.shape[0]} vs {labels.shape[0]}")
    sink = []
    with bn_override(model, stats_mode="batch", freeze_running=True,
                     capture_sink=sink):
        logits = model(images)
    ce = F.cross_entropy(logits, labels)
    bn_align = images.new_zeros(())
    for mod, mean, var in sink:
        bn_align = bn_align + ((mean - mod.running_mean) ** 2).sum() \
            + ((var - mod.running_var) ** 2).sum()
    loss = ce + lambda_bn * bn_align
    arch = getattr(getattr(model, "spec", None), "arch_id", "model")
    return MemberLoss(arch_id=arch, ce=float(ce.detach()),
                      bn_align=float(bn_align.detach()), weight=weight,
                      weighted=float(weight * loss.detach()), loss=loss)


def committee_loss(members, images: torch.Tensor, labels: torch.Tensor,
                   lambda_bn: float = DEFAULT_LAMBDA_BN) -> LossBreakdown:
    """Weight-weighted sum of member recovery losses.

    ``members`` is a list of (teacher, weight) pairs whose weights sum to 1.
    """
    members = list(members)
    if not members:
        raise InvalidSubsetSize("committee_loss needs at least one member")
    total_w = sum(w for _, w in members)
    if abs(total_w - 1.0) > 1e-6:
        raise InvalidScore(f"member weights must sum to 1, got {total_w!r}")
    total = images.new_zeros(())
    entries = []
    for teacher, w in members:
        entry = recover_loss(teacher, images, labels, lambda_bn, weight=w)
        total = total + w * entry.loss
        entries.append(entry)
    return LossBreakdown(total=total, per_member=entries, lambda_bn=lambda_bn)
