"""The synthesis engine: initializes synthetic images, applies recovery-time
augmentation, runs the per-IPC-round pixel optimization under the weighted
committee loss, and schedules committee switches per IPC round.

One IPC round synthesizes one image per class. The committee subset and its
weight vector are sampled once per round and recorded in provenance; rounds
are independent, which is what makes different rounds use different backbones.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .augment import AugmentFlags, augment_batch, crop_and_resize, sample_crop_boxes
from .data import DatasetManifest, LabeledDataset, denormalize_images
from .errors import (
    ConfigError,
    InsufficientData,
    MissingPrior,
    SynthesisDiverged,
)
from .model_zoo import config_digest
from .prior import PriorTable, lookup_alpha
from .schedules import cosine_lr
from .voting import VotingConfig, committee_loss, ppg_weights, sample_committee

SYNTHETIC_FORMAT_VERSION = 1
INIT_MODES = ("real-patch", "gaussian-noise")


@dataclass(frozen=True)
class RecoverConfig:
    iterations: int = 4000
    learning_rate: float = 0.1
    betas: tuple[float, float] = (0.5, 0.9)
    epsilon: float = 1e-8
    batch_size: int = 100
    init_mode: str = "real-patch"
    augmentation: AugmentFlags = field(default_factory=AugmentFlags)
    lambda_bn: float = 0.01
    voting: VotingConfig = field(default_factory=VotingConfig)
    scheduler: str = "cosine"
    subset_resample: str = "per-round"  # per-round | per-iteration (ablation)
    init_crop_scale: tuple[float, float] = (0.5, 1.0)
    seed: int = 0

    @classmethod
    def for_dataset(cls, manifest: DatasetManifest, **overrides) -> "RecoverConfig":
        batch = 100 if manifest.num_classes >= 100 else 10
        return cls(batch_size=batch, **overrides)

    def validate(self, committee_size: int | None = None):
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, "
                              f"got {self.init_mode!r}")
        if self.subset_resample not in ("per-round", "per-iteration"):
            raise ConfigError(
                f"subset_resample must be per-round or per-iteration, "
                f"got {self.subset_resample!r}")
        if committee_size is not None and committee_size > 1:
            self.voting.validate(committee_size)


@dataclass
class RoundProvenance:
    ipc_round: int
    subsets: list[list[str]]  # one entry per round (or per iteration in ablation)
    weights: list[list[float]]
    seed: int
    config_digest: str
    loss_trace: list[float] = field(default_factory=list)
    member_rows: list[tuple] = field(default_factory=list)  # (iter, arch, ce, bn, w, total)
    timing: list[dict] = field(default_factory=list)
    init_records: list[dict] = field(default_factory=list)

    def to_dict(self):
        return {
            "ipc_round": self.ipc_round,
            "subsets": self.subsets,
            "weights": self.weights,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "loss_trace": self.loss_trace,
            "init_records": self.init_records,
        }


@dataclass
class SyntheticSet:
    images: torch.Tensor
    labels: torch.Tensor
    ipc: int
    provenance: list[RoundProvenance]
    dataset_id: str = ""
    normalization: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self):
        return int(self.labels.max().item()) + 1 if len(self) else 0


def _child_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def init_synthetic(dataset: LabeledDataset, ipc: int, mode: str,
                   resolution: tuple[int, int], seed: int,
                   crop_scale=(0.5, 1.0)) -> SyntheticSet:
    """Build the initial synthetic slab, one image per (round, class) slot.

    Image ``r * C + c`` is the round-r slot for class c. Gaussian mode draws
    i.i.d. standard-normal pixels in normalized space; real-patch mode takes a
    random resized crop of a randomly chosen same-class source image and logs
    the pick so the crop can be replayed.
    """
    if ipc < 1:
        raise ConfigError(f"ipc must be >= 1, got {ipc}")
    if mode not in INIT_MODES:
        raise ConfigError(f"init mode must be one of {INIT_MODES}, got {mode!r}")
    num_classes = dataset.num_classes
    channels = dataset.images.shape[1]
    h, w = resolution
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    labels = torch.arange(num_classes).repeat(ipc)
    init_records = []

    if mode == "gaussian-noise":
        images = torch.from_numpy(
            rng.standard_normal((ipc * num_classes, channels, h, w))
        ).to(torch.float32)
    else:
        images = torch.empty(ipc * num_classes, channels, h, w)
        for cls in range(num_classes):
            pool = dataset.class_indices(cls)
            if len(pool) < ipc:
                raise InsufficientData(
                    f"class {cls} has {len(pool)} images, needs >= {ipc}")
            picks = rng.choice(pool, size=ipc, replace=False)
            for r, src_idx in enumerate(picks):
                src = dataset.images[int(src_idx)]
                box = sample_crop_boxes(rng, 1, src.shape[1], src.shape[2],
                                        scale=crop_scale)[0]
                patch = crop_and_resize(src.unsqueeze(0), box[None], (h, w))[0]
                images[r * num_classes + cls] = patch
                init_records.append({
                    "class": cls, "ipc_round": r, "source_index": int(src_idx),
                    "box": [int(v) for v in box],
                })

    prov = RoundProvenance(
        ipc_round=-1, subsets=[], weights=[], seed=seed,
        config_digest=config_digest({"init_mode": mode, "ipc": ipc, "seed": seed}),
        init_records=init_records)
    return SyntheticSet(images=images, labels=labels, ipc=ipc, provenance=[prov],
                        dataset_id=dataset.dataset_id,
                        normalization=dict(dataset.manifest.normalization))


def augment_for_recovery(batch: torch.Tensor, flags: AugmentFlags,
                         rng: np.random.Generator) -> torch.Tensor:
    """Differentiable random resized crop + horizontal flip for synthesis."""
    if not flags.any_geometric:
        return batch
    return augment_batch(batch, flags, rng)


def _round_weights(committee, prior_table, subset, cfg: RecoverConfig,
                   weights_seed: int):
    arch_ids = [committee[i].arch_id for i in subset]
    voting = cfg.voting
    if len(subset) == 1:
        return [(arch_ids[0], 1.0)]
    if voting.voter_mode == "prior":
        if prior_table is None:
            raise MissingPrior("prior voter mode needs a PriorTable")
        alphas = [lookup_alpha(prior_table, a) for a in arch_ids]
    else:
        alphas = [0.0] * len(arch_ids)
    wv = ppg_weights(alphas, voting.temperature, voting.voter_mode,
                     seed=weights_seed, arch_ids=arch_ids)
    return list(wv.pairs)


def synthesize_ipc_round(committee, prior_table: PriorTable | None,
                         targets: torch.Tensor, init: torch.Tensor,
                         cfg: RecoverConfig, ipc_round: int):
    """Optimize one round's slab under a fixed committee subset and weights.

    Returns (images, RoundProvenance). Classes are chunked by cfg.batch_size;
    chunks share the round's subset and weights but own their optimizer and
    augmentation stream.
    """
    cfg.validate(len(committee))
    round_ss = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(ipc_round,))
    n_chunks = (init.shape[0] + cfg.batch_size - 1) // cfg.batch_size
    children = round_ss.spawn(2 + n_chunks)
    subset_seed = _child_seed(children[0])
    weights_seed = _child_seed(children[1])

    if len(committee) == 1:
        subset = [0]
    else:
        subset = sample_committee(len(committee),
                                  cfg.voting.with_seed(subset_seed))
    pairs = _round_weights(committee, prior_table, subset, cfg, weights_seed)
    members = [(committee[i], w) for i, (_, w) in zip(subset, pairs)]

    prov = RoundProvenance(
        ipc_round=ipc_round,
        subsets=[[a for a, _ in pairs]],
        weights=[[w for _, w in pairs]],
        seed=cfg.seed,
        config_digest=config_digest(_config_dict(cfg)),
    )

    out = torch.empty_like(init)
    per_iter_totals = [0.0] * cfg.iterations
    for chunk_idx in range(n_chunks):
        lo = chunk_idx * cfg.batch_size
        hi = min(lo + cfg.batch_size, init.shape[0])
        x = init[lo:hi].detach().clone().requires_grad_(True)
        y = targets[lo:hi]
        aug_rng = np.random.default_rng(children[2 + chunk_idx])
        opt = torch.optim.Adam([x], lr=cfg.learning_rate, betas=cfg.betas,
                               eps=cfg.epsilon)
        marks = [time.perf_counter() * 1000.0]
        iter_members = members
        for it in range(cfg.iterations):
            if cfg.subset_resample == "per-iteration" and len(committee) > 1:
                it_seed = _child_seed(np.random.SeedSequence(
                    entropy=subset_seed, spawn_key=(it,)))
                it_subset = sample_committee(len(committee),
                                             cfg.voting.with_seed(it_seed))
                it_pairs = _round_weights(committee, prior_table, it_subset, cfg,
                                          weights_seed)
                iter_members = [(committee[i], w)
                                for i, (_, w) in zip(it_subset, it_pairs)]
                if chunk_idx == 0:
                    prov.subsets.append([a for a, _ in it_pairs])
                    prov.weights.append([w for _, w in it_pairs])
            lr = cosine_lr(it, cfg.iterations, cfg.learning_rate) \
                if cfg.scheduler == "cosine" else cfg.learning_rate
            for group in opt.param_groups:
                group["lr"] = lr
            x_aug = augment_for_recovery(x, cfg.augmentation, aug_rng)
            breakdown = committee_loss(iter_members, x_aug, y, cfg.lambda_bn)
            if not torch.isfinite(breakdown.total):
                raise SynthesisDiverged(
                    f"non-finite committee loss at iteration {it}", iteration=it)
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()
            marks.append(time.perf_counter() * 1000.0)
            per_iter_totals[it] += breakdown.total_value / n_chunks
            for m in breakdown.per_member:
                prov.member_rows.append(
                    (it, m.arch_id, m.ce, m.bn_align, m.weight,
                     breakdown.total_value))
        prov.timing.append({"marks_ms": marks,
                            "images_per_iteration": hi - lo})
        out[lo:hi] = x.detach()

    if not torch.isfinite(out).all():
        raise SynthesisDiverged("synthesized pixels are non-finite",
                                iteration=cfg.iterations)
    prov.loss_trace = per_iter_totals
    return out, prov


def distill(dataset: LabeledDataset, committee, prior_table: PriorTable | None,
            ipc: int, cfg: RecoverConfig) -> SyntheticSet:
    """Run all IPC rounds and assemble the distilled set with provenance."""
    committee = list(committee)
    if not committee:
        raise ConfigError("committee is empty")
    cfg.validate(len(committee))
    if (cfg.voting.voter_mode == "prior" and len(committee) > 1
            and (prior_table is None
                 or not prior_table.covers(t.arch_id for t in committee))):
        raise MissingPrior("prior voter mode needs prior entries for every "
                           "committee member")

    resolution = dataset.manifest.resolution
    init_set = init_synthetic(dataset, ipc, cfg.init_mode, resolution,
                              seed=cfg.seed, crop_scale=cfg.init_crop_scale)
    num_classes = dataset.num_classes
    targets = torch.arange(num_classes)
    images = torch.empty_like(init_set.images)
    provenance = list(init_set.provenance)
    for r in range(ipc):
        slab = init_set.images[r * num_classes:(r + 1) * num_classes]
        out, prov = synthesize_ipc_round(committee, prior_table, targets, slab,
                                         cfg, ipc_round=r)
        images[r * num_classes:(r + 1) * num_classes] = out
        provenance.append(prov)
    return SyntheticSet(images=images, labels=init_set.labels, ipc=ipc,
                        provenance=provenance, dataset_id=dataset.dataset_id,
                        normalization=init_set.normalization)


def _config_dict(cfg: RecoverConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d


# ---------------------------------------------------------------------------
# export / load
# ---------------------------------------------------------------------------

def export_synthetic_set(sset: SyntheticSet, out_dir) -> str:
    """One PNG per sample under <class>/<ipc_index>.png plus manifest + raw npz."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    num_classes = sset.num_classes
    for i in range(len(sset)):
        cls = int(sset.labels[i])
        ipc_index = i // num_classes
        cdir = os.path.join(out_dir, f"{cls:04d}")
        os.makedirs(cdir, exist_ok=True)
        pixels = denormalize_images(sset.images[i:i + 1], sset.normalization)[0]
        arr = (pixels.numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(cdir, f"{ipc_index:04d}.png"))

    np.savez_compressed(os.path.join(out_dir, "images.npz"),
                        images=sset.images.numpy(),
                        labels=sset.labels.numpy())
    manifest = {
        "format_version": SYNTHETIC_FORMAT_VERSION,
        "dataset_id": sset.dataset_id,
        "ipc": sset.ipc,
        "count": len(sset),
        "labels": [int(v) for v in sset.labels],
        "normalization": sset.normalization,
        "provenance": [p.to_dict() for p in sset.provenance],
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def load_synthetic_set(out_dir) -> SyntheticSet:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != SYNTHETIC_FORMAT_VERSION:
        raise ConfigError("unsupported synthetic-set format_version")
    with np.load(os.path.join(out_dir, "images.npz")) as npz:
        images = torch.from_numpy(npz["images"])
        labels = torch.from_numpy(npz["labels"])
    provenance = [
        RoundProvenance(
            ipc_round=p["ipc_round"], subsets=p["subsets"], weights=p["weights"],
            seed=p["seed"], config_digest=p["config_digest"],
            loss_trace=p.get("loss_trace", []),
            init_records=p.get("init_records", []))
        for p in manifest["provenance"]
    ]
    return SyntheticSet(images=images, labels=labels, ipc=manifest["ipc"],
                        provenance=provenance, dataset_id=manifest["dataset_id"],
                        normalization=manifest["normalization"])
