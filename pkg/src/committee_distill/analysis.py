"""Diagnostics: intra-class embedding similarity, feature-level discrepancy
between synthetic-batch and running BN statistics, accuracy curves, and
relative per-iteration timing."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import AlignmentError, EmptyBatch, IncompleteLog, InsufficientSamples
from .model_zoo import capture_batch_stats, read_running_stats
from .recover import SyntheticSet


@dataclass
class DiversityReport:
    per_class: dict[int, float]
    overall_mean: float
    embed_arch: str


@dataclass
class BNDiscrepancyReport:
    per_layer: list[tuple[str, float, float]]  # (layer_id, mean_gap, var_gap)
    batches_evaluated: int


def _unwrap(model_or_teacher):
    return model_or_teacher.model if hasattr(model_or_teacher, "model") \
        else model_or_teacher


def pairwise_mean_cosine(vectors: torch.Tensor) -> float:
    """Mean cosine similarity over all unordered pairs of row vectors."""
    normed = vectors / vectors.norm(dim=1, keepdim=True).clamp_min(1e-12)
    sim = normed @ normed.T
    n = vectors.shape[0]
    idx = torch.triu_indices(n, n, offset=1)
    return float(sim[idx[0], idx[1]].mean())


def intraclass_cosine(distilled: SyntheticSet, embed_model) -> DiversityReport:
    """Mean pairwise cosine of penultimate-layer embeddings, per class."""
    if distilled.ipc < 2:
        raise InsufficientSamples(
            f"diversity needs ipc >= 2, got {distilled.ipc}")
    model = _unwrap(embed_model)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        feats = model.features(distilled.images)
    model.train(was_training)
    labels = distilled.labels.numpy()
    per_class = {}
    for cls in sorted(set(labels.tolist())):
        members = np.nonzero(labels == cls)[0]
        if len(members) < 2:
            raise InsufficientSamples(f"class {cls} has fewer than 2 samples")
        per_class[int(cls)] = pairwise_mean_cosine(feats[members])
    overall = float(np.mean(list(per_class.values())))
    return DiversityReport(per_class=per_class, overall_mean=overall,
                           embed_arch=model.spec.arch_id)


def bn_discrepancy(synthetic_batches, teacher) -> BNDiscrepancyReport:
    """Per-layer L2 gaps between batch statistics and running statistics,
    averaged over the given batches."""
    batches = list(synthetic_batches)
    if not batches:
        raise EmptyBatch("bn_discrepancy needs at least one batch")
    model = _unwrap(teacher)
    running = read_running_stats(model)
    sums = None
    for batch in batches:
        cap = capture_batch_stats(model, batch)
        gaps = []
        for run_layer, batch_layer in zip(running.per_layer, cap.stats.per_layer):
            mean_gap = float(torch.linalg.vector_norm(
                batch_layer.mean - run_layer.mean))
            var_gap = float(torch.linalg.vector_norm(
                batch_layer.variance - run_layer.variance))
            gaps.append((run_layer.layer_id, mean_gap, var_gap))
        if sums is None:
            sums = [[lid, m, v] for lid, m, v in gaps]
        else:
            for acc, (_, m, v) in zip(sums, gaps):
                acc[1] += m
                acc[2] += v
    n = len(batches)
    per_layer = [(lid, m / n, v / n) for lid, m, v in sums]
    return BNDiscrepancyReport(per_layer=per_layer, batches_evaluated=n)


def emit_curves(traces, labels, out_dir) -> dict:
    """Write train/test top-1 curves (PNG) and a merged CSV for the runs."""
    traces = list(traces)
    labels = list(labels)
    if not traces or len(traces) != len(labels):
        raise AlignmentError("need one label per trace and at least one trace")
    epochs = traces[0].epochs()
    if not epochs:
        raise AlignmentError("traces are empty")
    for t in traces[1:]:
        if t.epochs() != epochs:
            raise AlignmentError("traces are not aligned on epochs")

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "curves.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "epoch", "train_top1", "test_top1",
                         "mean_loss", "lr"])
        for label, trace in zip(labels, traces):
            for row in trace.per_epoch:
                writer.writerow([label, row.epoch, row.train_top1, row.test_top1,
                                 row.mean_loss, row.lr])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for label, trace in zip(labels, traces):
        axes[0].plot(epochs, trace.column("train_top1"), label=label)
        axes[1].plot(epochs, trace.column("test_top1"), label=label)
    for ax, title in zip(axes, ("train top-1", "test top-1")):
        ax.set_xlabel("epoch")
        ax.set_ylabel("%")
        ax.set_title(title)
        ax.legend()
    fig.tight_layout()
    png_path = os.path.join(out_dir, "curves.png")
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "png": png_path}


def timing_probe(run_log) -> float:
    """Mean wall milliseconds per optimized image per iteration.

    ``run_log`` is a mapping {"marks_ms": [...], "images_per_iteration": n}, a
    list of such mappings (averaged), or a path to a timing CSV with columns
    (iteration, mark_ms, images).
    """
    if isinstance(run_log, (str, os.PathLike)):
        marks, images = [], None
        with open(run_log, newline="") as fh:
            for rec in csv.DictReader(fh):
                marks.append(float(rec["mark_ms"]))
                images = int(rec["images"])
        if images is None:
            raise IncompleteLog(f"no timing rows in {run_log}")
        run_log = {"marks_ms": marks, "images_per_iteration": images}
    if isinstance(run_log, dict):
        run_log = [run_log]

    per_image = []
    for entry in run_log:
        marks = entry.get("marks_ms")
        images = entry.get("images_per_iteration")
        if not marks or len(marks) < 2 or not images:
            raise IncompleteLog("timing log needs >= 2 marks and an image count")
        deltas = np.diff(np.asarray(marks, dtype=np.float64))
        per_image.append(float(deltas.mean()) / images)
    return float(np.mean(per_image))
