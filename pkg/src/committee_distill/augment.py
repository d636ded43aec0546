"""Differentiable batch augmentation: random resized crop and horizontal flip.

Crops are applied with bilinear ``grid_sample`` so gradients reach the source
pixels; flips reverse the sampling grid. All randomness comes from an explicit
numpy Generator, which keeps every consumer replayable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .errors import ShapeError


@dataclass(frozen=True)
class AugmentFlags:
    random_resized_crop: bool = True
    horizontal_flip: bool = True
    cutmix: bool = False
    rrc_scale: tuple[float, float] = (0.25, 1.0)
    rrc_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)

    @property
    def any_geometric(self):
        return self.random_resized_crop or self.horizontal_flip


def sample_crop_boxes(rng: np.random.Generator, n: int, height: int, width: int,
                      scale=(0.25, 1.0), ratio=(0.75, 4.0 / 3.0)) -> np.ndarray:
    """Sample (top, left, h, w) integer boxes, torchvision-style with fallback."""
    boxes = np.empty((n, 4), dtype=np.int64)
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    area = height * width
    for i in range(n):
        for _ in range(10):
            target_area = area * rng.uniform(scale[0], scale[1])
            aspect = math.exp(rng.uniform(*log_ratio))
            w = int(round(math.sqrt(target_area * aspect)))
            h = int(round(math.sqrt(target_area / aspect)))
            if 0 < w <= width and 0 < h <= height:
                top = int(rng.integers(0, height - h + 1))
                left = int(rng.integers(0, width - w + 1))
                boxes[i] = (top, left, h, w)
                break
        else:
            # center fallback, clamped to the valid aspect range
            w = min(width, height)
            boxes[i] = ((height - w) // 2, (width - w) // 2, w, w)
    return boxes


def crop_and_resize(batch: torch.Tensor, boxes: np.ndarray,
                    out_hw: tuple[int, int]) -> torch.Tensor:
    """Differentiable per-image crop + bilinear resize via one grid_sample call."""
    if batch.dim() != 4:
        raise ShapeError(f"expected NCHW batch, got {tuple(batch.shape)}")
    n, _, height, width = batch.shape
    oh, ow = out_hw
    theta = torch.zeros(n, 2, 3, dtype=batch.dtype, device=batch.device)
    for i, (top, left, h, w) in enumerate(boxes):
        # map output [-1,1] onto the crop box in normalized input coords
        theta[i, 0, 0] = w / width
        theta[i, 0, 2] = (2 * left + w) / width - 1
        theta[i, 1, 1] = h / height
        theta[i, 1, 2] = (2 * top + h) / height - 1
    grid = F.affine_grid(theta, (n, batch.shape[1], oh, ow), align_corners=False)
    return F.grid_sample(batch, grid, mode="bilinear", padding_mode="zeros",
                         align_corners=False)


def flip_horizontal(batch: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    """Flip the selected images by index reversal along the width axis."""
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return batch
    out = batch.clone() if not batch.requires_grad else batch
    if batch.requires_grad:
        # keep it out-of-place so autograd tracks the flip
        parts = [batch[i:i + 1].flip(-1) if mask[i] else batch[i:i + 1]
                 for i in range(batch.shape[0])]
        return torch.cat(parts, dim=0)
    out[idx] = out[idx].flip(-1)
    return out


def augment_batch(batch: torch.Tensor, flags: AugmentFlags,
                  rng: np.random.Generator) -> torch.Tensor:
    """Random resized crop then horizontal flip (p=0.5 each image)."""
    if batch.dim() != 4:
        raise ShapeError(f"expected NCHW batch, got {tuple(batch.shape)}")
    out = batch
    n, _, h, w = batch.shape
    if flags.random_resized_crop:
        boxes = sample_crop_boxes(rng, n, h, w, flags.rrc_scale, flags.rrc_ratio)
        out = crop_and_resize(out, boxes, (h, w))
    if flags.horizontal_flip:
        mask = rng.random(n) < 0.5
        out = flip_horizontal(out, mask)
    return out
