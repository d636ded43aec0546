"""Learning-rate schedules shared by every training stage."""

from __future__ import annotations

import math

from .errors import RangeError


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0,
              cycles: int = 1) -> float:
    """Cosine annealing with ``cycles`` half-cosine cycles over ``total_steps``.

    Each cycle restarts at ``base_lr`` and decays to ``min_lr``; the very last
    step of the schedule lands on ``min_lr``.
    """
    if not 0 <= step <= total_steps:
        raise RangeError(f"step {step} outside [0, {total_steps}]")
    if cycles not in (1, 2):
        raise RangeError(f"cycles must be 1 or 2, got {cycles}")
    if min_lr < 0:
        raise RangeError(f"min_lr must be >= 0, got {min_lr}")
    if total_steps == 0:
        return base_lr
    if step == total_steps:
        return min_lr
    cycle_len = total_steps / cycles
    t = (step % cycle_len) / cycle_len
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))
