"""Dataset distillation by committee: synthesize a small surrogate dataset by
matching batch-norm statistics of a weighted committee of pre-trained
backbones, then train students on it with batch-specific soft labels."""

__version__ = "0.1.0"
